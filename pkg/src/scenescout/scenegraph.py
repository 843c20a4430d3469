"""Scene graphs: typed nodes, dual-kind relation edges, rigid transforms,
and a JSON serialization format.

Positions are float64 3-vectors in meters (geometry stays in double precision
so large translations do not erode downstream invariance checks); node
semantic features are float32. Graphs are immutable values; every operation
returns a new graph.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GraphError, ParseError, TransformError

RELATION_LABELS = (
    "on",
    "under",
    "adjacent",
    "facing",
    "inside",
    "supports",
    "left-of",
    "right-of",
    "in-front-of",
    "behind",
    "same-style",
    "same-function",
)

EDGE_KINDS = ("physical", "semantic")

# relations that describe function/style rather than placement
SEMANTIC_LABELS = ("same-style", "same-function")


@dataclass(frozen=True, eq=False)
class SceneNode:
    node_id: str
    position: np.ndarray  # (3,) float64, meters
    semantic_feature: np.ndarray  # (d_sem,) float32
    asset_id: str | None = None
    category: str = ""
    style: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "position", np.asarray(self.position, dtype=np.float64).reshape(3)
        )
        object.__setattr__(
            self,
            "semantic_feature",
            np.asarray(self.semantic_feature, dtype=np.float32).ravel(),
        )
        if not np.all(np.isfinite(self.position)):
            raise GraphError(f"node {self.node_id!r} has a non-finite position")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SceneNode):
            return NotImplemented
        return (
            self.node_id == other.node_id
            and np.array_equal(self.position, other.position)
            and np.array_equal(self.semantic_feature, other.semantic_feature)
            and self.asset_id == other.asset_id
            and self.category == other.category
            and self.style == other.style
        )


@dataclass(frozen=True)
class SceneEdge:
    src: str
    dst: str
    kind: str  # "physical" | "semantic"
    relation: str

    def __post_init__(self) -> None:
        if self.kind not in EDGE_KINDS:
            raise GraphError(f"unknown edge kind {self.kind!r}")
        if self.relation not in RELATION_LABELS:
            raise GraphError(f"unknown relation label {self.relation!r}")
        if self.src == self.dst:
            raise GraphError(f"self-edge on node {self.src!r}")


@dataclass(frozen=True, eq=False)
class SceneGraph:
    nodes: tuple[SceneNode, ...]
    edges: tuple[SceneEdge, ...]
    d_sem: int
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        index: dict[str, int] = {}
        for i, node in enumerate(self.nodes):
            if node.node_id in index:
                raise GraphError(f"duplicate node_id {node.node_id!r}")
            if node.semantic_feature.shape != (self.d_sem,):
                raise GraphError(
                    f"node {node.node_id!r} feature has dim "
                    f"{node.semantic_feature.shape[0]}, graph d_sem={self.d_sem}"
                )
            index[node.node_id] = i
        seen: set[tuple[str, str, str]] = set()
        for edge in self.edges:
            for endpoint in (edge.src, edge.dst):
                if endpoint not in index:
                    raise GraphError(f"edge references missing node {endpoint!r}")
            key = (edge.src, edge.dst, edge.kind)
            if key in seen:
                raise GraphError(f"duplicate edge {key}")
            seen.add(key)
        object.__setattr__(self, "_index", index)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SceneGraph):
            return NotImplemented
        return (
            self.d_sem == other.d_sem
            and self.nodes == other.nodes
            and self.edges == other.edges
        )

    def __len__(self) -> int:
        return len(self.nodes)

    def node_index(self, node_id: str) -> int:
        try:
            return self._index[node_id]
        except KeyError:
            raise GraphError(f"no node with id {node_id!r}") from None

    def has_node(self, node_id: str) -> bool:
        return node_id in self._index

    def positions(self) -> np.ndarray:
        """(n, 3) float64 stacked positions (copy)."""
        if not self.nodes:
            return np.zeros((0, 3), dtype=np.float64)
        return np.stack([n.position for n in self.nodes])

    def features(self) -> np.ndarray:
        """(n, d_sem) float32 stacked semantic features (copy)."""
        if not self.nodes:
            return np.zeros((0, self.d_sem), dtype=np.float32)
        return np.stack([n.semantic_feature for n in self.nodes])


def empty_graph(d_sem: int) -> SceneGraph:
    return SceneGraph(nodes=(), edges=(), d_sem=d_sem)


def build_graph(
    nodes: list[SceneNode],
    physical_relations: list[tuple[str, str, str]] = (),
    semantic_relations: list[tuple[str, str, str]] = (),
) -> SceneGraph:
    """Assemble a validated graph from nodes and (src, dst, label) relations.

    Edges are deduplicated by (src, dst, kind), keeping the first occurrence.
    """
    d_sem = nodes[0].semantic_feature.shape[0] if nodes else 0
    edges: list[SceneEdge] = []
    seen: set[tuple[str, str, str]] = set()
    for kind, relations in (("physical", physical_relations), ("semantic", semantic_relations)):
        for src, dst, label in relations:
            key = (src, dst, kind)
            if key in seen:
                continue
            seen.add(key)
            edges.append(SceneEdge(src=src, dst=dst, kind=kind, relation=label))
    return SceneGraph(nodes=tuple(nodes), edges=tuple(edges), d_sem=d_sem)


@dataclass(frozen=True, eq=False)
class RigidTransform:
    rotation: np.ndarray  # (3, 3) float64, orthogonal
    translation: np.ndarray  # (3,) float64, meters

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        )
        object.__setattr__(
            self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3)
        )

    def validate(self) -> None:
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-5:
            raise TransformError(f"rotation is not orthogonal (max |R^T R - I| = {err:.2e})")
        det = float(np.linalg.det(self.rotation))
        if abs(abs(det) - 1.0) > 1e-5:
            raise TransformError(f"rotation determinant {det:.6f} is not ±1")

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (n, 3) or (3,) points through rotation·x + translation."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation


def identity_transform() -> RigidTransform:
    return RigidTransform(np.eye(3), np.zeros(3))


def compose_transforms(t2: RigidTransform, t1: RigidTransform) -> RigidTransform:
    """Transform equal to applying t1 first, then t2."""
    return RigidTransform(
        rotation=t2.rotation @ t1.rotation,
        translation=t2.rotation @ t1.translation + t2.translation,
    )


def random_rigid_transform(
    rng: np.random.Generator,
    max_angle: float = np.pi,
    max_translation: float = 100.0,
) -> RigidTransform:
    """Random proper rotation (angle ≤ max_angle about a random axis) + translation."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-max_angle, max_angle)
    k = np.array(
        [[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]]
    )
    rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
    trans = rng.uniform(-max_translation, max_translation, size=3)
    return RigidTransform(rotation=rot, translation=trans)


def apply_rigid_transform(g: SceneGraph, t: RigidTransform) -> SceneGraph:
    """Map every node position through the transform; everything else untouched."""
    t.validate()
    nodes = tuple(replace(n, position=t.apply(n.position)) for n in g.nodes)
    return SceneGraph(nodes=nodes, edges=g.edges, d_sem=g.d_sem)


# ---------------------------------------------------------------------------
# JSON serialization
#
# {"d_sem": int,
#  "nodes": [{"id", "position": [x,y,z], "feature": [...], "asset_id"?,
#             "category", "style"}],
#  "edges": [{"src", "dst", "kind": "physical"|"semantic", "relation": label}]}
# ---------------------------------------------------------------------------


def graph_to_dict(g: SceneGraph) -> dict:
    nodes = []
    for n in g.nodes:
        entry = {
            "id": n.node_id,
            "position": [float(v) for v in n.position],
            "feature": [float(v) for v in n.semantic_feature],
            "category": n.category,
            "style": n.style,
        }
        if n.asset_id is not None:
            entry["asset_id"] = n.asset_id
        nodes.append(entry)
    edges = [
        {"src": e.src, "dst": e.dst, "kind": e.kind, "relation": e.relation}
        for e in g.edges
    ]
    return {"d_sem": g.d_sem, "nodes": nodes, "edges": edges}


def graph_from_dict(data: dict) -> SceneGraph:
    try:
        d_sem = int(data["d_sem"])
        nodes = tuple(
            SceneNode(
                node_id=str(entry["id"]),
                position=np.asarray(entry["position"], dtype=np.float64),
                semantic_feature=np.asarray(entry["feature"], dtype=np.float32),
                asset_id=entry.get("asset_id"),
                category=str(entry.get("category", "")),
                style=str(entry.get("style", "")),
            )
            for entry in data["nodes"]
        )
        edges = tuple(
            SceneEdge(
                src=str(entry["src"]),
                dst=str(entry["dst"]),
                kind=str(entry["kind"]),
                relation=str(entry["relation"]),
            )
            for entry in data["edges"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed scene JSON: {exc}") from exc
    try:
        return SceneGraph(nodes=nodes, edges=edges, d_sem=d_sem)
    except GraphError as exc:
        raise ParseError(f"scene file violates a graph invariant: {exc}") from exc


def serialize(g: SceneGraph) -> bytes:
    """UTF-8 JSON text; round trip is value-exact on every field."""
    return json.dumps(graph_to_dict(g), indent=1).encode("utf-8")


def deserialize(data: bytes | str) -> SceneGraph:
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        parsed = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(parsed, dict):
        raise ParseError("scene file must contain a JSON object")
    return graph_from_dict(parsed)


def load_scene(path: str) -> SceneGraph:
    with open(path, "rb") as fh:
        return deserialize(fh.read())


def save_scene(g: SceneGraph, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(g))
