"""Equivariant layout encoder.

Encodes a scene graph into a fixed-size layout embedding by stacked
message-passing layers that update node features and node positions
together. Geometry enters the messages only through squared pairwise
distances, and relation edges contribute learned embeddings that carry no
positional information, so node features are invariant to global rotations
and translations of the scene while updated positions transform along with
the input (the update adds a gated sum of difference vectors, which rotates
with the frame).

Two deliberate modeling choices keep that invariance intact:

- the per-edge position gate is a *scalar*, so the update stays a linear
  combination of difference vectors;
- initial node features are built from semantic features only; coordinates
  are never concatenated into the feature channel.

Positions are carried in float64 (geometry precision survives large
translations); features, messages, and all learnable tensors are float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GraphError, ShapeError
from .nn import (
    Mlp,
    accumulate_grads,
    mlp_backward_cached,
    mlp_forward,
    mlp_forward_cached,
    mlp_grads_named,
    mlp_init,
    mlp_named,
)
from .rng import generator
from .scenegraph import EDGE_KINDS, RELATION_LABELS, SceneGraph

_LABEL_INDEX = {label: i for i, label in enumerate(RELATION_LABELS)}
_KIND_INDEX = {kind: i for i, kind in enumerate(EDGE_KINDS)}


@dataclass
class EquivariantLayer:
    """One message-passing layer: f_h updates features, f_x gates positions.

    Both take per-edge inputs [d2, h_dst, h_src, e_rel] of width 2d + 1 + e;
    f_h maps to d, f_x to a single scalar.
    """

    f_h: Mlp
    f_x: Mlp


@dataclass
class LayoutEncoder:
    input_proj: Mlp  # d_sem -> d, single linear layer
    layers: list[EquivariantLayer]
    relation_table: np.ndarray  # (n_kinds, n_labels, e_rel) float32, learned
    d: int
    e_rel: int
    d_sem: int

    @property
    def edge_dim(self) -> int:
        # learned relation row plus a one-hot of the edge kind
        return self.e_rel + len(EDGE_KINDS)


def new_layout_encoder(
    seed: int,
    d_sem: int,
    d: int = 64,
    e_rel: int = 8,
    n_layers: int = 3,
    hidden: int = 64,
) -> LayoutEncoder:
    edge_dim = e_rel + len(EDGE_KINDS)
    msg_in = 2 * d + 1 + edge_dim
    layers = [
        EquivariantLayer(
            f_h=mlp_init([msg_in, hidden, hidden, d], seed, "layout", i, "fh"),
            f_x=mlp_init([msg_in, hidden, hidden, 1], seed, "layout", i, "fx"),
        )
        for i in range(n_layers)
    ]
    table = (
        generator(seed, "layout", "relations")
        .standard_normal((len(EDGE_KINDS), len(RELATION_LABELS), e_rel))
        .astype(np.float32)
        * np.float32(0.3)
    )
    proj = mlp_init([d_sem, d], seed, "layout", "proj")
    return LayoutEncoder(
        input_proj=proj, layers=layers, relation_table=table, d=d, e_rel=e_rel, d_sem=d_sem
    )


def named_parameters(model: LayoutEncoder, prefix: str = "layout") -> dict[str, np.ndarray]:
    out = mlp_named(f"{prefix}.proj", model.input_proj)
    for i, layer in enumerate(model.layers):
        out.update(mlp_named(f"{prefix}.layer{i}.fh", layer.f_h))
        out.update(mlp_named(f"{prefix}.layer{i}.fx", layer.f_x))
    out[f"{prefix}.relations"] = model.relation_table
    return out


def init_node_features(model: LayoutEncoder, g: SceneGraph) -> np.ndarray:
    """h0 = input_proj(semantic feature); coordinates stay out of the feature channel."""
    if g.d_sem != model.d_sem:
        raise ShapeError(f"graph d_sem={g.d_sem} but encoder expects {model.d_sem}")
    if len(g) == 0:
        return np.zeros((0, model.d), dtype=np.float32)
    return mlp_forward(model.input_proj, g.features())


def _edge_arrays(
    model: LayoutEncoder, g: SceneGraph
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Gather (src_idx, dst_idx, kind_idx, label_idx, rel_rows) for all edges."""
    n_edges = len(g.edges)
    src = np.empty(n_edges, dtype=np.int64)
    dst = np.empty(n_edges, dtype=np.int64)
    kinds = np.empty(n_edges, dtype=np.int64)
    labels = np.empty(n_edges, dtype=np.int64)
    for i, edge in enumerate(g.edges):
        src[i] = g.node_index(edge.src)
        dst[i] = g.node_index(edge.dst)
        try:
            kinds[i] = _KIND_INDEX[edge.kind]
            labels[i] = _LABEL_INDEX[edge.relation]
        except KeyError as exc:
            raise GraphError(f"unknown relation label or kind on edge {edge}") from exc
    rel = np.zeros((n_edges, model.edge_dim), dtype=np.float32)
    if n_edges:
        rel[:, : model.e_rel] = model.relation_table[kinds, labels]
        rel[np.arange(n_edges), model.e_rel + kinds] = 1.0
    return src, dst, kinds, labels, rel


@dataclass
class LayerCache:
    src: np.ndarray
    dst: np.ndarray
    diff: np.ndarray  # (E, 3) float64, x_dst - x_src
    d2_f32: np.ndarray  # (E,) float32 squared distances as fed to the MLPs
    inv_deg: np.ndarray  # (E,) float64, 1 / (incoming degree of dst + 1)
    u: np.ndarray  # (E, 2d+1+e) f_h inputs
    fh_cache: list
    v: np.ndarray  # f_x inputs (uses updated features)
    fx_cache: list
    s: np.ndarray  # (E,) float32 tanh-gated f_x outputs
    n_nodes: int


def _layer_forward(
    layer: EquivariantLayer,
    h: np.ndarray,
    x: np.ndarray,
    src: np.ndarray,
    dst: np.ndarray,
    rel: np.ndarray,
    want_cache: bool,
) -> tuple[np.ndarray, np.ndarray, LayerCache | None]:
    n = h.shape[0]
    d = h.shape[1]
    if len(src) == 0:
        return h.copy(), x.copy(), (
            LayerCache(src, dst, np.zeros((0, 3)), np.zeros(0, np.float32),
                       np.zeros(0), np.zeros((0, 0), np.float32), [],
                       np.zeros((0, 0), np.float32), [], np.zeros(0, np.float32), n)
            if want_cache else None
        )

    diff = x[dst] - x[src]  # float64
    d2 = (diff * diff).sum(axis=1)
    d2_f32 = d2.astype(np.float32)

    u = np.concatenate([d2_f32[:, None], h[dst], h[src], rel], axis=1)
    if want_cache:
        msgs, fh_cache = mlp_forward_cached(layer.f_h, u)
    else:
        msgs, fh_cache = mlp_forward(layer.f_h, u), None
    h_next = h.copy()
    np.add.at(h_next, dst, msgs)

    # position gate reads the *updated* features
    v = np.concatenate([d2_f32[:, None], h_next[dst], h_next[src], rel], axis=1)
    if want_cache:
        raw, fx_cache = mlp_forward_cached(layer.f_x, v)
    else:
        raw, fx_cache = mlp_forward(layer.f_x, v), None
    s = np.tanh(raw[:, 0])

    # bounded gate + degree normalization keep coordinate updates stable
    deg = np.bincount(dst, minlength=n).astype(np.float64)
    inv_deg = 1.0 / (deg[dst] + 1.0)
    x_next = x.copy()
    np.add.at(x_next, dst, diff * (s.astype(np.float64) * inv_deg)[:, None])

    cache = (
        LayerCache(src, dst, diff, d2_f32, inv_deg, u, fh_cache, v, fx_cache, s, n)
        if want_cache
        else None
    )
    return h_next, x_next, cache


def egcl_forward(
    layer: EquivariantLayer,
    h: np.ndarray,
    x: np.ndarray,
    g: SceneGraph,
    model: LayoutEncoder,
) -> tuple[np.ndarray, np.ndarray]:
    """One layer over a graph: returns (updated features, updated positions)."""
    h = np.asarray(h, dtype=np.float32)
    x = np.asarray(x, dtype=np.float64)
    if h.shape[0] != len(g) or x.shape[0] != len(g):
        raise ShapeError(
            f"feature/position counts ({h.shape[0]}, {x.shape[0]}) "
            f"do not match node count {len(g)}"
        )
    src, dst, _, _, rel = _edge_arrays(model, g)
    h2, x2, _ = _layer_forward(layer, h, x, src, dst, rel, want_cache=False)
    return h2, x2


@dataclass
class EncodeCache:
    feats: np.ndarray
    proj_cache: list
    layer_caches: list[LayerCache]
    src: np.ndarray
    dst: np.ndarray
    kinds: np.ndarray
    labels: np.ndarray
    n_nodes: int


def encode_layout_cached(
    model: LayoutEncoder, g: SceneGraph
) -> tuple[np.ndarray, np.ndarray, EncodeCache | None]:
    """Run the full encoder; returns (layout vector, final positions, cache).

    An empty graph encodes to the zero vector (the layout-free case).
    """
    n = len(g)
    if n == 0:
        return np.zeros(model.d, dtype=np.float32), np.zeros((0, 3)), None
    if g.d_sem != model.d_sem:
        raise ShapeError(f"graph d_sem={g.d_sem} but encoder expects {model.d_sem}")
    feats = g.features()
    h, proj_cache = mlp_forward_cached(model.input_proj, feats)
    x = g.positions()
    src, dst, kinds, labels, rel = _edge_arrays(model, g)
    layer_caches: list[LayerCache] = []
    for layer in model.layers:
        h, x, lc = _layer_forward(layer, h, x, src, dst, rel, want_cache=True)
        layer_caches.append(lc)
    vec = h.mean(axis=0)
    cache = EncodeCache(feats, proj_cache, layer_caches, src, dst, kinds, labels, n)
    return vec, x, cache


def encode_layout(model: LayoutEncoder, g: SceneGraph) -> tuple[np.ndarray, np.ndarray]:
    vec, x, _ = encode_layout_cached(model, g)
    return vec, x


def _layer_backward(
    layer: EquivariantLayer,
    lc: LayerCache,
    gh2: np.ndarray,
    gx2: np.ndarray,
    d: int,
) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray], np.ndarray]:
    """Backprop one layer.

    Takes gradients on (h_next, x_next); returns gradients on (h, x), the
    layer's parameter grads (unprefixed names), and per-edge gradients on the
    relation embedding rows.
    """
    if len(lc.src) == 0:
        zero = {}
        for tag, net in (("fh", layer.f_h), ("fx", layer.f_x)):
            for i, lay in enumerate(net.layers):
                zero[f"{tag}.w{i}"] = np.zeros_like(lay.weight)
                zero[f"{tag}.b{i}"] = np.zeros_like(lay.bias)
        return gh2.copy(), gx2.copy(), zero, np.zeros((0, 0), np.float32)

    src, dst = lc.src, lc.dst
    s64 = lc.s.astype(np.float64)

    # --- position update:  x2 = x + scatter(diff * s * inv_deg) ---
    gx = gx2.copy()
    g_edge_pos = gx2[dst]  # (E, 3) gradient flowing into each edge's contribution
    gs = (g_edge_pos * lc.diff).sum(axis=1) * lc.inv_deg  # (E,)
    gdiff = g_edge_pos * (s64 * lc.inv_deg)[:, None]  # (E, 3)

    g_pre = (gs * (1.0 - s64 * s64)).astype(np.float32)  # through tanh
    fx_grads, gv = mlp_backward_cached(layer.f_x, lc.fx_cache, g_pre[:, None])
    gd2 = gv[:, 0].astype(np.float64)
    gh2_total = gh2.copy()
    np.add.at(gh2_total, dst, gv[:, 1 : 1 + d])
    np.add.at(gh2_total, src, gv[:, 1 + d : 1 + 2 * d])
    grel = gv[:, 1 + 2 * d :]

    # --- feature update:  h2 = h + scatter(f_h(u)) ---
    gh = gh2_total.copy()
    gm = gh2_total[dst]
    fh_grads, gu = mlp_backward_cached(layer.f_h, lc.fh_cache, gm)
    gd2 = gd2 + gu[:, 0].astype(np.float64)
    np.add.at(gh, dst, gu[:, 1 : 1 + d])
    np.add.at(gh, src, gu[:, 1 + d : 1 + 2 * d])
    grel = grel + gu[:, 1 + 2 * d :]

    # --- geometry chain:  d2 = ||diff||^2,  diff = x[dst] - x[src] ---
    gdiff = gdiff + 2.0 * lc.diff * gd2[:, None]
    np.add.at(gx, dst, gdiff)
    np.add.at(gx, src, -gdiff)

    grads = mlp_grads_named("fx", fx_grads)
    grads.update(mlp_grads_named("fh", fh_grads))
    return gh, gx, grads, grel


def zero_grads(model: LayoutEncoder, prefix: str = "layout") -> dict[str, np.ndarray]:
    return {name: np.zeros_like(p) for name, p in named_parameters(model, prefix).items()}


def layout_backward(
    model: LayoutEncoder,
    cache: EncodeCache | None,
    g_vec: np.ndarray,
    prefix: str = "layout",
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every encoder parameter.

    ``g_vec`` is the upstream gradient on the pooled layout vector; ``cache``
    comes from encode_layout_cached (None for the empty graph, which has no
    parameter dependence).
    """
    grads = zero_grads(model, prefix)
    if cache is None:
        return grads
    n = cache.n_nodes
    d = model.d
    gh = np.broadcast_to(np.asarray(g_vec, np.float32) / np.float32(n), (n, d)).copy()
    gx = np.zeros((n, 3), dtype=np.float64)
    gtable = grads[f"{prefix}.relations"]
    for i in range(len(model.layers) - 1, -1, -1):
        gh, gx, layer_grads, grel = _layer_backward(
            model.layers[i], cache.layer_caches[i], gh, gx, d
        )
        for name, g in layer_grads.items():
            grads[f"{prefix}.layer{i}.{name}"] += g
        if grel.size:
            np.add.at(gtable, (cache.kinds, cache.labels), grel[:, : model.e_rel])
    proj_grads, _ = mlp_backward_cached(model.input_proj, cache.proj_cache, gh)
    accumulate_grads(grads, mlp_grads_named(f"{prefix}.proj", proj_grads))
    return grads
