"""Modality-aware query construction.

A fusion tower turns a bundle of per-modality feature vectors (any subset of
text / image / pointcloud) into one embedding: each present modality is
projected into the shared space, absent slots are represented by learned mask
tokens (never read from the bundle), and a pluggable strategy combines the
three slots. Query embeddings additionally take a residual, gated layout
vector before L2 normalization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GalleryError, NumericError, QueryError, ShapeError
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

MODALITIES = ("text", "image", "pointcloud")
FUSION_VARIANTS = ("mean", "mlp", "masked_mlp", "gated", "attention")


@dataclass(frozen=True)
class ModalityBundle:
    """Optional per-modality feature vectors plus an explicit presence mask.

    ``presence`` defaults to "field is not None"; a slot can carry stale data
    while being marked absent, and fusion must never read it.
    """

    text: np.ndarray | None = None
    image: np.ndarray | None = None
    pointcloud: np.ndarray | None = None
    presence: tuple[bool, bool, bool] | None = None

    def __post_init__(self) -> None:
        if self.presence is None:
            object.__setattr__(
                self,
                "presence",
                (self.text is not None, self.image is not None, self.pointcloud is not None),
            )
        for present, name in zip(self.presence, MODALITIES):
            if not present:
                continue
            data = getattr(self, name)
            if data is None:
                raise QueryError(f"modality {name!r} marked present but has no data")
            if not np.all(np.isfinite(data)):
                raise QueryError(f"modality {name!r} contains non-finite values")

    def get(self, index: int) -> np.ndarray | None:
        return getattr(self, MODALITIES[index])

    @property
    def present_indices(self) -> list[int]:
        return [i for i, p in enumerate(self.presence) if p]

    @property
    def present_count(self) -> int:
        return sum(self.presence)

    def restrict(self, keep: set[str]) -> "ModalityBundle":
        """Drop modalities outside ``keep`` (intersection with what is present)."""
        fields = {}
        presence = []
        for i, name in enumerate(MODALITIES):
            hold = self.presence[i] and name in keep
            fields[name] = getattr(self, name) if hold else None
            presence.append(hold)
        return ModalityBundle(**fields, presence=tuple(presence))


def mask_modalities(
    bundle: ModalityBundle, drop_probability: float, rng: np.random.Generator
) -> ModalityBundle:
    """Independently drop each present modality; always keep at least one.

    If every present modality would be dropped, one of the originally present
    ones is retained uniformly at random.
    """
    if not 0.0 <= drop_probability <= 1.0:
        raise ConfigError(f"drop probability {drop_probability} outside [0, 1]")
    present = bundle.present_indices
    dropped = [i for i in present if rng.random() < drop_probability]
    if len(dropped) == len(present) and present:
        keep = present[int(rng.integers(len(present)))]
        dropped = [i for i in dropped if i != keep]
    if not dropped:
        return bundle
    fields = {
        name: (None if i in dropped else getattr(bundle, name))
        for i, name in enumerate(MODALITIES)
    }
    presence = tuple(
        bundle.presence[i] and i not in dropped for i in range(len(MODALITIES))
    )
    return ModalityBundle(**fields, presence=presence)


@dataclass
class LambdaGate:
    """Learnable scalar controlling the layout residual; stored as a (1,) array."""

    value: np.ndarray

    @classmethod
    def init(cls, value: float = 0.1) -> "LambdaGate":
        return cls(np.array([value], dtype=np.float32))

    @property
    def scalar(self) -> np.float32:
        return np.float32(self.value[0])


@dataclass(frozen=True)
class QueryEmbedding:
    vector: np.ndarray  # (d,) float32, unit norm


@dataclass
class FusionTower:
    """Per-modality projections + one fusion strategy + mask tokens."""

    proj: list[Mlp]  # 3 projections, d_sem -> d
    variant: str
    mask_tokens: np.ndarray  # (3, d) float32
    d: int
    fusion_mlp: Mlp | None = None  # "mlp" (3d -> d) or "masked_mlp" (d -> d)
    gate: Mlp | None = None  # "gated": d -> 1
    wq: np.ndarray | None = None  # "attention": (d, d) each
    wk: np.ndarray | None = None
    wv: np.ndarray | None = None
    slot_id: np.ndarray | None = None  # (3, d) modality-identity tags
    zero_pad_absent: bool = False  # ablation: zeros instead of mask tokens


def new_tower(
    seed: int,
    d_sem: int,
    d: int,
    variant: str = "attention",
    hidden: int = 64,
    zero_pad_absent: bool = False,
    tag: str = "tower",
) -> FusionTower:
    if variant not in FUSION_VARIANTS:
        raise ConfigError(f"unknown fusion variant {variant!r}; expected one of {FUSION_VARIANTS}")
    proj = [mlp_init([d_sem, d], seed, tag, "proj", m) for m in MODALITIES]
    mask_tokens = (
        generator(seed, tag, "mask_tokens").standard_normal((3, d)).astype(np.float32)
        * np.float32(0.3)
    )
    tower = FusionTower(
        proj=proj, variant=variant, mask_tokens=mask_tokens, d=d,
        zero_pad_absent=zero_pad_absent,
    )
    if variant == "mlp":
        tower.fusion_mlp = mlp_init([3 * d, hidden, d], seed, tag, "fusion_mlp")
    elif variant == "masked_mlp":
        tower.fusion_mlp = mlp_init([d, hidden, d], seed, tag, "masked_mlp")
    elif variant == "gated":
        tower.gate = mlp_init([d, 1], seed, tag, "gate")
    elif variant == "attention":
        rng = generator(seed, tag, "attention")
        scale = np.float32(1.0 / np.sqrt(d))
        tower.wq = (rng.standard_normal((d, d)) * scale).astype(np.float32)
        tower.wk = (rng.standard_normal((d, d)) * scale).astype(np.float32)
        tower.wv = (rng.standard_normal((d, d)) * scale).astype(np.float32)
        tower.slot_id = (rng.standard_normal((3, d)) * 0.3).astype(np.float32)
    return tower


def tower_named(tower: FusionTower, prefix: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, net in zip(MODALITIES, tower.proj):
        out.update(mlp_named(f"{prefix}.proj_{name}", net))
    out[f"{prefix}.mask_tokens"] = tower.mask_tokens
    if tower.fusion_mlp is not None:
        out.update(mlp_named(f"{prefix}.fusion_mlp", tower.fusion_mlp))
    if tower.gate is not None:
        out.update(mlp_named(f"{prefix}.gate", tower.gate))
    if tower.wq is not None:
        out[f"{prefix}.attn_wq"] = tower.wq
        out[f"{prefix}.attn_wk"] = tower.wk
        out[f"{prefix}.attn_wv"] = tower.wv
        out[f"{prefix}.slot_id"] = tower.slot_id
    return out


# ---------------------------------------------------------------------------
# fuse
# ---------------------------------------------------------------------------


@dataclass
class FuseCache:
    slots: np.ndarray  # (3, d)
    presence: tuple[bool, bool, bool]
    proj_caches: list  # per-modality forward caches (None when absent)
    variant_cache: object


def _slots(tower: FusionTower, bundle: ModalityBundle, want_cache: bool):
    if bundle.present_count == 0:
        raise QueryError("cannot fuse an empty bundle: no modality present")
    slots = np.empty((3, tower.d), dtype=np.float32)
    proj_caches: list = [None, None, None]
    for i in range(3):
        if bundle.presence[i]:
            data = np.asarray(bundle.get(i), dtype=np.float32)
            if want_cache:
                slots[i], proj_caches[i] = mlp_forward_cached(tower.proj[i], data)
            else:
                slots[i] = mlp_forward(tower.proj[i], data)
        elif tower.zero_pad_absent:
            slots[i] = 0.0
        else:
            slots[i] = tower.mask_tokens[i]
    return slots, proj_caches


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def fuse_cached(tower: FusionTower, bundle: ModalityBundle) -> tuple[np.ndarray, FuseCache]:
    slots, proj_caches = _slots(tower, bundle, want_cache=True)
    variant_cache: object = None
    if tower.variant == "mean":
        out = slots.mean(axis=0)
    elif tower.variant == "mlp":
        flat = slots.reshape(-1)
        out, net_cache = mlp_forward_cached(tower.fusion_mlp, flat)
        variant_cache = net_cache
    elif tower.variant == "masked_mlp":
        idx = bundle.present_indices
        pooled = slots[idx].mean(axis=0)
        out, net_cache = mlp_forward_cached(tower.fusion_mlp, pooled)
        variant_cache = (idx, net_cache)
    elif tower.variant == "gated":
        z, gate_cache = mlp_forward_cached(tower.gate, slots)
        gates = 1.0 / (1.0 + np.exp(-z[:, 0]))
        out = (gates[:, None] * slots).sum(axis=0) / np.float32(3.0)
        variant_cache = (gates, gate_cache)
    elif tower.variant == "attention":
        z = slots + tower.slot_id
        q = z @ tower.wq.T
        k = z @ tower.wk.T
        v = z @ tower.wv.T
        scores = (q @ k.T) / np.float32(np.sqrt(tower.d))
        attn = _softmax_rows(scores)
        mixed = attn @ v
        out = mixed.mean(axis=0)
        variant_cache = (z, q, k, v, attn)
    else:  # pragma: no cover - guarded at construction
        raise ConfigError(f"unknown fusion variant {tower.variant!r}")
    return out.astype(np.float32), FuseCache(slots, bundle.presence, proj_caches, variant_cache)


def fuse(tower: FusionTower, bundle: ModalityBundle) -> np.ndarray:
    out, _ = fuse_cached(tower, bundle)
    return out


def fuse_backward(
    tower: FusionTower, cache: FuseCache, gout: np.ndarray, prefix: str
) -> dict[str, np.ndarray]:
    """Parameter gradients of the fused output (no input gradients needed)."""
    gout = np.asarray(gout, dtype=np.float32)
    grads: dict[str, np.ndarray] = {}
    slots = cache.slots
    if tower.variant == "mean":
        gslots = np.repeat(gout[None, :] / np.float32(3.0), 3, axis=0)
    elif tower.variant == "mlp":
        net_grads, gflat = mlp_backward_cached(tower.fusion_mlp, cache.variant_cache, gout)
        grads.update(mlp_grads_named(f"{prefix}.fusion_mlp", net_grads))
        gslots = gflat.reshape(3, tower.d)
    elif tower.variant == "masked_mlp":
        idx, net_cache = cache.variant_cache
        net_grads, gpooled = mlp_backward_cached(tower.fusion_mlp, net_cache, gout)
        grads.update(mlp_grads_named(f"{prefix}.fusion_mlp", net_grads))
        gslots = np.zeros_like(slots)
        for i in idx:
            gslots[i] = gpooled / np.float32(len(idx))
    elif tower.variant == "gated":
        gates, gate_cache = cache.variant_cache
        third = np.float32(1.0 / 3.0)
        gslots = gates[:, None].astype(np.float32) * gout[None, :] * third
        g_gates = (slots @ gout) * third  # (3,)
        gz = (g_gates * gates * (1.0 - gates)).astype(np.float32)
        gate_grads, _ = mlp_backward_cached(tower.gate, gate_cache, gz[:, None])
        grads.update(mlp_grads_named(f"{prefix}.gate", gate_grads))
    elif tower.variant == "attention":
        z, q, k, v, attn = cache.variant_cache
        scale = np.float32(1.0 / np.sqrt(tower.d))
        gmixed = np.repeat(gout[None, :] / np.float32(3.0), 3, axis=0)
        gattn = gmixed @ v.T
        gv = attn.T @ gmixed
        gscores = attn * (gattn - (gattn * attn).sum(axis=1, keepdims=True))
        gq = gscores @ k * scale
        gk = gscores.T @ q * scale
        grads[f"{prefix}.attn_wq"] = gq.T @ z
        grads[f"{prefix}.attn_wk"] = gk.T @ z
        grads[f"{prefix}.attn_wv"] = gv.T @ z
        gz = gq @ tower.wq + gk @ tower.wk + gv @ tower.wv
        grads[f"{prefix}.slot_id"] = gz.copy()
        gslots = gz
    else:  # pragma: no cover
        raise ConfigError(f"unknown fusion variant {tower.variant!r}")

    gmask = np.zeros_like(tower.mask_tokens)
    for i, name in enumerate(MODALITIES):
        if cache.presence[i]:
            net_grads, _ = mlp_backward_cached(tower.proj[i], cache.proj_caches[i], gslots[i])
            accumulate_grads(grads, mlp_grads_named(f"{prefix}.proj_{name}", net_grads))
        elif not tower.zero_pad_absent:
            gmask[i] = gslots[i]
    grads[f"{prefix}.mask_tokens"] = gmask
    return grads


# ---------------------------------------------------------------------------
# query / gallery embeddings
# ---------------------------------------------------------------------------


@dataclass
class _NormCache:
    pre: np.ndarray
    norm: np.float32
    unit: np.ndarray


def _normalize_cached(pre: np.ndarray) -> tuple[np.ndarray, _NormCache]:
    norm = np.float32(np.linalg.norm(pre))
    if norm == 0.0 or not np.isfinite(norm):
        raise NumericError("cannot normalize a zero or non-finite query vector")
    unit = (pre / norm).astype(np.float32)
    return unit, _NormCache(pre, norm, unit)


def _normalize_backward(cache: _NormCache, gunit: np.ndarray) -> np.ndarray:
    y = cache.unit
    return ((gunit - y * np.dot(y, gunit)) / cache.norm).astype(np.float32)


@dataclass
class QueryCache:
    fuse_cache: FuseCache
    layout: np.ndarray
    lam: np.float32
    norm_cache: _NormCache


def compose_query_cached(
    tower: FusionTower,
    bundle: ModalityBundle,
    layout_vec: np.ndarray,
    lam: LambdaGate,
) -> tuple[QueryEmbedding, QueryCache]:
    layout_vec = np.asarray(layout_vec, dtype=np.float32)
    if layout_vec.shape != (tower.d,):
        raise ShapeError(f"layout vector has shape {layout_vec.shape}, expected ({tower.d},)")
    fused, fc = fuse_cached(tower, bundle)
    pre = fused + lam.scalar * layout_vec
    unit, ncache = _normalize_cached(pre)
    return QueryEmbedding(unit), QueryCache(fc, layout_vec, lam.scalar, ncache)


def compose_query(
    tower: FusionTower,
    bundle: ModalityBundle,
    layout_vec: np.ndarray,
    lam: LambdaGate,
) -> QueryEmbedding:
    emb, _ = compose_query_cached(tower, bundle, layout_vec, lam)
    return emb


def compose_query_backward(
    tower: FusionTower, cache: QueryCache, gvec: np.ndarray, prefix: str
) -> tuple[dict[str, np.ndarray], np.float32, np.ndarray]:
    """Returns (tower grads, dloss/dlambda, dloss/dlayout_vec)."""
    gpre = _normalize_backward(cache.norm_cache, np.asarray(gvec, np.float32))
    glam = np.float32(np.dot(gpre, cache.layout))
    glayout = (cache.lam * gpre).astype(np.float32)
    grads = fuse_backward(tower, cache.fuse_cache, gpre, prefix)
    return grads, glam, glayout


def encode_gallery_asset(tower: FusionTower, bundle: ModalityBundle) -> np.ndarray:
    """Gallery-side embedding; the gallery tower is modality-complete."""
    if bundle.present_count != 3:
        missing = [m for m, p in zip(MODALITIES, bundle.presence) if not p]
        raise GalleryError(f"gallery bundle is missing modalities: {missing}")
    fused = fuse(tower, bundle)
    unit, _ = _normalize_cached(fused)
    return unit


def encode_gallery_asset_cached(
    tower: FusionTower, bundle: ModalityBundle
) -> tuple[np.ndarray, tuple[FuseCache, _NormCache]]:
    if bundle.present_count != 3:
        missing = [m for m, p in zip(MODALITIES, bundle.presence) if not p]
        raise GalleryError(f"gallery bundle is missing modalities: {missing}")
    fused, fc = fuse_cached(tower, bundle)
    unit, ncache = _normalize_cached(fused)
    return unit, (fc, ncache)


def encode_gallery_asset_backward(
    tower: FusionTower,
    cache: tuple[FuseCache, _NormCache],
    gvec: np.ndarray,
    prefix: str,
) -> dict[str, np.ndarray]:
    fc, ncache = cache
    gpre = _normalize_backward(ncache, np.asarray(gvec, np.float32))
    return fuse_backward(tower, fc, gpre, prefix)
