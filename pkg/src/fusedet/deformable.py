"""Cross-spectrum deformable attention and the map-level fusion stage.

One modality's refined map supplies queries; the other supplies keys and
values sampled at offset-perturbed reference points.  An offset network
(run on the key/value map) bends a uniform grid, bounded samples are
projected to keys/values, and a ConvFFN residual produces the updated map.
The two updated maps are then concatenated (thermal first) and mixed by a
pointwise convolution into the single query map the detector consumes.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import ops
from .autodiff import Node, ParamStore, as_node
from .errors import PreconditionError, ShapeError
from .neighborhood import NAConfig, init_na_params, na_forward


@dataclass(frozen=True)
class CDAConfig:
    r: int = 2
    s: float = 0.5
    k_off: int = 5
    channels: int = 8

    def __post_init__(self) -> None:
        if self.r < 1:
            raise PreconditionError(f"grid stride {self.r} must be >= 1")
        if self.s <= 0:
            raise PreconditionError(f"offset scale {self.s} must be positive")
        if self.k_off <= self.r or self.k_off % 2 == 0:
            raise PreconditionError(
                f"offset kernel side {self.k_off} must be odd and exceed stride {self.r}"
            )


@dataclass(frozen=True)
class FusionConfig:
    na: NAConfig
    cda: CDAConfig

    def __post_init__(self) -> None:
        if self.na.channels != self.cda.channels:
            raise PreconditionError("window attention and deformable stages disagree on channels")


def normalize_coords(px: np.ndarray, py: np.ndarray, h: int, w: int) -> np.ndarray:
    """Pixel coords -> normalized [-1, 1] (align-corners), stacked (2, N)."""
    xn = 2.0 * px / (w - 1) - 1.0 if w > 1 else np.zeros_like(px, dtype=np.float64)
    yn = 2.0 * py / (h - 1) - 1.0 if h > 1 else np.zeros_like(py, dtype=np.float64)
    return np.stack([np.asarray(xn, dtype=np.float64), np.asarray(yn, dtype=np.float64)])


@lru_cache(maxsize=None)
def reference_grid(h: int, w: int, r: int) -> np.ndarray:
    """Uniform lattice of (H/r)*(W/r) points at the cell centers of the
    downsampled partition, as normalized coords (2, N), row-major.

    Cached per geometry; callers treat the result as read-only.
    """
    if r < 1 or h % r or w % r:
        raise PreconditionError(f"map sides ({h}, {w}) not divisible by stride {r}")
    hg, wg = h // r, w // r
    ys = (np.arange(hg) + 0.5) * r - 0.5
    xs = (np.arange(wg) + 0.5) * r - 0.5
    py, px = np.meshgrid(ys, xs, indexing="ij")
    return normalize_coords(px.reshape(-1), py.reshape(-1), h, w)


def init_cda_params(store: ParamStore, prefix: str, cfg: CDAConfig) -> None:
    d, k = cfg.channels, cfg.k_off
    store.xavier_uniform(f"{prefix}.wu", (d, d), d, d)
    store.xavier_uniform(f"{prefix}.dw", (d, k, k), k * k, k * k)
    store.ones(f"{prefix}.ln_g", (d,))
    store.zeros(f"{prefix}.ln_b", (d,))
    # Zero start: training begins from the undeformed reference lattice.
    store.zeros(f"{prefix}.off_w", (2, d))
    store.zeros(f"{prefix}.off_b", (2,))
    for name in ("wq", "wk", "wv"):
        store.xavier_uniform(f"{prefix}.{name}", (d, d), d, d)
    store.xavier_uniform(f"{prefix}.ffn_w1", (2 * d, d), d, 2 * d)
    store.zeros(f"{prefix}.ffn_b1", (2 * d,))
    store.xavier_uniform(f"{prefix}.ffn_w2", (d, 2 * d), 2 * d, d)
    store.zeros(f"{prefix}.ffn_b2", (d,))


def init_fuse_params(store: ParamStore, prefix: str, channels: int) -> None:
    store.xavier_uniform(f"{prefix}.w", (channels, 2 * channels), 2 * channels, channels)
    store.zeros(f"{prefix}.b", (channels,))


def offset_net(f_src, cfg: CDAConfig, params: dict[str, Node], prefix: str) -> Node:
    """Predict one bounded 2-D offset per reference point: (2, H/r * W/r).

    conv1x1 -> depthwise k_off x k_off stride r -> LayerNorm -> GELU ->
    conv1x1 to two channels -> s * tanh.  Every entry lies in (-s, s).
    """
    f_src = as_node(f_src)
    _, h, w = f_src.value.shape
    u = ops.conv1x1(f_src, params[f"{prefix}.wu"])
    mid = ops.depthwise_conv(u, params[f"{prefix}.dw"], stride=cfg.r)
    mid = ops.layer_norm(mid, params[f"{prefix}.ln_g"], params[f"{prefix}.ln_b"])
    mid = ops.gelu(mid)
    raw = ops.conv1x1(mid, params[f"{prefix}.off_w"], params[f"{prefix}.off_b"])
    n = (h // cfg.r) * (w // cfg.r)
    return ops.tanh(raw.reshape((2, n))) * cfg.s


def deformed_coords(f_kv_src: np.ndarray, cfg: CDAConfig, params: dict[str, Node], prefix: str) -> np.ndarray:
    """Numeric sampling locations (reference grid plus predicted offsets)."""
    _, h, w = np.asarray(f_kv_src).shape
    dp = offset_net(f_kv_src, cfg, params, prefix)
    return reference_grid(h, w, cfg.r) + dp.value


def cda_forward(f_res, f_query_src, f_kv_src, cfg: CDAConfig, params: dict[str, Node], prefix: str) -> Node:
    """Update one modality from the other; output shape equals f_res."""
    f_res, f_query_src, f_kv_src = as_node(f_res), as_node(f_query_src), as_node(f_kv_src)
    if not (f_res.value.shape == f_query_src.value.shape == f_kv_src.value.shape):
        raise ShapeError(
            f"map shapes differ: {f_res.value.shape}, "
            f"{f_query_src.value.shape}, {f_kv_src.value.shape}"
        )
    d, h, w = f_res.value.shape
    if d != cfg.channels:
        raise ShapeError(f"map has {d} channels, config says {cfg.channels}")

    grid = reference_grid(h, w, cfg.r)
    coords = offset_net(f_kv_src, cfg, params, prefix) + grid
    sampled = ops.bilinear_sample(f_kv_src, coords)  # (D, N)
    keys = ops.matmul(params[f"{prefix}.wk"], sampled)
    vals = ops.matmul(params[f"{prefix}.wv"], sampled)

    q = ops.conv1x1(f_query_src, params[f"{prefix}.wq"])
    qf = q.transpose((1, 2, 0)).reshape((h * w, d))
    logits = ops.matmul(qf, keys) * (1.0 / np.sqrt(d))
    attn = ops.softmax(logits, axis=1)  # (HW, N)
    mixed = ops.matmul(attn, vals.transpose())  # (HW, D)
    mixed = mixed.reshape((h, w, d)).transpose((2, 0, 1))

    inner = f_query_src + mixed
    hidden = ops.relu(ops.conv1x1(inner, params[f"{prefix}.ffn_w1"], params[f"{prefix}.ffn_b1"]))
    return f_res + ops.conv1x1(hidden, params[f"{prefix}.ffn_w2"], params[f"{prefix}.ffn_b2"])


FUSE_MODES = ("cda", "concat", "add", "cmi-stub")


def fuse(f_a, f_b, mode: str, params: dict[str, Node], fusion_cfg: FusionConfig | None = None) -> Node:
    """Merge two equal-shape maps into one.

    concat: pointwise conv over the channel-stacked pair.  add: plain sum.
    cda: the full two-stage pipeline, treating f_a as the color map and
    f_b as the thermal map.  cmi-stub: reserved, always errors.
    """
    f_a, f_b = as_node(f_a), as_node(f_b)
    if f_a.value.shape != f_b.value.shape:
        raise ShapeError(f"cannot fuse shapes {f_a.value.shape} and {f_b.value.shape}")
    if mode == "concat":
        return ops.conv1x1(ops.concat([f_a, f_b], axis=0), params["fuse.w"], params["fuse.b"])
    if mode == "add":
        return f_a + f_b
    if mode == "cda":
        if fusion_cfg is None:
            raise PreconditionError("cda fusion needs a FusionConfig")
        return fusion_forward(f_a, f_b, fusion_cfg, params)
    if mode == "cmi-stub":
        raise NotImplementedError("common-modality interaction is not implemented")
    raise PreconditionError(f"unknown fusion mode {mode!r}; expected one of {FUSE_MODES}")


def fusion_forward(f_rgb, f_ir, cfg: FusionConfig, params: dict[str, Node]) -> Node:
    """Full fusion: per-modality window attention, bidirectional deformable
    cross-attention, then thermal-first concat + pointwise mixing."""
    fp_rgb = na_forward(f_rgb, cfg.na, params, "na_rgb")
    fp_ir = na_forward(f_ir, cfg.na, params, "na_ir")
    fpp_rgb = cda_forward(f_rgb, fp_rgb, fp_ir, cfg.cda, params, "cda_rgb")
    fpp_ir = cda_forward(f_ir, fp_ir, fp_rgb, cfg.cda, params, "cda_ir")
    return fuse(fpp_ir, fpp_rgb, "concat", params)


def fusion_grad_case(seed: int, channels: int = 3, hw: int = 4):
    """Seeded fusion configuration plus scalar objective for gradient audits.

    Offset weights and map contrast are scaled up so parameter gradients sit
    well above the central-difference noise floor on most seeds; callers
    screen candidates with min_abs_grad before running grad_check, because a
    chance near-cancellation in one entry makes that entry unresolvable by
    finite differences regardless of implementation correctness.
    """
    cfg = FusionConfig(
        na=NAConfig(k=3, channels=channels),
        cda=CDAConfig(r=2, s=0.5, k_off=3, channels=channels),
    )
    store = ParamStore(seed=seed)
    init_na_params(store, "na_rgb", channels)
    init_na_params(store, "na_ir", channels)
    init_cda_params(store, "cda_rgb", cfg.cda)
    init_cda_params(store, "cda_ir", cfg.cda)
    init_fuse_params(store, "fuse", channels)
    rng = np.random.default_rng(seed + 1000)
    for prefix in ("cda_rgb", "cda_ir"):
        store.set_array(f"{prefix}.off_w", 2.0 * rng.standard_normal((2, channels)))
        store.set_array(f"{prefix}.off_b", 0.3 * rng.standard_normal(2))
    f_rgb = 2.0 * rng.standard_normal((channels, hw, hw))
    f_ir = 2.0 * rng.standard_normal((channels, hw, hw))
    probe = rng.standard_normal((channels, hw, hw))

    def build(params: dict[str, Node]) -> Node:
        return (fusion_forward(f_rgb, f_ir, cfg, params) * probe).sum()

    return store, build
