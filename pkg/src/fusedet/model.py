"""Model-level configuration, parameter-group initialization, and the
feature pipeline shared by training and inference.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

from .autodiff import Node, ParamStore
from .deformable import CDAConfig, FusionConfig, fuse, fusion_forward, init_cda_params, init_fuse_params
from .errors import PreconditionError
from .neighborhood import NAConfig, init_na_params
from .prototypes import GATE_MODES, init_cam_params


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 8
    classes_total: int = 3
    t_max: int = 4
    na_k: int = 3
    r: int = 2
    s: float = 0.5
    k_off: int = 5
    alpha: float = 20.0
    roi_out: int = 7
    roi_sampling: int = 2
    fusion_mode: str = "cda"
    gate_mode: str = "filter"
    score_thr: float = 0.3

    def __post_init__(self) -> None:
        if self.channels % 2:
            raise PreconditionError(f"channel count {self.channels} must be even")
        if self.classes_total < 1:
            raise PreconditionError("need at least one class")
        if self.t_max < 1:
            raise PreconditionError("episode slot capacity must be positive")
        if self.fusion_mode not in ("cda", "concat", "add"):
            raise PreconditionError(f"unknown fusion mode {self.fusion_mode!r}")
        if self.gate_mode not in GATE_MODES:
            raise PreconditionError(f"unknown gate mode {self.gate_mode!r}")
        if self.alpha <= 0:
            raise PreconditionError("cosine logit scale must be positive")
        if not 0 <= self.score_thr <= 1:
            raise PreconditionError(f"score threshold {self.score_thr} outside [0, 1]")

    def fusion_config(self) -> FusionConfig:
        return FusionConfig(
            na=NAConfig(k=self.na_k, channels=self.channels),
            cda=CDAConfig(r=self.r, s=self.s, k_off=self.k_off, channels=self.channels),
        )

    def with_updates(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Every parameter group the pipeline uses, under stable key prefixes."""
    store = ParamStore(seed=seed)
    d = cfg.channels
    fusion = cfg.fusion_config()
    init_na_params(store, "na_rgb", d)
    init_na_params(store, "na_ir", d)
    init_cda_params(store, "cda_rgb", fusion.cda)
    init_cda_params(store, "cda_ir", fusion.cda)
    init_fuse_params(store, "fuse", d)
    init_cam_params(store, "cam", d)
    store.xavier_uniform("head.box_w", (4, d), d, 4)
    store.zeros("head.box_b", (4,))
    store.xavier_uniform("head.obj_w", (1, d), d, 1)
    store.zeros("head.obj_b", (1,))
    store.xavier_uniform("meta.class_weights", (cfg.classes_total, d), d, cfg.classes_total)
    return store


def query_features(rgb, ir, cfg: ModelConfig, params: dict[str, Node]) -> Node:
    """The fused query map under the configured fusion mode.

    cda runs the full two-stage pipeline; concat and add are the map-level
    baselines run through the identical downstream harness.
    """
    if cfg.fusion_mode == "cda":
        return fusion_forward(rgb, ir, cfg.fusion_config(), params)
    if cfg.fusion_mode == "concat":
        return fuse(ir, rgb, "concat", params)
    return fuse(ir, rgb, "add", params)
