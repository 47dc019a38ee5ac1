"""Desk-scale front-view to BEV transformer: per pyramid level, a learned
location-indexed BEV query goes through self-attention and a residual
feed-forward layer, then deformably attends its front-view level around the
IPM reference pixels. Lane heads sample the BEV features along anchors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..anchors import NUM_CLASSES, AnchorSet
from ..errors import ShapeMismatch
from ..geometry import DEFAULT_IMAGE_SIZE, BevGridSpec, CameraParams, build_ipm_grid
from .ops import (DeformAttnParams, SelfAttnParams, bilinear_sample,
                  deformable_cross_attention, self_attention)

DEFAULT_PYRAMID_SHAPES = ((180, 240), (90, 120), (45, 60), (22, 30))


@dataclass
class FeaturePyramid:
    """Front-view feature maps, finest first. Each level is (H, W, C) or (B, H, W, C)."""

    levels: list

    def __post_init__(self):
        if not self.levels:
            raise ShapeMismatch("pyramid needs at least one level")
        self.levels = [np.asarray(l) for l in self.levels]
        nd = self.levels[0].ndim
        if nd not in (3, 4) or any(l.ndim != nd for l in self.levels):
            raise ShapeMismatch("all levels must be (H, W, C) or all (B, H, W, C)")
        C = self.levels[0].shape[-1]
        if any(l.shape[-1] != C for l in self.levels):
            raise ShapeMismatch("all levels need the same channel count")
        for a, b in zip(self.levels, self.levels[1:]):
            ha, wa = a.shape[-3:-1]
            hb, wb = b.shape[-3:-1]
            if abs(hb - ha / 2) > 1 or abs(wb - wa / 2) > 1:
                raise ShapeMismatch("pyramid levels must halve in size")

    @property
    def batched(self) -> bool:
        return self.levels[0].ndim == 4

    @property
    def channels(self) -> int:
        return self.levels[0].shape[-1]

    @classmethod
    def random(cls, rng, shapes=DEFAULT_PYRAMID_SHAPES, channels=8, batch=None, dtype=np.float64):
        lead = () if batch is None else (batch,)
        return cls([rng.normal(size=lead + tuple(s) + (channels,)).astype(dtype) for s in shapes])


@dataclass
class LevelParams:
    bev_query: np.ndarray  # (H_bev*W_bev, C)
    self_attn: SelfAttnParams
    ffn_w1: np.ndarray  # (C, hidden)
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray  # (hidden, C)
    ffn_b2: np.ndarray
    deform: DeformAttnParams


@dataclass
class TransformerParams:
    levels: list = field(default_factory=list)
    bev_specs: list = field(default_factory=list)

    @classmethod
    def random(cls, rng, spec: BevGridSpec, n_levels=4, channels=8, heads=2, points=4,
               hidden=16, dtype=np.float64):
        levels, specs = [], []
        s = 1.0 / math.sqrt(channels)
        for l in range(n_levels):
            sp = spec.halved(l)
            n = sp.width_cells * sp.height_cells
            levels.append(LevelParams(
                bev_query=rng.normal(0, 1, (n, channels)).astype(dtype),
                self_attn=SelfAttnParams.random(rng, channels, dtype=dtype),
                ffn_w1=rng.normal(0, s, (channels, hidden)).astype(dtype),
                ffn_b1=np.zeros(hidden, dtype),
                ffn_w2=rng.normal(0, 1 / math.sqrt(hidden), (hidden, channels)).astype(dtype),
                ffn_b2=np.zeros(channels, dtype),
                deform=DeformAttnParams.random(rng, channels, heads, points, dtype=dtype),
            ))
            specs.append(sp)
        return cls(levels, specs)


def bev_queries(level: LevelParams) -> np.ndarray:
    """Q'_bev: self-attention over the learned query, then a residual 2-layer FFN."""
    q = self_attention(level.bev_query, level.self_attn)
    h = np.maximum(q @ level.ffn_w1 + level.ffn_b1, 0.0)
    return q + h @ level.ffn_w2 + level.ffn_b2


def level_reference(cam: CameraParams, spec: BevGridSpec, feature_hw, image_size=DEFAULT_IMAGE_SIZE):
    """IPM grid for a pyramid level whose resolution differs from the input image."""
    H, W = feature_hw
    cam_l = cam.scaled(W / image_size[1], H / image_size[0])
    return build_ipm_grid(cam_l, spec)


def persformer_forward(pyr: FeaturePyramid, cam: CameraParams, spec: BevGridSpec,
                       params: TransformerParams, image_size=DEFAULT_IMAGE_SIZE):
    """BEV feature map per pyramid level, each (H_bev_l, W_bev_l, C) (batched if the input is)."""
    if len(params.levels) != len(pyr.levels):
        raise ShapeMismatch("parameter levels must match pyramid levels")
    specs = params.bev_specs or [spec.halved(l) for l in range(len(pyr.levels))]
    out = []
    for feat, lp, sp in zip(pyr.levels, params.levels, specs):
        if lp.bev_query.shape[0] != sp.width_cells * sp.height_cells:
            raise ShapeMismatch("BEV query count does not match the level's grid")
        q = bev_queries(lp)
        grid = level_reference(cam, sp, feat.shape[-3:-1], image_size)
        ref, valid = grid.flat()
        items = feat[None] if feat.ndim == 3 else feat
        res = np.stack([
            deformable_cross_attention(q, item, ref, lp.deform, valid).reshape(sp.shape + (-1,))
            for item in items
        ])
        out.append(res[0] if feat.ndim == 3 else res)
    return out


# ---------------------------------------------------------------------------
# lane heads


@dataclass
class HeadWeights:
    w3d: np.ndarray  # (n_y * C, NUM_CLASSES + 3 * n_y)
    b3d: np.ndarray
    w2d: np.ndarray | None = None  # (n_v * C, NUM_CLASSES + 2 * n_v)
    b2d: np.ndarray | None = None

    @classmethod
    def random(cls, rng, channels, n_y=10, n_v=72, scale=0.1, with_2d=True, dtype=np.float64):
        w3d = rng.normal(0, scale, (n_y * channels, NUM_CLASSES + 3 * n_y)).astype(dtype)
        b3d = rng.normal(0, scale, NUM_CLASSES + 3 * n_y).astype(dtype)
        if not with_2d:
            return cls(w3d, b3d)
        w2d = rng.normal(0, scale, (n_v * channels, NUM_CLASSES + 2 * n_v)).astype(dtype)
        b2d = rng.normal(0, scale, NUM_CLASSES + 2 * n_v).astype(dtype)
        return cls(w3d, b3d, w2d, b2d)

    @classmethod
    def zeros(cls, channels, n_y=10, n_v=72, dtype=np.float64):
        return cls(np.zeros((n_y * channels, NUM_CLASSES + 3 * n_y), dtype),
                   np.zeros(NUM_CLASSES + 3 * n_y, dtype),
                   np.zeros((n_v * channels, NUM_CLASSES + 2 * n_v), dtype),
                   np.zeros(NUM_CLASSES + 2 * n_v, dtype))


@dataclass(eq=False)
class RawPrediction:
    """Unnormalized per-anchor head outputs."""

    cls_logits: np.ndarray  # (A, 15)
    x_off: np.ndarray  # (A, n_y)
    z: np.ndarray  # (A, n_y)
    vis_logits: np.ndarray  # (A, n_y)
    cls_logits_2d: np.ndarray | None = None
    u_off: np.ndarray | None = None  # (A, n_v)
    vis_logits_2d: np.ndarray | None = None


def anchor_bev_samples(f_bev, anchors: AnchorSet, spec: BevGridSpec):
    """(A, n_y, C) BEV features along each 3D anchor; anchors off the grid read zeros."""
    col, row = spec.to_grid(anchors.x_3d, np.broadcast_to(anchors.y_samples_3d, anchors.x_3d.shape))
    return bilinear_sample(f_bev, np.stack([col, row], axis=-1))


def anchor_fv_samples(f_fv, anchors: AnchorSet):
    """(A, n_v, C) front-view features along each 2D anchor (rows scaled to the level)."""
    H, W = f_fv.shape[:2]
    h_img, w_img = anchors.image_size
    u = (anchors.u_2d + 0.5) * (W / w_img) - 0.5
    v = (np.broadcast_to(anchors.v_samples_2d, u.shape) + 0.5) * (H / h_img) - 0.5
    p = np.stack([u, v], axis=-1)
    p = np.where(anchors.vis_2d[..., None], p, np.nan)
    return bilinear_sample(f_fv, p)


def prediction_heads(f_bev, anchors: AnchorSet, head_weights: HeadWeights, f_fv=None,
                     spec: BevGridSpec | None = None) -> RawPrediction:
    """Linear 3D head over BEV samples along anchors (and a 2D head over front-view samples)."""
    spec = spec or anchors.spec
    f_bev = np.asarray(f_bev)
    if f_bev.shape[:2] != spec.shape:
        raise ShapeMismatch(f"BEV features {f_bev.shape[:2]} do not match grid {spec.shape}")
    A, n_y = anchors.x_3d.shape
    feats = anchor_bev_samples(f_bev, anchors, spec).reshape(A, -1)
    if feats.shape[1] != head_weights.w3d.shape[0]:
        raise ShapeMismatch("3D head weights do not match n_y * C")
    o = feats @ head_weights.w3d + head_weights.b3d
    K = NUM_CLASSES
    pred = RawPrediction(o[:, :K], o[:, K:K + n_y], o[:, K + n_y:K + 2 * n_y], o[:, K + 2 * n_y:])
    if f_fv is not None:
        if head_weights.w2d is None:
            raise ShapeMismatch("2D head weights missing")
        n_v = anchors.u_2d.shape[1]
        f2 = anchor_fv_samples(np.asarray(f_fv), anchors).reshape(A, -1)
        if f2.shape[1] != head_weights.w2d.shape[0]:
            raise ShapeMismatch("2D head weights do not match n_v * C")
        o2 = f2 @ head_weights.w2d + head_weights.b2d
        pred.cls_logits_2d = o2[:, :K]
        pred.u_off = o2[:, K:K + n_v]
        pred.vis_logits_2d = o2[:, K + n_v:]
    return pred
