"""Training objectives: per-anchor 3D/2D losses, BEV segmentation, weighted total.

Reductions: cross-entropy is averaged over all anchors; L1 regression is summed
over visible target slots of positive anchors and divided by the number of
such slots; visibility BCE is averaged over the slots of positive anchors.
Background anchors contribute only to the class term. Logits are clamped to
+-20 before any cross-entropy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .anchors import LaneTargets
from .core.model import RawPrediction
from .errors import ShapeMismatch
from .geometry import BevGridSpec

LOGIT_CLAMP = 20.0
PROB_EPS = 1.0 / (1.0 + math.exp(LOGIT_CLAMP))

# Defaults recorded for completeness; no optimizer is implemented here.
TRAIN_CONFIG = {"optimizer": "adam", "lr": 2e-4, "betas": (0.9, 0.999), "weight_decay": 1e-4,
                "batch_size": 8, "epochs": 100}


def _clamp(logits):
    logits = np.asarray(logits, dtype=np.float64)
    return np.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP), np.abs(logits) < LOGIT_CLAMP


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy over rows."""
    z, _ = _clamp(logits)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    return float(np.mean(lse - z[np.arange(len(z)), labels])) if len(z) else 0.0


def cross_entropy_grad(logits, labels):
    z, inside = _clamp(logits)
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(len(z)), labels] -= 1.0
    return p * inside / max(len(z), 1)


def bce_with_logits(logits, targets, mask=None):
    """Mean binary cross-entropy over entries where ``mask`` is True."""
    z, _ = _clamp(logits)
    t = np.asarray(targets, dtype=np.float64)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    if mask is not None:
        per = per[np.broadcast_to(mask, per.shape)]
    return float(per.mean()) if per.size else 0.0


def bce_with_logits_grad(logits, targets, mask=None):
    z, inside = _clamp(logits)
    t = np.asarray(targets, dtype=np.float64)
    g = (1.0 / (1.0 + np.exp(-z)) - t) * inside
    if mask is not None:
        m = np.broadcast_to(mask, g.shape)
        n = m.sum()
        return np.where(m, g, 0.0) / max(n, 1)
    return g / max(g.size, 1)


def _check(a, b, name):
    if np.shape(a) != np.shape(b):
        raise ShapeMismatch(f"{name}: prediction {np.shape(a)} vs target {np.shape(b)}")


def _reg_mask(tgt_vis, tgt_cls):
    return np.asarray(tgt_vis, bool) & (np.asarray(tgt_cls) > 0)[:, None]


def loss_3d_terms(pred: RawPrediction, tgt: LaneTargets) -> dict:
    _check(pred.x_off, tgt.x_off, "x")
    _check(pred.z, tgt.z, "z")
    _check(pred.vis_logits, tgt.vis, "vis")
    if pred.cls_logits.shape[0] != len(tgt.cls):
        raise ShapeMismatch("class logits / targets anchor count differ")
    mask = _reg_mask(tgt.vis, tgt.cls)
    n = mask.sum()
    reg = (np.abs(pred.x_off - tgt.x_off) + np.abs(pred.z - tgt.z))[mask].sum() / n if n else 0.0
    pos = tgt.cls > 0
    vis = bce_with_logits(pred.vis_logits[pos], tgt.vis[pos]) if pos.any() else 0.0
    return {"cls": cross_entropy(pred.cls_logits, tgt.cls), "reg": float(reg), "vis": vis}


def loss_3d(pred: RawPrediction, tgt: LaneTargets) -> float:
    """Class CE + masked L1 over (x, z) + visibility BCE."""
    return float(sum(loss_3d_terms(pred, tgt).values()))


def loss_3d_grad(pred: RawPrediction, tgt: LaneTargets) -> dict:
    mask = _reg_mask(tgt.vis, tgt.cls)
    n = max(mask.sum(), 1)
    pos = tgt.cls > 0
    g_vis = np.zeros_like(pred.vis_logits, dtype=np.float64)
    if pos.any():
        g_vis[pos] = bce_with_logits_grad(pred.vis_logits[pos], tgt.vis[pos])
    return {
        "cls_logits": cross_entropy_grad(pred.cls_logits, tgt.cls),
        "x_off": np.sign(pred.x_off - tgt.x_off) * mask / n,
        "z": np.sign(pred.z - tgt.z) * mask / n,
        "vis_logits": g_vis,
    }


def loss_2d_terms(pred: RawPrediction, tgt: LaneTargets) -> dict:
    if pred.u_off is None:
        raise ShapeMismatch("prediction carries no 2D outputs")
    _check(pred.u_off, tgt.u_off, "u")
    _check(pred.vis_logits_2d, tgt.vis_2d, "vis_2d")
    mask = _reg_mask(tgt.vis_2d, tgt.cls)
    n = mask.sum()
    reg = np.abs(pred.u_off - tgt.u_off)[mask].sum() / n if n else 0.0
    pos = tgt.cls > 0
    vis = bce_with_logits(pred.vis_logits_2d[pos], tgt.vis_2d[pos]) if pos.any() else 0.0
    return {"cls": cross_entropy(pred.cls_logits_2d, tgt.cls), "reg": float(reg), "vis": vis}


def loss_2d(pred: RawPrediction, tgt: LaneTargets) -> float:
    """Class CE + masked L1 over u + visibility BCE, in the front view."""
    return float(sum(loss_2d_terms(pred, tgt).values()))


def loss_2d_grad(pred: RawPrediction, tgt: LaneTargets) -> dict:
    mask = _reg_mask(tgt.vis_2d, tgt.cls)
    n = max(mask.sum(), 1)
    pos = tgt.cls > 0
    g_vis = np.zeros_like(pred.vis_logits_2d, dtype=np.float64)
    if pos.any():
        g_vis[pos] = bce_with_logits_grad(pred.vis_logits_2d[pos], tgt.vis_2d[pos])
    return {
        "cls_logits_2d": cross_entropy_grad(pred.cls_logits_2d, tgt.cls),
        "u_off": np.sign(pred.u_off - tgt.u_off) * mask / n,
        "vis_logits_2d": g_vis,
    }


# ---------------------------------------------------------------------------
# BEV segmentation


def bresenham(c0, r0, c1, r1):
    """Integer cells on the 8-connected line from (c0, r0) to (c1, r1), endpoints included."""
    cells = []
    dc, dr = abs(c1 - c0), -abs(r1 - r0)
    sc = 1 if c0 < c1 else -1
    sr = 1 if r0 < r1 else -1
    err = dc + dr
    c, r = c0, r0
    while True:
        cells.append((c, r))
        if c == c1 and r == r1:
            return cells
        e2 = 2 * err
        if e2 >= dr:
            err += dr
            c += sc
        if e2 <= dc:
            err += dc
            r += sr


def rasterize_bev_segmentation(lanes, spec: BevGridSpec) -> np.ndarray:
    """Binary (H_bev, W_bev) map with 1-cell-wide strokes along each visible lane run."""
    seg = np.zeros(spec.shape, dtype=np.uint8)
    H, W = spec.shape
    for lane in lanes:
        col, row = spec.to_cell(lane.x, lane.y)
        vis = lane.visibility
        for i in range(len(col)):
            if not vis[i]:
                continue
            if i + 1 < len(col) and vis[i + 1]:
                cells = bresenham(int(col[i]), int(row[i]), int(col[i + 1]), int(row[i + 1]))
            else:
                cells = [(int(col[i]), int(row[i]))]
            for c, r in cells:
                if 0 <= c < W and 0 <= r < H:
                    seg[r, c] = 1
    return seg


def loss_seg(pred, tgt) -> float:
    """Mean BCE between predicted probabilities and a binary target map."""
    _check(pred, tgt, "segmentation")
    p = np.clip(np.asarray(pred, dtype=np.float64), PROB_EPS, 1 - PROB_EPS)
    t = np.asarray(tgt, dtype=np.float64)
    return float(np.mean(-(t * np.log(p) + (1 - t) * np.log1p(-p))))


def loss_seg_grad(pred, tgt) -> np.ndarray:
    raw = np.asarray(pred, dtype=np.float64)
    p = np.clip(raw, PROB_EPS, 1 - PROB_EPS)
    t = np.asarray(tgt, dtype=np.float64)
    inside = (raw > PROB_EPS) & (raw < 1 - PROB_EPS)
    return (-t / p + (1 - t) / (1 - p)) * inside / p.size


# ---------------------------------------------------------------------------
# total


@dataclass
class LossWeights:
    """alpha, beta, gamma stored as log-weights so they stay positive when learned."""

    log_alpha: float = 0.0
    log_beta: float = 0.0
    log_gamma: float = 0.0

    @classmethod
    def from_weights(cls, alpha, beta, gamma):
        if min(alpha, beta, gamma) <= 0:
            raise ValueError("loss weights must be strictly positive")
        return cls(math.log(alpha), math.log(beta), math.log(gamma))

    @property
    def alpha(self):
        return math.exp(self.log_alpha)

    @property
    def beta(self):
        return math.exp(self.log_beta)

    @property
    def gamma(self):
        return math.exp(self.log_gamma)

    def to_record(self):
        return {"log_alpha": self.log_alpha, "log_beta": self.log_beta, "log_gamma": self.log_gamma}


def total_loss(l2d, l3d, lseg, w: LossWeights | None = None) -> float:
    w = w or LossWeights()
    return w.alpha * l2d + w.beta * l3d + w.gamma * lseg


def total_loss_grad(l2d, l3d, lseg, w: LossWeights) -> dict:
    """Derivatives w.r.t. the log-weights and the three components."""
    return {"log_alpha": w.alpha * l2d, "log_beta": w.beta * l3d, "log_gamma": w.gamma * lseg,
            "l2d": w.alpha, "l3d": w.beta, "lseg": w.gamma}
