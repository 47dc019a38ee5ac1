"""3D lane matching metric (F-score, near/far X/Z errors, category accuracy)
and a CULane-style 2D stroke-IoU F-score.

Lanes are compared at a fixed list of forward positions. At every position
where the ground truth is visible the per-position distance is the (x, z)
Euclidean gap, or ``max_dist`` when the prediction is absent. Matching is an
optimal one-to-one assignment on mean capped distance.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .anchors import Y_SAMPLES_3D
from .errors import DegenerateLane, FrameMismatch
from .geometry import DEFAULT_IMAGE_SIZE
from .lanes import Lane2D, Lane3D, resample_at_y


@dataclass(frozen=True)
class MatchConfig:
    max_dist: float = 1.5
    coverage_frac: float = 0.75
    y_samples: tuple = Y_SAMPLES_3D
    near_far_split: float = 40.0

    def __post_init__(self):
        if not 0 < self.coverage_frac <= 1:
            raise ValueError("coverage_frac must lie in (0, 1]")
        if not self.max_dist > 0:
            raise ValueError("max_dist must be positive")


@dataclass
class EvalReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    n_frames: int = 0
    # pooled |error| sums and counts: x_near, x_far, z_near, z_far
    err_sum: np.ndarray = field(default_factory=lambda: np.zeros(4))
    err_cnt: np.ndarray = field(default_factory=lambda: np.zeros(4, np.int64))
    cat_correct: int = 0

    @property
    def precision(self) -> float:
        if self.tp + self.fp:
            return self.tp / (self.tp + self.fp)
        return 1.0 if self.fn == 0 else 0.0

    @property
    def recall(self) -> float:
        if self.tp + self.fn:
            return self.tp / (self.tp + self.fn)
        return 1.0 if self.fp == 0 else 0.0

    @property
    def f_score(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0

    def _err(self, i):
        return float(self.err_sum[i] / self.err_cnt[i]) if self.err_cnt[i] else 0.0

    @property
    def x_err_near(self):
        return self._err(0)

    @property
    def x_err_far(self):
        return self._err(1)

    @property
    def z_err_near(self):
        return self._err(2)

    @property
    def z_err_far(self):
        return self._err(3)

    @property
    def category_accuracy(self) -> float:
        return self.cat_correct / self.tp if self.tp else 0.0

    def merge(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                          self.n_frames + other.n_frames, self.err_sum + other.err_sum,
                          self.err_cnt + other.err_cnt, self.cat_correct + other.cat_correct)

    def to_dict(self) -> dict:
        return {
            "f_score": self.f_score, "precision": self.precision, "recall": self.recall,
            "x_err_near": self.x_err_near, "x_err_far": self.x_err_far,
            "z_err_near": self.z_err_near, "z_err_far": self.z_err_far,
            "category_accuracy": self.category_accuracy,
            "tp": self.tp, "fp": self.fp, "fn": self.fn, "n_frames": self.n_frames,
        }

    def format_text(self, digits=3) -> str:
        rows = [("F-score", self.f_score), ("precision", self.precision), ("recall", self.recall),
                ("category accuracy", self.category_accuracy),
                ("x error near (m)", self.x_err_near), ("x error far (m)", self.x_err_far),
                ("z error near (m)", self.z_err_near), ("z error far (m)", self.z_err_far)]
        lines = [f"{name:<20}{val:.{digits}f}" for name, val in rows]
        lines.append(f"{'TP/FP/FN':<20}{self.tp}/{self.fp}/{self.fn}")
        lines.append(f"{'frames':<20}{self.n_frames}")
        return "\n".join(lines)


def leading_monotone_run(lane: Lane3D) -> Lane3D:
    """Longest run from the near end over which y keeps increasing (a folded lane's first leg)."""
    if lane.y[0] > lane.y[-1] or (lane.y[0] == lane.y[-1] and lane.y[1] < lane.y[0]):
        lane = lane.replace(points=lane.points[::-1], visibility=lane.visibility[::-1])
    d = np.diff(lane.y)
    stop = np.flatnonzero(d <= 0)
    n = stop[0] + 1 if len(stop) else len(lane.points)
    if n < 2:
        raise DegenerateLane("lane does not advance in y")
    return lane.replace(points=lane.points[:n], visibility=lane.visibility[:n])


def _sample(lane: Lane3D, ys):
    ys = np.asarray(ys, dtype=np.float64)
    try:
        return resample_at_y(lane, ys)
    except DegenerateLane:
        return resample_at_y(leading_monotone_run(lane), ys)


def lane_pair_distance(pred: Lane3D, gt: Lane3D, cfg: MatchConfig = MatchConfig()):
    """Per-position distances (NaN where the GT is invisible) and the GT coverage mask."""
    px, pz, pv = _sample(pred, cfg.y_samples)
    gx, gz, gv = _sample(gt, cfg.y_samples)
    return _pair_distance((px, pz, pv), (gx, gz, gv), cfg.max_dist)


def _pair_distance(p, g, max_dist):
    px, pz, pv = p
    gx, gz, gv = g
    d = np.where(pv, np.hypot(px - gx, pz - gz), max_dist)
    return np.where(gv, d, np.nan), gv.copy()


@dataclass
class Matching:
    pairs: list  # (pred index, gt index) from the assignment
    tp: list  # bool per pair
    cost: np.ndarray
    pred_kept: list  # indices of predictions with visible samples
    gt_kept: list


def _visible_samples(lanes, cfg):
    kept, samples = [], []
    for i, lane in enumerate(lanes):
        s = _sample(lane, cfg.y_samples)
        if s[2].any():
            kept.append(i)
            samples.append(s)
    return kept, samples


def match_lanes(preds, gts, cfg: MatchConfig = MatchConfig()) -> Matching:
    """Optimal one-to-one matching; lanes with no visible sample are discarded first."""
    pk, ps = _visible_samples(preds, cfg)
    gk, gs = _visible_samples(gts, cfg)
    return _match_samples(pk, ps, gk, gs, cfg)


def _match_samples(pk, ps, gk, gs, cfg):
    cost = np.zeros((len(ps), len(gs)))
    hits = np.zeros((len(ps), len(gs)))
    for i, p in enumerate(ps):
        for j, g in enumerate(gs):
            d, cov = _pair_distance(p, g, cfg.max_dist)
            dc = d[cov]
            cost[i, j] = np.mean(np.minimum(dc, cfg.max_dist))
            hits[i, j] = np.mean(dc < cfg.max_dist)
    if cost.size == 0:
        return Matching([], [], cost, pk, gk)
    rows, cols = linear_sum_assignment(cost)
    pairs = [(pk[r], gk[c]) for r, c in zip(rows, cols)]
    tp = [bool(hits[r, c] >= cfg.coverage_frac) for r, c in zip(rows, cols)]
    return Matching(pairs, tp, cost, pk, gk)


def _lanes_of(frame):
    return frame.lanes_3d if hasattr(frame, "lanes_3d") else frame


def eval_frame(preds, gts, cfg: MatchConfig = MatchConfig()) -> EvalReport:
    pk, ps = _visible_samples(preds, cfg)
    gk, gs = _visible_samples(gts, cfg)
    m = _match_samples(pk, ps, gk, gs, cfg)
    rep = EvalReport(n_frames=1)
    ys = np.asarray(cfg.y_samples, dtype=np.float64)
    near = ys < cfg.near_far_split
    pmap, gmap = dict(zip(pk, ps)), dict(zip(gk, gs))
    for (pi, gi), ok in zip(m.pairs, m.tp):
        if not ok:
            continue
        rep.tp += 1
        (px, pz, pv), (gx, gz, gv) = pmap[pi], gmap[gi]
        both = pv & gv
        ex, ez = np.abs(px - gx), np.abs(pz - gz)
        for k, (err, part) in enumerate([(ex, near), (ex, ~near), (ez, near), (ez, ~near)]):
            sel = both & part
            rep.err_sum[k] += err[sel].sum()
            rep.err_cnt[k] += sel.sum()
        rep.cat_correct += int(int(preds[pi].category) == int(gts[gi].category))
    rep.fp = len(pk) - rep.tp
    rep.fn = len(gk) - rep.tp
    return rep


def _check_frames(pred_frames, gt_frames):
    if len(pred_frames) != len(gt_frames):
        raise FrameMismatch(f"{len(pred_frames)} prediction frames vs {len(gt_frames)} ground-truth frames")
    for p, g in zip(pred_frames, gt_frames):
        pid, gid = getattr(p, "frame_id", None), getattr(g, "frame_id", None)
        if pid and gid and pid != gid:
            raise FrameMismatch(f"frame ids differ: {pid!r} vs {gid!r}")


def eval3d(pred_frames, gt_frames, cfg: MatchConfig = MatchConfig(), frame_filter=None) -> EvalReport:
    """Aggregate counts and pooled errors over aligned frames (FrameRecords or lane lists)."""
    _check_frames(pred_frames, gt_frames)
    rep = EvalReport()
    for p, g in zip(pred_frames, gt_frames):
        if frame_filter is not None and not frame_filter(g):
            continue
        rep = rep.merge(eval_frame(list(_lanes_of(p)), list(_lanes_of(g)), cfg))
    return rep


# ---------------------------------------------------------------------------
# 2D


def rasterize_stroke(lane: Lane2D, image_size=DEFAULT_IMAGE_SIZE, width=30.0) -> np.ndarray:
    """Pixels whose centers lie within width/2 of a segment's interior (flat ends)
    or of an interior vertex (round joints) of the lane's visible polyline."""
    h, w = image_size
    mask = np.zeros((h, w), bool)
    pts = lane.points[lane.visibility] if lane.visibility is not None else lane.points
    if len(pts) < 2:
        return mask
    r = width / 2.0
    for k, (a, b) in enumerate(zip(pts[:-1], pts[1:])):
        lo = np.floor(np.minimum(a, b) - r).astype(int)
        hi = np.ceil(np.maximum(a, b) + r).astype(int)
        u0, v0 = max(lo[0], 0), max(lo[1], 0)
        u1, v1 = min(hi[0], w - 1), min(hi[1], h - 1)
        if u0 > u1 or v0 > v1:
            continue
        vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1]
        q = np.stack([uu, vv], axis=-1).astype(np.float64) - a
        d = b - a
        dd = float(d @ d)
        if dd > 0:
            t = (q @ d) / dd
            perp = np.abs(q[..., 0] * d[1] - q[..., 1] * d[0]) / np.sqrt(dd)
            mask[v0:v1 + 1, u0:u1 + 1] |= (t >= 0) & (t <= 1) & (perp <= r)
        if 0 < k:
            mask[v0:v1 + 1, u0:u1 + 1] |= np.hypot(q[..., 0], q[..., 1]) <= r
    return mask


def mask_iou(a, b) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def eval2d_culane(pred_frames, gt_frames, img_size=DEFAULT_IMAGE_SIZE, iou_thresh=0.5,
                  width=30.0) -> EvalReport:
    """Stroke-IoU matching; only the counts (and hence P/R/F) are filled in."""
    _check_frames(pred_frames, gt_frames)
    rep = EvalReport()
    for pf, gf in zip(pred_frames, gt_frames):
        preds = list(pf.lanes_2d if hasattr(pf, "lanes_2d") else pf)
        gts = list(gf.lanes_2d if hasattr(gf, "lanes_2d") else gf)
        pm = [rasterize_stroke(l, img_size, width) for l in preds]
        gm = [rasterize_stroke(l, img_size, width) for l in gts]
        pm = [m for m in pm if m.any()]
        gm = [m for m in gm if m.any()]
        tp = 0
        if pm and gm:
            iou = np.array([[mask_iou(a, b) for b in gm] for a in pm])
            r, c = linear_sum_assignment(-iou)
            tp = int(np.sum(iou[r, c] >= iou_thresh))
        rep = rep.merge(EvalReport(tp, len(pm) - tp, len(gm) - tp, 1))
    return rep
