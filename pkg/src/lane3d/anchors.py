"""Unified BEV / front-view anchors, GT association and target encoding."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLane, NoAnchorAvailable
from .geometry import (DEFAULT_IMAGE_SIZE, BevGridSpec, CameraParams, project_points,
                       row_to_ground_y)
from .lanes import NUM_CATEGORIES, Lane2D, Lane3D, resample_at_v, resample_at_y

Y_SAMPLES_3D = (5.0, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 60.0, 80.0, 100.0)
NUM_V_SAMPLES = 72
START_SPACING_CELLS = 8
# ordered by lateral slope cot(phi): -2, -1, -0.5, 0, 0.5, 1, 2
ANCHOR_ANGLES = (
    math.atan(-0.5), math.atan(-1.0), math.atan(-2.0), math.pi / 2,
    math.atan(2.0), math.atan(1.0), math.atan(0.5),
)
NUM_CLASSES = NUM_CATEGORIES + 1  # class 0 is background, class k+1 is LaneCategory(k)


def default_v_samples(image_size=DEFAULT_IMAGE_SIZE) -> np.ndarray:
    return np.linspace(0.0, image_size[0] - 1.0, NUM_V_SAMPLES)


def grid_angle_to_metric_slope(phi: float, spec: BevGridSpec) -> float:
    """dx/dy in meters for a line at grid angle ``phi`` (measured from the x axis)."""
    cot = math.cos(phi) / math.sin(phi)
    if abs(cot) < 1e-15:
        cot = 0.0
    return cot * spec.cell_width / spec.cell_height


@dataclass(frozen=True, eq=False)
class AnchorSet:
    """Paired 3D/2D anchors, indexed ``start * len(angles) + angle``."""

    spec: BevGridSpec
    cam: CameraParams
    image_size: tuple
    starts_x: np.ndarray  # (S,)
    angles: np.ndarray  # (7,)
    y_samples_3d: np.ndarray  # (10,)
    v_samples_2d: np.ndarray  # (72,)
    x_3d: np.ndarray  # (A, 10) BEV x of each anchor at y_samples_3d
    vis_3d: np.ndarray  # (A, 10)
    u_2d: np.ndarray  # (A, 72) image column at v_samples_2d (NaN where undefined)
    vis_2d: np.ndarray  # (A, 72)
    theta: np.ndarray  # (A,) incline of the projected anchor in the image
    start_index: np.ndarray  # (A,)
    angle_index: np.ndarray  # (A,)

    def __len__(self):
        return len(self.x_3d)

    @property
    def slopes(self) -> np.ndarray:
        return np.array([grid_angle_to_metric_slope(p, self.spec) for p in self.angles])

    def anchor_x_at(self, index: int, y) -> np.ndarray:
        """BEV x of anchor ``index`` at arbitrary y."""
        X = self.starts_x[self.start_index[index]]
        k = grid_angle_to_metric_slope(self.angles[self.angle_index[index]], self.spec)
        return X + (np.asarray(y, dtype=np.float64) - self.spec.y_extent[0]) * k

    def anchor_2d_at(self, index: int, v):
        """Image column of the projected anchor at row(s) ``v``, and whether it is defined."""
        v = np.asarray(v, dtype=np.float64)
        y = row_to_ground_y(v, self.cam)
        x = self.anchor_x_at(index, np.nan_to_num(y, nan=0.0))
        g = np.stack([x, np.nan_to_num(y, nan=1.0), np.zeros_like(x)], axis=-1)
        uv, depth = project_points(g, self.cam)
        x0, x1 = self.spec.x_extent
        y0, y1 = self.spec.y_extent
        ok = np.isfinite(y) & (depth > 0)
        inside = ok & (y >= y0) & (y <= y1) & (x >= x0) & (x <= x1)
        u = np.where(ok, uv[:, 0], np.nan)
        return u, inside


def build_anchor_set(spec: BevGridSpec | None = None, avg_cam: CameraParams | None = None,
                     image_size=DEFAULT_IMAGE_SIZE, v_samples=None) -> AnchorSet:
    """Start positions every 8 BEV columns (column 0 included) times 7 incline angles.

    Each BEV anchor is the ray from (X, y_min) at its grid angle; its 2D twin is
    the projection through ``avg_cam`` sampled at ``v_samples`` image rows.
    """
    from .geometry import default_camera

    spec = spec or BevGridSpec()
    avg_cam = avg_cam or default_camera()
    cols = np.arange(0, spec.width_cells, START_SPACING_CELLS)
    starts = spec.x_extent[0] + cols * spec.cell_width
    angles = np.array(ANCHOR_ANGLES)
    ys = np.array(Y_SAMPLES_3D)
    vs = default_v_samples(image_size) if v_samples is None else np.asarray(v_samples, float)
    S, G = len(starts), len(angles)
    start_index = np.repeat(np.arange(S), G)
    angle_index = np.tile(np.arange(G), S)
    slopes = np.array([grid_angle_to_metric_slope(p, spec) for p in angles])

    x_3d = starts[start_index, None] + (ys[None, :] - spec.y_extent[0]) * slopes[angle_index, None]
    x0, x1 = spec.x_extent
    vis_3d = (x_3d >= x0) & (x_3d <= x1) & (ys >= spec.y_extent[0]) & (ys <= spec.y_extent[1])

    aset = AnchorSet(spec, avg_cam, tuple(image_size), starts, angles, ys, vs,
                     x_3d, vis_3d, np.empty((0, len(vs))), np.empty((0, len(vs)), bool),
                     np.empty(0), start_index, angle_index)
    u_2d = np.empty((S * G, len(vs)))
    vis_2d = np.empty((S * G, len(vs)), bool)
    for a in range(S * G):
        u_2d[a], vis_2d[a] = aset.anchor_2d_at(a, vs)
    theta = np.full(S * G, np.nan)
    for a in range(S * G):
        idx = np.flatnonzero(vis_2d[a])
        if len(idx) >= 2:
            i, j = idx[-1], idx[0]  # bottom-most and top-most defined rows
            theta[a] = math.atan2(vs[i] - vs[j], u_2d[a, j] - u_2d[a, i])
    return AnchorSet(spec, avg_cam, tuple(image_size), starts, angles, ys, vs,
                     x_3d, vis_3d, u_2d, vis_2d, theta, start_index, angle_index)


def anchor_distance(lane_samples, anchor_x) -> float:
    """Mean |lane x - anchor x| over the lane's visible sample positions (inf if none).

    ``lane_samples`` is ``(x_vec, vis_vec)`` or the ``(x_vec, z_vec, vis_vec)``
    triple returned by :func:`resample_at_y`.
    """
    x = np.asarray(lane_samples[0], dtype=np.float64)
    vis = np.asarray(lane_samples[-1], dtype=bool)
    if not vis.any():
        return math.inf
    return float(np.mean(np.abs(x[vis] - np.asarray(anchor_x, dtype=np.float64)[vis])))


def distance_matrix(gt_lanes, anchors: AnchorSet, mode: str = "3d") -> np.ndarray:
    """(G, A) matrix of anchor distances; 3D uses BEV x, 2D uses image u."""
    D = np.full((len(gt_lanes), len(anchors)), math.inf)
    for g, lane in enumerate(gt_lanes):
        if mode == "3d":
            x, _, vis = resample_at_y(lane, anchors.y_samples_3d)
            ref = anchors.x_3d
        elif mode == "2d":
            x, vis = resample_at_v(lane, anchors.v_samples_2d)
            ref = anchors.u_2d
        else:
            raise ValueError(f"unknown mode {mode!r}")
        if not vis.any():
            continue
        with np.errstate(invalid="ignore"):
            diff = np.abs(ref[:, vis] - x[vis][None, :])
        D[g] = np.where(np.isnan(diff).any(axis=1), math.inf, diff.mean(axis=1) if diff.size else math.inf)
    return D


def associate(gt_lanes, anchors: AnchorSet, mode: str = "3d") -> dict:
    """Greedy one-to-one GT-to-anchor assignment by ascending distance.

    Returns ``{gt_index: anchor_index}``; GT lanes with no visible sample are
    left out. Anchors not in the map are background.
    """
    if len(gt_lanes) > len(anchors):
        raise NoAnchorAvailable(f"{len(gt_lanes)} lanes but only {len(anchors)} anchors")
    D = distance_matrix(gt_lanes, anchors, mode)
    flat = np.argsort(D, axis=None, kind="stable")
    out, claimed = {}, set()
    for f in flat:
        g, a = divmod(int(f), D.shape[1])
        if not math.isfinite(D[g, a]):
            break
        if g in out or a in claimed:
            continue
        out[g] = a
        claimed.add(a)
        if len(out) == len(gt_lanes):
            break
    return out


@dataclass(eq=False)
class LaneTargets:
    """Per-anchor training targets (class 0 = background)."""

    cls: np.ndarray  # (A,) int
    x_off: np.ndarray  # (A, 10)
    z: np.ndarray  # (A, 10)
    vis: np.ndarray  # (A, 10) bool
    u_off: np.ndarray  # (A, 72)
    vis_2d: np.ndarray  # (A, 72) bool

    @classmethod
    def background(cls, n_anchors: int, n_y: int = len(Y_SAMPLES_3D), n_v: int = NUM_V_SAMPLES):
        return cls(np.zeros(n_anchors, np.int64), np.zeros((n_anchors, n_y)),
                   np.zeros((n_anchors, n_y)), np.zeros((n_anchors, n_y), bool),
                   np.zeros((n_anchors, n_v)), np.zeros((n_anchors, n_v), bool))

    @property
    def positive(self) -> np.ndarray:
        return self.cls > 0


@dataclass(frozen=True)
class AnchorTarget:
    """Targets of a single (lane, anchor) pair."""

    cls: int
    x_off: np.ndarray
    z: np.ndarray
    vis: np.ndarray
    u_off: np.ndarray
    vis_2d: np.ndarray


def encode_targets(gt3d: Lane3D, gt2d: Lane2D | None, anchor: int, anchors: AnchorSet) -> AnchorTarget:
    """Offsets of the resampled GT relative to anchor ``anchor``; z is absolute."""
    x, z, vis = resample_at_y(gt3d, anchors.y_samples_3d)
    x_off = x - anchors.x_3d[anchor]
    n_v = len(anchors.v_samples_2d)
    if gt2d is not None:
        u, vis2 = resample_at_v(gt2d, anchors.v_samples_2d)
        ref = anchors.u_2d[anchor]
        vis2 = vis2 & np.isfinite(ref)
        u_off = np.where(np.isfinite(ref), u - np.nan_to_num(ref), 0.0)
    else:
        u_off, vis2 = np.zeros(n_v), np.zeros(n_v, bool)
    return AnchorTarget(int(gt3d.category) + 1, x_off, z, vis, u_off, vis2)


def decode_prediction(anchor: int, raw: AnchorTarget, anchors: AnchorSet, track_id: int = 0):
    """Inverse of :func:`encode_targets`: (Lane3D, Lane2D) at the fixed sample positions."""
    if raw.cls <= 0:
        raise DegenerateLane("background anchor has no lane")
    from .lanes import LaneCategory

    cat = LaneCategory(raw.cls - 1)
    ys = anchors.y_samples_3d
    x = np.asarray(raw.x_off) + anchors.x_3d[anchor]
    lane3d = Lane3D(np.stack([x, ys, np.asarray(raw.z, dtype=np.float64)], axis=1),
                    np.asarray(raw.vis, bool), cat, track_id)
    ref = anchors.u_2d[anchor]
    u = np.asarray(raw.u_off) + np.nan_to_num(ref)
    lane2d = Lane2D(np.stack([u, anchors.v_samples_2d], axis=1),
                    np.asarray(raw.vis_2d, bool) & np.isfinite(ref), cat, track_id)
    return lane3d, lane2d


def build_targets(gt3d_lanes, gt2d_lanes, anchors: AnchorSet, assignment: dict | None = None) -> LaneTargets:
    """Full per-anchor target set for one frame (2D lanes paired by track_id)."""
    if assignment is None:
        assignment = associate(gt3d_lanes, anchors)
    by_track = {l.track_id: l for l in (gt2d_lanes or [])}
    t = LaneTargets.background(len(anchors), len(anchors.y_samples_3d), len(anchors.v_samples_2d))
    for g, a in assignment.items():
        lane = gt3d_lanes[g]
        enc = encode_targets(lane, by_track.get(lane.track_id), a, anchors)
        t.cls[a] = enc.cls
        t.x_off[a], t.z[a], t.vis[a] = enc.x_off, enc.z, enc.vis
        t.u_off[a], t.vis_2d[a] = enc.u_off, enc.vis_2d
    return t


def decode_frame(cls_scores: np.ndarray, x_off, z, vis_prob, anchors: AnchorSet,
                 score_threshold: float = 0.5, vis_threshold: float = 0.5):
    """Per-anchor lanes whose best non-background class probability exceeds the threshold."""
    from .lanes import LaneCategory

    out = []
    probs = np.asarray(cls_scores)
    for a in range(len(anchors)):
        k = int(np.argmax(probs[a, 1:])) + 1
        if probs[a, k] <= score_threshold:
            continue
        vis = np.asarray(vis_prob[a]) > vis_threshold
        if vis.sum() < 2:
            continue
        x = np.asarray(x_off[a]) + anchors.x_3d[a]
        out.append(Lane3D(np.stack([x, anchors.y_samples_3d, np.asarray(z[a])], axis=1),
                          vis, LaneCategory(k - 1), track_id=a))
    return out
