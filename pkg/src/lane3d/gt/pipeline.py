"""LiDAR-assisted 3D lane labels from 2D annotations.

Per frame, object-box points are dropped, the remaining points close to each
2D lane in the image are kept, and every annotation pixel is lifted to 3D from
its nearest kept points. Lifted lanes are spliced across the segment in the
world frame by track id. Each frame then receives the spliced lane in its ego
frame, trimmed to the BEV window, smoothed, and marked invisible beyond the
frame's own annotation.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..errors import DegenerateLane, InsufficientSupport, PoseMissing, StillMultivalued
from ..geometry import DEFAULT_IMAGE_SIZE, BevGridSpec, CameraParams, lift_pixel_to_depth, project_points
from ..lanes import Lane2D, Lane3D
from .fitting import fit_with_rotation, is_single_valued, outlier_mask, smooth_fit

log = logging.getLogger(__name__)


def remove_points_in_boxes(points, boxes) -> np.ndarray:
    """Drop points inside any axis-aligned box (x0, y0, z0, x1, y1, z1)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    keep = np.ones(len(pts), bool)
    for b in np.asarray(boxes, dtype=np.float64).reshape(-1, 6):
        keep &= ~np.all((pts >= b[:3]) & (pts <= b[3:]), axis=1)
    return pts[keep]


def point_polyline_distance(p, poly, chunk=4096) -> np.ndarray:
    """Exact Euclidean distance from each 2D point to a polyline (segments and vertices)."""
    p = np.asarray(p, dtype=np.float64).reshape(-1, 2)
    poly = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if len(poly) == 1:
        return np.linalg.norm(p - poly[0], axis=1)
    a, d = poly[:-1], np.diff(poly, axis=0)
    dd = np.einsum("ij,ij->i", d, d)
    safe = np.where(dd > 0, dd, 1.0)
    out = np.empty(len(p))
    for i in range(0, len(p), chunk):
        q = p[i:i + chunk, None, :] - a[None]
        t = np.clip(np.einsum("nsj,sj->ns", q, d) / safe, 0.0, 1.0) * (dd > 0)
        r = q - t[..., None] * d[None]
        out[i:i + chunk] = np.sqrt(np.min(np.einsum("nsj,nsj->ns", r, r), axis=1))
    return out


def near_polyline(p, poly, radius, chunk=16) -> np.ndarray:
    """Boolean mask of points within ``radius`` of the polyline (exact segment distance).

    Segments are grouped in runs of ``chunk``; only points inside a run's
    radius-padded bounding box are measured against it.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1, 2)
    poly = np.asarray(poly, dtype=np.float64).reshape(-1, 2)
    if len(poly) == 1:
        return np.linalg.norm(p - poly[0], axis=1) <= radius
    out = np.zeros(len(p), bool)
    for i in range(0, len(poly) - 1, chunk):
        run = poly[i:i + chunk + 1]
        lo, hi = run.min(axis=0) - radius, run.max(axis=0) + radius
        idx = np.flatnonzero(~out & np.all((p >= lo) & (p <= hi), axis=1))
        if len(idx):
            out[idx] = point_polyline_distance(p[idx], run) <= radius
    return out


def _in_image(uv, image_size):
    h, w = image_size
    return (np.isfinite(uv[:, 0]) & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1)
            & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1))


def filter_points_near_lane(frame, lane2d: Lane2D, cam: CameraParams, radius_px=8.0,
                            image_size=DEFAULT_IMAGE_SIZE) -> np.ndarray:
    """Points of ``frame`` (a LidarFrame or an (N, 3) array) whose in-image projection
    lies within ``radius_px`` of the 2D lane polyline."""
    pts = frame.points if hasattr(frame, "points") else np.asarray(frame, dtype=np.float64)
    uv, depth = project_points(pts, cam)
    cand = (depth > 0) & _in_image(uv, image_size)
    if not math.isfinite(radius_px):
        return pts[cand]
    poly = lane2d.points
    idx = np.flatnonzero(cand)
    return pts[idx[near_polyline(uv[idx], poly, radius_px)]]


def interpolate_lane_3d(lane2d: Lane2D, pts, cam: CameraParams, k=4, support_px=10.0,
                        return_mask=False, model_reach=3.0):
    """Lift each annotation pixel along its ray to a depth estimated from nearby points.

    Inverse camera depth is fitted as an affine function of the pixel over the
    ``k`` nearest supporting points (inverse-distance weighted, centered on the
    query). That model is exact for any locally planar surface. With fewer than
    three neighbours, or a degenerate layout, the weighted mean of inverse depth
    is used. Pixels with no point within ``support_px`` are dropped; the fit
    itself draws on neighbours up to ``model_reach * support_px`` away.

    Returns the lifted (M, 3) ego points, in annotation order (and the keep mask
    over annotation points when ``return_mask``).

    Raises:
        InsufficientSupport: fewer than 2 points given, or no pixel is supported.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 1:
        raise InsufficientSupport("no LiDAR points near the lane")
    uv, depth = project_points(pts, cam)
    ok = depth > 0
    uv, invd = uv[ok], 1.0 / depth[ok]
    if len(uv) == 0:
        raise InsufficientSupport("no LiDAR points in front of the camera")
    tree = cKDTree(uv)
    q = lane2d.points
    kk = min(k, len(uv))
    # the nearest point gates the pixel; the model may reach a little further so
    # that sparse rows near the image border still get three supports
    dist, nn = tree.query(q, k=kk, distance_upper_bound=model_reach * support_px)
    dist, nn = dist.reshape(len(q), kk), nn.reshape(len(q), kk)
    found = np.isfinite(dist)
    keep = dist[:, 0] <= support_px
    est = np.full(len(q), np.nan)
    for i in np.flatnonzero(keep):
        m = found[i]
        j = nn[i, m]
        w = 1.0 / (dist[i, m] + 1e-6)
        y = invd[j]
        est[i] = np.sum(w * y) / np.sum(w)
        if m.sum() >= 3:
            A = np.column_stack([np.ones(m.sum()), uv[j] - q[i]])
            sw = np.sqrt(w)
            sol, _, rank, sv = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)
            if rank == 3 and sv[-1] > 1e-9 * sv[0]:
                est[i] = sol[0]
    keep &= est > 0
    if not keep.any():
        raise InsufficientSupport("no annotation pixel has supporting points")
    lifted = lift_pixel_to_depth(q[keep], 1.0 / est[keep], cam)
    return (lifted, keep) if return_mask else lifted


# ---------------------------------------------------------------------------
# splicing


def _project_arclength(p, ref, ref_s):
    """Arc-length coordinate of points p on a polyline with vertex coordinates ref_s;
    beyond either end the end segment is extended."""
    if len(ref) == 1:
        return ref_s[0] + np.zeros(len(p))
    a, d = ref[:-1], np.diff(ref, axis=0)
    dd = np.maximum(np.einsum("ij,ij->i", d, d), 1e-12)
    q = p[:, None, :] - a[None]
    t_raw = np.einsum("nsj,sj->ns", q, d) / dd
    t = np.clip(t_raw, 0.0, 1.0)
    t[:, 0] = np.minimum(t_raw[:, 0], 1.0)
    t[:, -1] = np.maximum(t_raw[:, -1], 0.0)
    r = q - t[..., None] * d[None]
    best = np.argmin(np.einsum("nsj,nsj->ns", r, r), axis=1)
    n = np.arange(len(p))
    ds = np.diff(ref_s)
    return ref_s[best] + t[n, best] * ds[best]


def _reference(pts, s, spacing=1.0):
    """Bin-averaged polyline (2D) of points along their arc-length coordinate."""
    b = np.floor((s - s.min()) / spacing).astype(np.int64)
    counts = np.bincount(b)
    ok = counts > 0
    mean = lambda v: (np.bincount(b, v) / np.maximum(counts, 1))[ok]
    ref = np.column_stack([mean(pts[:, 0]), mean(pts[:, 1])])
    ref_s = mean(s)
    keep = np.r_[True, np.diff(ref_s) > 1e-9]
    return ref[keep], ref_s[keep]


def splice_segment(per_frame_lanes, poses) -> dict:
    """World-frame long lanes per track id, points ordered along arc length.

    ``per_frame_lanes[f]`` holds ego-frame Lane3D objects for frame f, whose
    points follow the annotation order.

    Raises:
        PoseMissing: a frame with lanes has no pose.
    """
    if len(poses) < len(per_frame_lanes):
        raise PoseMissing(f"{len(per_frame_lanes)} frames but {len(poses)} poses")
    tracks: dict = {}
    for f, lanes in enumerate(per_frame_lanes):
        if lanes and poses[f] is None:
            raise PoseMissing(f"frame {f} has no pose")
        for lane in lanes:
            tracks.setdefault(lane.track_id, []).append((f, lane))
    out = {}
    for tid, items in tracks.items():
        acc_p, acc_s = None, None
        meta = items[0][1]
        for f, lane in items:
            w = poses[f].ego_to_world(lane.points)
            if acc_p is None:
                seg = np.linalg.norm(np.diff(w[:, :2], axis=0), axis=1)
                s = np.concatenate([[0.0], np.cumsum(seg)])
                acc_p, acc_s = w, s
                continue
            ref, ref_s = _reference(acc_p, acc_s)
            s = _project_arclength(w[:, :2], ref, ref_s)
            acc_p, acc_s = np.vstack([acc_p, w]), np.concatenate([acc_s, s])
        order = np.argsort(acc_s, kind="stable")
        out[tid] = Lane3D(acc_p[order], category=meta.category, track_id=tid)
    return out


def mark_visibility(lane: Lane3D, lane2d: Lane2D | None, cam: CameraParams,
                    image_size=DEFAULT_IMAGE_SIZE, tol_px=1e-6) -> Lane3D:
    """Visible iff in front of the camera, inside the image, and not above the
    farthest row the frame's 2D annotation reaches."""
    uv, depth = project_points(lane.points, cam)
    if lane2d is None or len(lane2d.points) == 0:
        return lane.replace(visibility=np.zeros(len(lane.points), bool))
    v_end = float(np.min(lane2d.v))
    vis = (depth > 0) & _in_image(uv, image_size)
    vis[vis] &= uv[vis, 1] >= v_end - tol_px
    return lane.replace(visibility=vis)


# ---------------------------------------------------------------------------
# end to end


@dataclass
class LabelConfig:
    radius_px: float = 8.0
    k: int = 4
    support_px: float = 10.0
    step: float = 0.5
    knot_spacing: float = 5.0
    rotated_knot_spacing: float = 1.0
    spec: BevGridSpec = field(default_factory=BevGridSpec)
    image_size: tuple = DEFAULT_IMAGE_SIZE
    workers: int = 1
    gate_window: int = 9
    gate_floor: float = 0.05


def _gate_along_lane(p, cfg: LabelConfig):
    """Drop points off the running median of each coordinate. Rows must be ordered
    along the lane, so every coordinate varies smoothly with index."""
    if len(p) < cfg.gate_window:
        return p
    keep = np.ones(len(p), bool)
    for c in range(3):
        keep &= outlier_mask(None, p[:, c], cfg.gate_window, 3.0, cfg.gate_floor)
    return p[keep]


def _lift_frame(frame, cfg: LabelConfig):
    pts = remove_points_in_boxes(frame.lidar.points, frame.lidar.object_boxes)
    lifted = []
    for l2 in frame.lanes_2d:
        near = filter_points_near_lane(pts, l2, frame.cam, cfg.radius_px, cfg.image_size)
        try:
            p3 = interpolate_lane_3d(l2, near, frame.cam, cfg.k, cfg.support_px)
        except InsufficientSupport as e:
            log.info("%s track %d dropped: %s", frame.frame_id, l2.track_id, e)
            continue
        p3 = _gate_along_lane(p3, cfg)
        if len(p3) < 2:
            log.info("%s track %d dropped: fewer than 2 lifted points", frame.frame_id, l2.track_id)
            continue
        lifted.append(Lane3D(p3, category=l2.category, track_id=l2.track_id))
    return lifted


def _frame_label(frame, long_lanes, cfg: LabelConfig):
    sp = cfg.spec
    out = []
    for l2 in frame.lanes_2d:
        long = long_lanes.get(l2.track_id)
        if long is None:
            continue
        # gate before the single-valued test: one stray point can widen a y bin
        ego = frame.pose.world_to_ego(_gate_along_lane(long.points, cfg))
        inside = ((ego[:, 1] >= sp.y_extent[0]) & (ego[:, 1] <= sp.y_extent[1])
                  & (ego[:, 0] >= sp.x_extent[0]) & (ego[:, 0] <= sp.x_extent[1]))
        ego = ego[inside]
        if len(ego) < 4:
            log.info("%s track %d dropped: fewer than 4 points in the BEV window", frame.frame_id, l2.track_id)
            continue
        kw = dict(step=cfg.step, category=long.category, track_id=l2.track_id)
        try:
            if is_single_valued(ego[:, 0], ego[:, 1]):
                fitted = smooth_fit(ego, knot_spacing=cfg.knot_spacing, **kw)
            else:
                fitted = fit_with_rotation(ego, knot_spacing=cfg.rotated_knot_spacing, **kw)
        except (DegenerateLane, StillMultivalued) as e:
            log.info("%s track %d dropped: %s", frame.frame_id, l2.track_id, e)
            continue
        out.append(mark_visibility(fitted, l2, frame.cam, cfg.image_size))
    return out


def generate_labels(frames, radius_px=None, config: LabelConfig | None = None) -> list:
    """Per-frame ego-frame Lane3D lists for a drive segment.

    The per-frame lift runs on ``config.workers`` threads; splicing starts only
    after every frame is lifted. Output order follows ``frames``.
    """
    cfg = config or LabelConfig()
    if radius_px is not None:
        cfg = LabelConfig(**{**cfg.__dict__, "radius_px": radius_px})
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            lifted = list(ex.map(lambda fr: _lift_frame(fr, cfg), frames))
    else:
        lifted = [_lift_frame(fr, cfg) for fr in frames]
    long_lanes = splice_segment(lifted, [fr.pose for fr in frames])
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            return list(ex.map(lambda fr: _frame_label(fr, long_lanes, cfg), frames))
    return [_frame_label(fr, long_lanes, cfg) for fr in frames]


def lane_rms_to_truth(lane: Lane3D, truth: Lane3D, visible_only=True) -> float:
    """RMS 3D distance from the lane's points to the truth polyline (nearest point)."""
    pts = lane.points[lane.visibility] if visible_only else lane.points
    if len(pts) == 0:
        return float("nan")
    d = polyline_distance_3d(pts, truth.points)
    return float(np.sqrt(np.mean(d ** 2)))


def polyline_distance_3d(p, poly, k=8):
    """Exact distance from 3D points to a polyline, checking the segments around the k nearest vertices."""
    poly = np.asarray(poly, dtype=np.float64)
    _, nn = cKDTree(poly).query(p, k=min(k, len(poly)))
    nn = nn.reshape(len(p), -1)
    best = np.full(len(p), np.inf)
    for i in range(len(p)):
        s = np.unique(np.clip(np.r_[nn[i] - 1, nn[i]], 0, len(poly) - 2))
        a, d = poly[s], poly[s + 1] - poly[s]
        dd = np.maximum(np.einsum("ij,ij->i", d, d), 1e-300)
        t = np.clip(np.einsum("ij,ij->i", p[i] - a, d) / dd, 0, 1)
        best[i] = np.sqrt(np.min(np.sum((p[i] - a - t[:, None] * d) ** 2, axis=1)))
    return best
