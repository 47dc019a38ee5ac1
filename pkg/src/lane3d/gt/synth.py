"""Seeded synthetic driving segments with exact 3D lane truth.

A reference road follows a clothoid (curvature linear in arc length) and lanes
are lateral offsets of it. Extra lanes can be given as explicit world
polylines. The road surface height is a polynomial in the world forward
coordinate. Each frame holds projected 2D annotations, a LiDAR sweep sampled
on the road surface in bands around every lane, and a few object boxes whose
interior points must be filtered out before labeling.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateLane
from ..geometry import DEFAULT_IMAGE_SIZE, CameraParams, default_camera
from ..lanes import Lane2D, Lane3D, LaneCategory, Pose, project_lane


@dataclass
class LaneSpec:
    """A lane either as a lateral offset of the reference road or as a world polyline (x, y)."""

    offset: float = 0.0
    category: LaneCategory = LaneCategory.SINGLE_WHITE_DASH
    polyline: np.ndarray | None = None


def default_lanes():
    cats = (LaneCategory.SINGLE_WHITE_SOLID, LaneCategory.SINGLE_WHITE_DASH,
            LaneCategory.SINGLE_WHITE_DASH, LaneCategory.SINGLE_WHITE_SOLID)
    return [LaneSpec(o, c) for o, c in zip((-5.25, -1.75, 1.75, 5.25), cats)]


@dataclass
class SceneSpec:
    lanes: list = field(default_factory=default_lanes)
    curvature: float = 0.002  # 1/m at the segment start, positive turns left
    curvature_rate: float = 0.0  # 1/m^2
    hill: tuple = (0.0,)  # z = sum(c_i * Y^i) over world forward coordinate
    n_frames: int = 20
    frame_step: float = 2.0
    lookahead: float = 130.0
    density: float = 80.0  # LiDAR points per square meter of lane band
    band: float = 0.5  # half-width of the sampled band around each lane
    lidar_range: tuple = (1.0, 112.0)  # ego forward extent of a sweep
    noise: float = 0.0  # per-axis Gaussian sigma in meters
    n_objects: int = 2
    object_points: int = 400
    annotation_range: float = 100.0  # farthest forward distance a labeler marks
    sample_step: float = 0.5  # annotation spacing along each lane
    cam: CameraParams = field(default_factory=default_camera)
    image_size: tuple = DEFAULT_IMAGE_SIZE

    def validate(self):
        if self.n_frames < 1 or self.frame_step < 0:
            raise ValueError("need at least one frame and a non-negative step")
        if self.density <= 0 or self.band <= 0 or self.noise < 0:
            raise ValueError("density/band must be positive and noise non-negative")
        if not self.lanes:
            raise ValueError("scene needs at least one lane")


@dataclass(eq=False)
class LidarFrame:
    """One sweep in the ego frame plus the ego pose and object boxes to remove.

    Boxes are axis-aligned in the ego frame: rows of (x0, y0, z0, x1, y1, z1).
    """

    points: np.ndarray
    pose: Pose
    object_boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.object_boxes = np.asarray(self.object_boxes, dtype=np.float64).reshape(-1, 6)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("LiDAR points must be finite")


@dataclass(eq=False)
class SynthFrame:
    frame_id: str
    cam: CameraParams
    pose: Pose
    lanes_2d: list
    lidar: LidarFrame
    image_size: tuple = DEFAULT_IMAGE_SIZE


@dataclass(eq=False)
class SynthScene:
    frames: list
    truth: list  # world-frame Lane3D per track
    spec: SceneSpec

    def truth_in_ego(self, frame_index: int) -> list:
        pose = self.frames[frame_index].pose
        return [t.replace(points=pose.world_to_ego(t.points)) for t in self.truth]


def uturn_polyline(x0=-1.75, y0=-10.0, straight=55.0, radius=5.0, turn_deg=120.0, step=0.05):
    """Straight run along +y, then a left arc of ``radius`` turning ``turn_deg`` degrees."""
    n = int(round(straight / step))
    ys = y0 + np.arange(n + 1) * step
    line = np.stack([np.full_like(ys, x0), ys], axis=1)
    turn = np.deg2rad(turn_deg)
    a = np.arange(1, int(round(turn * radius / step)) + 1) * step / radius
    cx = x0 - radius
    arc = np.stack([cx + radius * np.cos(a), ys[-1] + radius * np.sin(a)], axis=1)
    return np.vstack([line, arc])


def _reference_road(spec: SceneSpec, step=0.05):
    s = np.arange(-15.0, spec.n_frames * spec.frame_step + spec.lookahead, step)
    theta = spec.curvature * s + 0.5 * spec.curvature_rate * s * s
    dx, dy = -np.sin(theta), np.cos(theta)
    # integrate the heading from s=0 so the segment starts at the world origin
    X = np.concatenate([[0.0], np.cumsum(0.5 * (dx[1:] + dx[:-1]) * step)])
    Y = np.concatenate([[0.0], np.cumsum(0.5 * (dy[1:] + dy[:-1]) * step)])
    i0 = np.argmin(np.abs(s))
    return s, X - X[i0], Y - Y[i0], theta


def surface_height(spec: SceneSpec, Y):
    return np.polynomial.polynomial.polyval(np.asarray(Y, dtype=np.float64), spec.hill)


def _lane_polylines(spec: SceneSpec, road):
    s, X, Y, theta = road
    out = []
    for ls in spec.lanes:
        if ls.polyline is not None:
            xy = np.asarray(ls.polyline, dtype=np.float64)
        else:
            xy = np.stack([X + ls.offset * np.cos(theta), Y + ls.offset * np.sin(theta)], axis=1)
        out.append(np.column_stack([xy, surface_height(spec, xy[:, 1])]))
    return out


def _resample_arclength(pts, step):
    seg = np.linalg.norm(np.diff(pts[:, :2], axis=0), axis=1)
    t = np.concatenate([[0.0], np.cumsum(seg)])
    q = np.arange(0.0, t[-1] + 1e-9, step)
    return np.column_stack([np.interp(q, t, pts[:, i]) for i in range(3)]), t


def _sample_band(rng, spec, poly, pose):
    """Uniform samples in a band of half-width ``band`` around a world polyline."""
    seg = np.diff(poly[:, :2], axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    t = np.concatenate([[0.0], np.cumsum(seg_len)])
    n = rng.poisson(spec.density * t[-1] * 2 * spec.band)
    tq = rng.uniform(0, t[-1], n)
    off = rng.uniform(-spec.band, spec.band, n)
    i = np.clip(np.searchsorted(t, tq) - 1, 0, len(seg) - 1)
    frac = (tq - t[i]) / seg_len[i]
    base = poly[i, :2] + frac[:, None] * seg[i]
    normal = np.stack([seg[i, 1], -seg[i, 0]], axis=1) / seg_len[i, None]
    xy = base + off[:, None] * normal
    world = np.column_stack([xy, surface_height(spec, xy[:, 1])])
    return pose.world_to_ego(world)


def _object_boxes(rng, spec, polys):
    """Static world boxes hovering over random lanes; returns world centers and sizes."""
    centers = []
    span = spec.n_frames * spec.frame_step + 60.0
    for _ in range(spec.n_objects):
        poly = polys[rng.integers(len(polys))]
        y_target = rng.uniform(10.0, span)
        j = int(np.argmin(np.abs(poly[:, 1] - y_target)))
        c = poly[j].copy()
        c[2] += 0.3 + 0.75  # box bottom 0.3 m above the road, 1.5 m tall
        centers.append(c)
    size = np.array([1.8, 4.5, 1.5])
    return np.array(centers).reshape(-1, 3), size


def synth_scene(spec: SceneSpec | None = None, seed: int = 0) -> SynthScene:
    """Render a drive segment: per-frame 2D annotations, LiDAR and poses, plus exact truth."""
    spec = spec or SceneSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    road = _reference_road(spec)
    polys = _lane_polylines(spec, road)
    truth = []
    for k, (ls, poly) in enumerate(zip(spec.lanes, polys)):
        truth.append(Lane3D(poly, category=ls.category, track_id=k))
    ann_polys = [_resample_arclength(p, spec.sample_step)[0] for p in polys]
    centers, size = _object_boxes(rng, spec, polys)

    s, X, Y, theta = road
    frames = []
    for f in range(spec.n_frames):
        sf = f * spec.frame_step
        pose = Pose(float(np.interp(sf, s, X)), float(np.interp(sf, s, Y)),
                    float(np.interp(sf, s, theta)), 0.0)
        pose = Pose(pose.x, pose.y, pose.yaw, float(surface_height(spec, pose.y)))
        y0, y1 = spec.lidar_range

        lanes_2d = []
        for k, (ls, ann) in enumerate(zip(spec.lanes, ann_polys)):
            ego = pose.world_to_ego(ann)
            keep = (ego[:, 1] > 0.5) & (ego[:, 1] <= spec.annotation_range)
            if keep.sum() < 2:
                continue
            try:
                l2 = project_lane(Lane3D(ego[keep], track_id=k), spec.cam, spec.image_size)
            except DegenerateLane:
                continue
            if l2.visibility.sum() < 2:
                continue
            lanes_2d.append(Lane2D(l2.points[l2.visibility], category=ls.category, track_id=k))

        sweeps = [_sample_band(rng, spec, p, pose) for p in polys]
        pts = np.vstack(sweeps)
        pts = pts[(pts[:, 1] >= y0) & (pts[:, 1] <= y1) & (np.abs(pts[:, 0]) < 20.0)]
        boxes = []
        for c in pose.world_to_ego(centers):
            if not (y0 < c[1] < y1):
                continue
            lo, hi = c - size / 2, c + size / 2
            boxes.append(np.concatenate([lo, hi]))
            pts = np.vstack([pts, rng.uniform(lo, hi, (spec.object_points, 3))])
        if spec.noise > 0:
            pts = pts + rng.normal(0, spec.noise, pts.shape)
        lidar = LidarFrame(pts, pose, np.array(boxes).reshape(-1, 6))
        frames.append(SynthFrame(f"frame_{f:04d}", spec.cam, pose, lanes_2d, lidar, spec.image_size))
    return SynthScene(frames, truth, spec)
