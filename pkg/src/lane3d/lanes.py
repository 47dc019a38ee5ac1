"""Lane value types, the 14-way category taxonomy, resampling and projection."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateLane, ValidationError
from .geometry import DEFAULT_IMAGE_SIZE, BevGridSpec, CameraParams, project_points


class LaneCategory(enum.IntEnum):
    SINGLE_WHITE_DASH = 0
    SINGLE_WHITE_SOLID = 1
    DOUBLE_WHITE_DASH = 2
    DOUBLE_WHITE_SOLID = 3
    DOUBLE_WHITE_DASH_SOLID = 4
    DOUBLE_WHITE_SOLID_DASH = 5
    SINGLE_YELLOW_DASH = 6
    SINGLE_YELLOW_SOLID = 7
    DOUBLE_YELLOW_DASH = 8
    DOUBLE_YELLOW_SOLID = 9
    DOUBLE_YELLOW_DASH_SOLID = 10
    DOUBLE_YELLOW_SOLID_DASH = 11
    LEFT_CURBSIDE = 12
    RIGHT_CURBSIDE = 13

    @property
    def label(self) -> str:
        return self.name.lower().replace("_", "-")

    @classmethod
    def from_label(cls, label: str) -> "LaneCategory":
        return cls[label.upper().replace("-", "_")]


NUM_CATEGORIES = len(LaneCategory)

WEATHERS = ("clear", "partly_cloudy", "overcast", "rainy", "foggy")
SCENES = ("residential", "urban", "suburbs", "highway", "parking_lot")
HOURS = ("daytime", "night", "dawn_dusk")


def _as_category(c) -> LaneCategory:
    try:
        return LaneCategory(int(c))
    except (ValueError, TypeError):
        raise ValidationError(f"lane category must be an integer code 0-13, got {c!r}")


@dataclass(eq=False)
class Lane3D:
    """Ordered ego-frame lane points with per-point BEV visibility."""

    points: np.ndarray  # (N, 3)
    visibility: Optional[np.ndarray] = None  # (N,) bool, default all visible
    category: LaneCategory = LaneCategory.SINGLE_WHITE_SOLID
    track_id: int = 0
    importance_slot: Optional[int] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError("Lane3D points must have shape (N, 3)")
        if len(pts) < 2:
            raise DegenerateLane("a lane needs at least 2 points")
        vis = np.ones(len(pts), bool) if self.visibility is None else np.asarray(self.visibility, bool)
        if vis.shape != (len(pts),):
            raise ValueError("visibility length must equal point count")
        self.points = pts
        self.visibility = vis
        self.category = _as_category(self.category)
        self.track_id = int(self.track_id)
        if self.track_id < 0:
            raise ValidationError("track_id must be non-negative")
        if self.importance_slot is not None and self.importance_slot not in (1, 2, 3, 4):
            raise ValidationError("importance_slot must be 1-4 or None")

    @property
    def x(self):
        return self.points[:, 0]

    @property
    def y(self):
        return self.points[:, 1]

    @property
    def z(self):
        return self.points[:, 2]

    def replace(self, **kw) -> "Lane3D":
        d = dict(points=self.points, visibility=self.visibility, category=self.category,
                 track_id=self.track_id, importance_slot=self.importance_slot)
        d.update(kw)
        return Lane3D(**d)

    def __eq__(self, other):
        if not isinstance(other, Lane3D):
            return NotImplemented
        return (np.array_equal(self.points, other.points)
                and np.array_equal(self.visibility, other.visibility)
                and self.category == other.category and self.track_id == other.track_id
                and self.importance_slot == other.importance_slot)


@dataclass(eq=False)
class Lane2D:
    """Image-space lane points (u, v) with per-point front-view visibility."""

    points: np.ndarray  # (N, 2)
    visibility: Optional[np.ndarray] = None
    category: LaneCategory = LaneCategory.SINGLE_WHITE_SOLID
    track_id: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError("Lane2D points must have shape (N, 2)")
        if len(pts) < 2:
            raise DegenerateLane("a lane needs at least 2 points")
        vis = np.ones(len(pts), bool) if self.visibility is None else np.asarray(self.visibility, bool)
        if vis.shape != (len(pts),):
            raise ValueError("visibility length must equal point count")
        self.points = pts
        self.visibility = vis
        self.category = _as_category(self.category)
        self.track_id = int(self.track_id)

    @property
    def u(self):
        return self.points[:, 0]

    @property
    def v(self):
        return self.points[:, 1]

    def __eq__(self, other):
        if not isinstance(other, Lane2D):
            return NotImplemented
        return (np.array_equal(self.points, other.points)
                and np.array_equal(self.visibility, other.visibility)
                and self.category == other.category and self.track_id == other.track_id)


@dataclass
class SceneTags:
    weather: Optional[str] = None
    scene: Optional[str] = None
    hours: Optional[str] = None

    def validate(self):
        for name, value, vocab in (("weather", self.weather, WEATHERS),
                                   ("scene", self.scene, SCENES),
                                   ("hours", self.hours, HOURS)):
            if value is not None and value not in vocab:
                raise ValidationError(f"unknown {name} tag {value!r}; expected one of {vocab}")


@dataclass
class CipoObject:
    level: int
    box: tuple  # (u_min, v_min, u_max, v_max) in pixels

    def validate(self):
        if self.level not in (1, 2, 3, 4):
            raise ValidationError(f"CIPO level must be 1-4, got {self.level!r}")
        if len(self.box) != 4:
            raise ValidationError("CIPO box must have 4 coordinates")
        u0, v0, u1, v1 = self.box
        if not (u0 <= u1 and v0 <= v1):
            raise ValidationError("CIPO box must satisfy min <= max")


@dataclass
class Pose:
    """Ego pose in the world frame: planar translation, heading, vertical offset."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0
    z: float = 0.0

    def rotation(self) -> np.ndarray:
        c, s = np.cos(self.yaw), np.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def ego_to_world(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation().T + np.array([self.x, self.y, self.z])

    def world_to_ego(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - np.array([self.x, self.y, self.z])) @ self.rotation()


@dataclass(eq=False)
class FrameRecord:
    """Everything annotated for one frame."""

    cam: CameraParams
    lanes_3d: list = field(default_factory=list)
    lanes_2d: list = field(default_factory=list)
    scene_tags: SceneTags = field(default_factory=SceneTags)
    cipo_objects: list = field(default_factory=list)
    frame_id: str = ""
    pose: Optional[Pose] = None
    extras: dict = field(default_factory=dict)

    def validate(self):
        self.scene_tags.validate()
        for obj in self.cipo_objects:
            obj.validate()
        if sum(1 for o in self.cipo_objects if o.level == 1) > 1:
            raise ValidationError("CIPO level 1 may contain at most one object")
        for lane in self.lanes_3d:
            if not isinstance(lane, Lane3D):
                raise ValidationError("lanes_3d must hold Lane3D values")
        for lane in self.lanes_2d:
            if not isinstance(lane, Lane2D):
                raise ValidationError("lanes_2d must hold Lane2D values")
        return self

    def __eq__(self, other):
        if not isinstance(other, FrameRecord):
            return NotImplemented
        return (self.cam == other.cam and self.lanes_3d == other.lanes_3d
                and self.lanes_2d == other.lanes_2d and self.scene_tags == other.scene_tags
                and self.cipo_objects == other.cipo_objects and self.frame_id == other.frame_id
                and self.pose == other.pose and self.extras == other.extras)


def _interp_extend(q, xp, fp):
    """Piecewise-linear interpolation, extended linearly past both ends."""
    out = np.interp(q, xp, fp)
    lo = q < xp[0]
    hi = q > xp[-1]
    if np.any(lo):
        slope = (fp[1] - fp[0]) / (xp[1] - xp[0])
        out[lo] = fp[0] + slope * (q[lo] - xp[0])
    if np.any(hi):
        slope = (fp[-1] - fp[-2]) / (xp[-1] - xp[-2])
        out[hi] = fp[-1] + slope * (q[hi] - xp[-1])
    return out


def _visible_span_mask(q, key, vis):
    if not np.any(vis):
        return np.zeros(len(q), bool)
    k = key[vis]
    return (q >= k.min()) & (q <= k.max())


def _check_increasing(q):
    q = np.asarray(q, dtype=np.float64)
    if q.ndim != 1 or np.any(np.diff(q) <= 0):
        raise ValueError("sample positions must be strictly increasing")
    return q


def resample_at_y(lane: Lane3D, y_positions):
    """Sample x and z at the requested y positions.

    Returns (x_vec, z_vec, vis_vec). Positions outside the lane's visible y-span
    get vis=False; values there come from extending the end segments.
    """
    q = _check_increasing(y_positions)
    if len(lane.points) < 2:
        raise DegenerateLane("need at least 2 points")
    order = np.argsort(lane.y, kind="stable")
    y, x, z = lane.y[order], lane.x[order], lane.z[order]
    vis = lane.visibility[order]
    if np.any(np.diff(y) <= 0):
        lane = canonicalize(lane)
        y, x, z, vis = lane.y, lane.x, lane.z, lane.visibility
    return _interp_extend(q, y, x), _interp_extend(q, y, z), _visible_span_mask(q, y, vis)


def resample_at_v(lane: Lane2D, v_positions):
    """Sample u at the requested image rows. Returns (u_vec, vis_vec)."""
    q = _check_increasing(v_positions)
    if len(lane.points) < 2:
        raise DegenerateLane("need at least 2 points")
    order = np.argsort(lane.v, kind="stable")
    v, u, vis = lane.v[order], lane.u[order], lane.visibility[order]
    keep = np.concatenate([[True], np.diff(v) > 0])
    if keep.sum() < 2:
        raise DegenerateLane("lane spans fewer than 2 distinct rows")
    # rows sharing a v value: keep the first occurrence, visibility OR-ed
    idx = np.cumsum(keep) - 1
    vis_m = np.zeros(keep.sum(), bool)
    np.logical_or.at(vis_m, idx, vis)
    v, u = v[keep], u[keep]
    return _interp_extend(q, v, u), _visible_span_mask(q, v, vis_m)


def project_lane(lane: Lane3D, cam: CameraParams, image_size=DEFAULT_IMAGE_SIZE) -> Lane2D:
    """Project a 3D lane; points behind the camera are dropped.

    Visibility is the 3D visibility AND the in-image test.
    """
    uv, depth = project_points(lane.points, cam)
    front = depth > 0
    if front.sum() < 2:
        raise DegenerateLane("fewer than 2 points in front of the camera")
    uv = uv[front]
    h, w = image_size
    inside = (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
    return Lane2D(uv, lane.visibility[front] & inside, lane.category, lane.track_id)


def is_function_of_y(y) -> bool:
    d = np.diff(np.asarray(y, dtype=np.float64))
    return bool(np.all(d >= 0) or np.all(d <= 0))


def canonicalize(lane: Lane3D, spec: Optional[BevGridSpec] = None) -> Lane3D:
    """Sort by y, merge duplicate-y points (mean), clip to the grid's y extent.

    Raises:
        DegenerateLane: if the lane doubles back in y or fewer than 2 points remain.
    """
    if len(lane.points) < 2:
        raise DegenerateLane("need at least 2 points")
    if not is_function_of_y(lane.y):
        raise DegenerateLane("lane is not a function of y")
    order = np.argsort(lane.y, kind="stable")
    pts = lane.points[order]
    vis = lane.visibility[order]
    ys, inv = np.unique(pts[:, 1], return_inverse=True)
    if len(ys) != len(pts):
        counts = np.bincount(inv)
        merged = np.zeros((len(ys), 3))
        np.add.at(merged, inv, pts)
        pts = merged / counts[:, None]
        pts[:, 1] = ys
        mvis = np.zeros(len(ys), bool)
        np.logical_or.at(mvis, inv, vis)
        vis = mvis
    if spec is not None:
        y0, y1 = spec.y_extent
        keep = (pts[:, 1] >= y0) & (pts[:, 1] <= y1)
        pts, vis = pts[keep], vis[keep]
    if len(pts) < 2:
        raise DegenerateLane("fewer than 2 points after canonicalization")
    return lane.replace(points=pts, visibility=vis)
