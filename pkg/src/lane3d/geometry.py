"""Pitch/height camera model, inverse perspective mapping and the BEV grid.

Frames
------
Ego frame (meters): x lateral (right), y longitudinal (forward), z up.
The camera sits at (0, 0, h) and looks along +y, tilted down by ``pitch``.

Camera frame: x right, y down (image v), z along the optical axis.

IPM direction frame: (lateral, forward, down). The matrix returned by
:func:`pitch_rotation` maps camera-frame directions into it, so the ground
intersection of a pixel ray ``d`` is ``(h / d_down) * d + (0, 0, -h)`` with the
third component equal to zero.

Image: u is the column, v the row, v grows downward; integer coordinates are
pixel centers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import BehindCamera, HorizonError, SingularCamera

DEFAULT_IMAGE_SIZE = (360, 480)  # (height, width)
HORIZON_EPS = 1e-12


class PixelPoint(NamedTuple):
    u: float
    v: float


class GroundPoint(NamedTuple):
    x: float
    y: float
    z: float = 0.0


@dataclass(frozen=True, eq=False)
class CameraParams:
    """Intrinsics ``K`` plus the two extrinsics used by IPM: pitch and height.

    ``pitch`` is in radians, positive when the camera is tilted down toward
    the road. ``height`` is the optical center's height above the ground.
    """

    intrinsic: np.ndarray
    pitch: float
    height: float

    def __post_init__(self):
        K = np.array(self.intrinsic, dtype=np.float64)
        if K.shape != (3, 3) or not np.all(np.isfinite(K)):
            raise ValueError("intrinsic must be a finite 3x3 matrix")
        if abs(np.linalg.det(K)) < 1e-12:
            raise SingularCamera("intrinsic matrix is not invertible")
        if not np.array_equal(K[2], [0.0, 0.0, 1.0]):
            raise ValueError("last row of K must be (0, 0, 1)")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if not (self.height > 0 and math.isfinite(self.height)):
            raise ValueError("camera height must be > 0")
        if not abs(self.pitch) < math.pi / 2:
            raise ValueError("|pitch| must be < pi/2")
        K.setflags(write=False)
        object.__setattr__(self, "intrinsic", K)
        object.__setattr__(self, "pitch", float(self.pitch))
        object.__setattr__(self, "height", float(self.height))

    @classmethod
    def from_pinhole(cls, fx, fy, cx, cy, pitch, height):
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K, pitch, height)

    @property
    def fx(self) -> float:
        return float(self.intrinsic[0, 0])

    @property
    def fy(self) -> float:
        return float(self.intrinsic[1, 1])

    @property
    def cx(self) -> float:
        return float(self.intrinsic[0, 2])

    @property
    def cy(self) -> float:
        return float(self.intrinsic[1, 2])

    @property
    def rotation(self) -> np.ndarray:
        return pitch_rotation(self.pitch)

    @property
    def intrinsic_inv(self) -> np.ndarray:
        return np.linalg.inv(self.intrinsic)

    def scaled(self, sx: float, sy: float) -> "CameraParams":
        """Camera for an image resampled by (sx, sy), pixel-center aligned."""
        K = self.intrinsic.copy()
        K[0, 0] *= sx
        K[0, 1] *= sx
        K[0, 2] = (K[0, 2] + 0.5) * sx - 0.5
        K[1, 1] *= sy
        K[1, 2] = (K[1, 2] + 0.5) * sy - 0.5
        return CameraParams(K, self.pitch, self.height)

    def to_record(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "pitch_rad": self.pitch,
            "height_m": self.height,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "CameraParams":
        return cls.from_pinhole(
            rec["fx"], rec["fy"], rec["cx"], rec["cy"], rec["pitch_rad"], rec["height_m"]
        )

    def __eq__(self, other):
        if not isinstance(other, CameraParams):
            return NotImplemented
        return (
            np.array_equal(self.intrinsic, other.intrinsic)
            and self.pitch == other.pitch
            and self.height == other.height
        )

    def __hash__(self):
        return hash((self.intrinsic.tobytes(), self.pitch, self.height))

    def __repr__(self):
        return (
            f"CameraParams(fx={self.fx:g}, fy={self.fy:g}, cx={self.cx:g}, cy={self.cy:g}, "
            f"pitch={self.pitch:g}, height={self.height:g})"
        )


def default_camera() -> CameraParams:
    """Camera matched to the 360x480 model input (about 62 degrees horizontal FOV)."""
    return CameraParams.from_pinhole(400.0, 400.0, 240.0, 180.0, pitch=0.04, height=1.5)


def pitch_rotation(pitch: float) -> np.ndarray:
    """Map camera-frame directions to (lateral, forward, down)."""
    s, c = math.sin(pitch), math.cos(pitch)
    return np.array([[1.0, 0.0, 0.0], [0.0, -s, c], [0.0, c, s]])


@dataclass(frozen=True)
class BevGridSpec:
    """Metric BEV window and its raster.

    Column 0 is at ``x_min``; row 0 is the far edge (``y_max``), as in an image
    of the road seen from above.
    """

    x_extent: tuple = (-10.0, 10.0)
    y_extent: tuple = (3.0, 103.0)
    width_cells: int = 208
    height_cells: int = 108

    def __post_init__(self):
        x0, x1 = self.x_extent
        y0, y1 = self.y_extent
        if not x0 < x1:
            raise ValueError("x_min must be < x_max")
        if not 0 <= y0 < y1:
            raise ValueError("need 0 <= y_min < y_max")
        if self.width_cells < 2 or self.height_cells < 2:
            raise ValueError("grid needs at least 2x2 cells")
        object.__setattr__(self, "x_extent", (float(x0), float(x1)))
        object.__setattr__(self, "y_extent", (float(y0), float(y1)))

    @property
    def shape(self) -> tuple:
        return (self.height_cells, self.width_cells)

    @property
    def cell_width(self) -> float:
        return (self.x_extent[1] - self.x_extent[0]) / self.width_cells

    @property
    def cell_height(self) -> float:
        return (self.y_extent[1] - self.y_extent[0]) / self.height_cells

    def cell_centers(self):
        """Return (X, Y) arrays of shape (height_cells, width_cells)."""
        cols = np.arange(self.width_cells)
        rows = np.arange(self.height_cells)
        xs = self.x_extent[0] + (cols + 0.5) * self.cell_width
        ys = self.y_extent[1] - (rows + 0.5) * self.cell_height
        return np.meshgrid(xs, ys)

    def to_grid(self, x, y):
        """Fractional (col, row) where integers are cell centers."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        col = (x - self.x_extent[0]) / self.cell_width - 0.5
        row = (self.y_extent[1] - y) / self.cell_height - 0.5
        return col, row

    def to_cell(self, x, y):
        """Integer (col, row) of the cell containing each point (may be out of range)."""
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        col = np.floor((x - self.x_extent[0]) / self.cell_width).astype(np.int64)
        row = np.floor((self.y_extent[1] - y) / self.cell_height).astype(np.int64)
        return col, row

    def halved(self, times: int = 1) -> "BevGridSpec":
        w, h = self.width_cells, self.height_cells
        for _ in range(times):
            w, h = max(2, w // 2), max(2, h // 2)
        return BevGridSpec(self.x_extent, self.y_extent, w, h)


def _pixel_rays(p, cam: CameraParams) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1] != 2:
        raise ValueError("pixel input must have a trailing dimension of 2")
    hom = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)
    M = cam.rotation @ cam.intrinsic_inv
    return hom @ M.T


def ipm_pixel_to_ground(p, cam: CameraParams) -> np.ndarray:
    """Intersect the ray of pixel(s) ``p`` (..., 2) with the z=0 ground plane.

    Returns (..., 3) ground points with z exactly 0.

    Raises:
        HorizonError: if any pixel lies at or above the horizon.
    """
    d = _pixel_rays(p, cam)
    down = d[..., 2]
    # rays within rounding of parallel count as horizon rays
    if np.any(~(down > HORIZON_EPS * np.linalg.norm(d, axis=-1))):
        raise HorizonError("pixel ray does not reach the ground plane")
    alpha = cam.height / down
    g = alpha[..., None] * d
    g[..., 2] = 0.0
    return g


def lift_pixel_to_depth(p, depth, cam: CameraParams) -> np.ndarray:
    """Ego-frame point(s) at camera depth ``depth`` along the ray of pixel(s) ``p``."""
    p = np.asarray(p, dtype=np.float64)
    hom = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)
    cam_pts = (hom @ cam.intrinsic_inv.T) * np.asarray(depth, dtype=np.float64)[..., None]
    return camera_to_ego(cam_pts, cam)


def camera_to_ego(cam_pts, cam: CameraParams) -> np.ndarray:
    lfd = np.asarray(cam_pts, dtype=np.float64) @ cam.rotation.T
    out = lfd.copy()
    out[..., 2] = cam.height - lfd[..., 2]
    return out


def ego_to_camera(g, cam: CameraParams) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if g.shape[-1] == 2:
        g = np.concatenate([g, np.zeros(g.shape[:-1] + (1,))], axis=-1)
    lfd = g.copy()
    lfd[..., 2] = cam.height - g[..., 2]
    # pitch_rotation is symmetric and orthogonal, so it is its own inverse
    return lfd @ cam.rotation


def _project(g, cam):
    pc = ego_to_camera(g, cam)
    depth = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uvw = pc @ cam.intrinsic.T
        uv = uvw[..., :2] / uvw[..., 2:3]
    return uv, depth


def project_ground_to_pixel(g, cam: CameraParams) -> np.ndarray:
    """Pinhole projection of ego-frame point(s) (..., 3) (or (..., 2) with z=0).

    Raises:
        BehindCamera: if any point has depth <= 0.
    """
    uv, depth = _project(g, cam)
    if np.any(~(depth > 0)):
        raise BehindCamera("point has non-positive camera depth")
    return uv


def project_points(g, cam: CameraParams):
    """Non-raising projection: returns (uv, depth); uv is NaN where depth <= 0."""
    uv, depth = _project(g, cam)
    uv = np.where((depth > 0)[..., None], uv, np.nan)
    return uv, depth


def planar_lift(g, cam: CameraParams) -> np.ndarray:
    """Where flat-ground IPM places ego point(s) ``g`` (..., 3): the point's pixel
    intersected with z=0. A point at height z lands at ``g * h / (h - z)``.

    Raises:
        BehindCamera: a point has depth <= 0.
        HorizonError: a point sits at or above camera height, so its ray misses the ground.
    """
    return ipm_pixel_to_ground(project_ground_to_pixel(g, cam), cam)


def horizon_row(cam: CameraParams, u: float | None = None) -> float:
    """Image row of the horizon (vanishing line of the ground plane) at column ``u``."""
    H = ground_homography(cam)
    vp = H @ np.array([0.0, 1.0, 0.0])  # forward direction at infinity
    lateral = H @ np.array([1.0, 0.0, 0.0])
    if u is None:
        u = cam.cx
    # horizon is the line through the vanishing points of forward and lateral directions
    line = np.cross(vp, lateral)
    return float(-(line[0] * u + line[2]) / line[1])


def ground_homography(cam: CameraParams) -> np.ndarray:
    """3x3 ``H`` with ``H @ (x, y, 1) ~ (u, v, 1)`` for ground points (z=0)."""
    return cam.intrinsic @ cam.rotation.T @ np.diag([1.0, 1.0, cam.height])


def row_to_ground_y(v, cam: CameraParams) -> np.ndarray:
    """Forward distance of the ground seen at image row(s) ``v`` (NaN above the horizon).

    The row of a ground point does not depend on its lateral position for a
    pitch-only camera, so the mapping is exact.
    """
    v = np.asarray(v, dtype=np.float64)
    Kinv = cam.intrinsic_inv
    b = Kinv[1, 1] * v + Kinv[1, 2]
    s, c = math.sin(cam.pitch), math.cos(cam.pitch)
    down = c * b + s
    fwd = -s * b + c
    with np.errstate(divide="ignore", invalid="ignore"):
        y = cam.height * fwd / down
    return np.where(down > HORIZON_EPS * np.hypot(down, fwd), y, np.nan)


@dataclass(frozen=True, eq=False)
class IpmGrid:
    """Front-view pixel for every BEV cell center (the fv-to-bev reference map)."""

    spec: BevGridSpec
    uv: np.ndarray  # (H_bev, W_bev, 2)
    valid: np.ndarray  # (H_bev, W_bev) bool
    xy: np.ndarray  # (H_bev, W_bev, 2) cell centers

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())

    def flat(self):
        return self.uv.reshape(-1, 2), self.valid.reshape(-1)


def build_ipm_grid(cam: CameraParams, spec: BevGridSpec) -> IpmGrid:
    """Project every BEV cell center to the image.

    Cells behind the camera (hence above the horizon) are flagged invalid and
    carry NaN pixel coordinates.
    """
    X, Y = spec.cell_centers()
    g = np.stack([X, Y, np.zeros_like(X)], axis=-1)
    uv, depth = project_points(g, cam)
    valid = depth > 0
    return IpmGrid(spec=spec, uv=uv, valid=valid, xy=np.stack([X, Y], axis=-1))
