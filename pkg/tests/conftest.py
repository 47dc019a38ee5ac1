import math

import numpy as np
import pytest

from lane3d.geometry import CameraParams
from lane3d.lanes import Lane3D, LaneCategory


def random_camera(rng) -> CameraParams:
    return CameraParams.from_pinhole(rng.uniform(500, 2000), rng.uniform(500, 2000),
                                     rng.uniform(200, 280), rng.uniform(150, 210),
                                     rng.uniform(0.02, 0.3), rng.uniform(1.0, 2.5))


def oracle_axes(pitch):
    """Camera right/down/forward axes expressed in the ego frame, built by hand."""
    s, c = math.sin(pitch), math.cos(pitch)
    return np.array([1.0, 0, 0]), np.array([0, -s, -c]), np.array([0, c, -s])


def oracle_project(g, cam):
    """Pinhole projection written as explicit dot products; no shared helpers."""
    right, down, fwd = oracle_axes(cam.pitch)
    d = np.asarray(g, float) - np.array([0, 0, cam.height])
    xc, yc, zc = d @ right, d @ down, d @ fwd
    K = cam.intrinsic
    return np.array([K[0, 0] * xc / zc + K[0, 2], K[1, 1] * yc / zc + K[1, 2]]), zc


def random_lane(rng, n=None, y0=None, y1=None, category=None, track_id=0, visible=True):
    """Smooth single-valued lane: cubic x(y), small z(y)."""
    n = n or int(rng.integers(8, 40))
    y0 = rng.uniform(3, 20) if y0 is None else y0
    y1 = rng.uniform(y0 + 20, 103) if y1 is None else y1
    y = np.linspace(y0, y1, n)
    c = rng.normal(0, [1e-6, 1e-4, 0.02]) if rng.random() < 0.8 else np.zeros(3)
    x = rng.uniform(-8, 8) + c[2] * y + c[1] * y ** 2 + c[0] * y ** 3
    z = rng.normal(0, 0.01) * y + rng.normal(0, 0.1)
    cat = LaneCategory(int(rng.integers(14))) if category is None else category
    vis = np.ones(n, bool) if visible else rng.random(n) < 0.8
    return Lane3D(np.column_stack([x, y, z]), vis, cat, track_id)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
