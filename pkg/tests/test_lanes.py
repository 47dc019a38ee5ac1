import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lane3d.errors import DegenerateLane, ValidationError
from lane3d.geometry import BevGridSpec, default_camera, ipm_pixel_to_ground
from lane3d.lanes import (CipoObject, FrameRecord, Lane2D, Lane3D, LaneCategory, SceneTags,
                          canonicalize, project_lane, resample_at_v, resample_at_y)

YS = np.array([5.0, 10, 15, 20, 30, 40, 50, 60, 80, 100])


def test_categories():
    assert len(LaneCategory) == 14
    assert [int(c) for c in LaneCategory] == list(range(14))
    assert LaneCategory.from_label("left-curbside") is LaneCategory.LEFT_CURBSIDE
    with pytest.raises(ValidationError):
        Lane3D(np.zeros((2, 3)) + [[0, 0, 0], [0, 1, 0]], category=14)


def test_lane_invariants():
    with pytest.raises(DegenerateLane):
        Lane3D(np.zeros((1, 3)))
    with pytest.raises(ValueError):
        Lane3D(np.zeros((3, 3)), visibility=[True, False])
    with pytest.raises(ValidationError):
        Lane3D(np.zeros((2, 3)), importance_slot=5)
    with pytest.raises(ValidationError):
        Lane3D(np.zeros((2, 3)), track_id=-1)


def test_resample_constant_lane():
    lane = Lane3D(np.array([[2.0, 0, 0], [2.0, 100, 0]]))
    x, z, vis = resample_at_y(lane, YS)
    assert np.all(x == 2.0) and np.all(z == 0.0) and vis.all()


def test_resample_out_of_span_and_extension():
    lane = Lane3D(np.array([[0.0, 5, 0], [1.0, 50, 0]]))
    x, _, vis = resample_at_y(lane, [40.0, 80.0])
    assert vis.tolist() == [True, False]
    assert x[1] == pytest.approx(75 / 45)


def test_resample_piecewise_oracle():
    lane = Lane3D(np.array([[0.0, 0, 0], [10, 10, 1], [20, 20, 1]]))
    x, z, _ = resample_at_y(lane, [15.0])
    assert (x[0], z[0]) == (15.0, 1.0)


def test_resample_exact_at_vertices(rng):
    y = np.sort(rng.uniform(0, 100, 12))
    pts = np.column_stack([rng.normal(size=12), y, rng.normal(size=12)])
    x, z, _ = resample_at_y(Lane3D(pts), y)
    assert np.array_equal(x, pts[:, 0]) and np.array_equal(z, pts[:, 2])


def test_resample_rejects_non_increasing():
    lane = Lane3D(np.array([[0.0, 0, 0], [0, 10, 0]]))
    with pytest.raises(ValueError):
        resample_at_y(lane, [5.0, 5.0])


def test_resample_at_v():
    lane = Lane2D(np.array([[240.0, 100], [240, 360]]))
    u, vis = resample_at_v(lane, np.linspace(100, 360, 5))
    assert np.all(u == 240) and vis.all()
    part = Lane2D(np.array([[0.0, 200], [10, 300], [30, 360]]))
    u, vis = resample_at_v(part, [100.0, 250.0, 330.0])
    assert vis.tolist() == [False, True, True]
    assert u[1] == 5.0 and u[2] == pytest.approx(20.0)


def test_project_axial_lane_and_round_trip():
    cam = default_camera()
    axial = Lane3D(np.column_stack([np.zeros(20), np.linspace(5, 100, 20), np.zeros(20)]))
    l2 = project_lane(axial, cam)
    np.testing.assert_allclose(l2.u, cam.cx, atol=1e-9)
    lane = Lane3D(np.column_stack([1.5 + 0.01 * np.linspace(5, 80, 30), np.linspace(5, 80, 30), np.zeros(30)]),
                  category=LaneCategory.DOUBLE_YELLOW_SOLID, track_id=3)
    l2 = project_lane(lane, cam)
    assert l2.category == lane.category and l2.track_id == 3
    np.testing.assert_allclose(ipm_pixel_to_ground(l2.points, cam), lane.points, atol=1e-6)


def test_project_drops_points_behind_and_outside():
    cam = default_camera()
    lane = Lane3D(np.array([[0.0, -5, 0], [0, 10, 0], [0, 20, 0], [30, 5, 0]]))
    l2 = project_lane(lane, cam)
    assert len(l2.points) == 3
    assert l2.visibility.tolist() == [True, True, False]
    with pytest.raises(DegenerateLane):
        project_lane(Lane3D(np.array([[0.0, -5, 0], [0, 10, 0]])), cam)


def test_canonicalize():
    lane = Lane3D(np.array([[0.0, 1, 0], [1, 2, 0], [2, 3, 0]]))
    assert canonicalize(lane) == lane
    rev = lane.replace(points=lane.points[::-1])
    assert canonicalize(rev) == lane
    dup = Lane3D(np.array([[0.0, 1, 0], [1, 2, 0], [3, 2, 0], [2, 3, 0]]))
    c = canonicalize(dup)
    assert len(c.points) == 3 and c.points[1, 0] == 2.0
    with pytest.raises(DegenerateLane):
        canonicalize(Lane3D(np.array([[0.0, 1, 0], [1, 5, 0], [2, 3, 0]])))
    clipped = canonicalize(Lane3D(np.array([[0.0, 1, 0], [0, 50, 0], [0, 60, 0], [0, 150, 0]])),
                           BevGridSpec())
    assert clipped.y.tolist() == [50, 60]


def test_frame_record_validation():
    cam = default_camera()
    FrameRecord(cam, scene_tags=SceneTags("rainy", "highway", "night")).validate()
    with pytest.raises(ValidationError):
        FrameRecord(cam, scene_tags=SceneTags(weather="snow")).validate()
    two = [CipoObject(1, (0, 0, 1, 1)), CipoObject(1, (2, 2, 3, 3))]
    with pytest.raises(ValidationError):
        FrameRecord(cam, cipo_objects=two).validate()
    with pytest.raises(ValidationError):
        FrameRecord(cam, cipo_objects=[CipoObject(5, (0, 0, 1, 1))]).validate()


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=20), st.integers(0, 2**31))
def test_prop_resample_matches_numpy_interp(xs, seed):
    r = np.random.default_rng(seed)
    y = np.cumsum(r.uniform(0.5, 10, len(xs)))
    lane = Lane3D(np.column_stack([xs, y, np.zeros(len(xs))]))
    q = np.linspace(y[0], y[-1], 7)
    x, _, vis = resample_at_y(lane, q)
    np.testing.assert_allclose(x, np.interp(q, y, xs), atol=1e-12)
    assert vis.all()
