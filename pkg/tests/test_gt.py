import math

import numpy as np
import pytest

from lane3d.errors import DegenerateLane, InsufficientSupport, PoseMissing, StillMultivalued
from lane3d.geometry import default_camera, project_points
from lane3d.gt import (LabelConfig, LaneSpec, SceneSpec, filter_points_near_lane, fit_with_rotation,
                       generate_labels, interpolate_lane_3d, mark_visibility, remove_points_in_boxes,
                       smooth_fit, splice_segment, synth_scene, uturn_polyline)
from lane3d.gt.fitting import fit_polynomials, principal_angle
from lane3d.gt.pipeline import lane_rms_to_truth, polyline_distance_3d
from lane3d.gt.synth import LidarFrame, SynthFrame
from lane3d.lanes import Lane2D, Lane3D, Pose

CAM = default_camera()


def brute_segment_distance(p, poly):
    best = math.inf
    for a, b in zip(poly[:-1], poly[1:]):
        d = b - a
        t = 0.0 if not d.any() else min(1.0, max(0.0, float((p - a) @ d / (d @ d))))
        best = min(best, math.dist(p, a + t * d))
    return best


def worst_rms(scene, labels):
    worst, n = 0.0, 0
    for f, lanes in enumerate(labels):
        truth = {t.track_id: t for t in scene.truth_in_ego(f)}
        for lane in lanes:
            worst = max(worst, lane_rms_to_truth(lane, truth[lane.track_id]))
            n += 1
    return worst, n


@pytest.fixture(scope="module")
def flat_scene():
    return synth_scene(SceneSpec(), seed=11)


@pytest.fixture(scope="module")
def flat_labels(flat_scene):
    return generate_labels(flat_scene.frames)


# ---------------------------------------------------------------------------
# synthetic scenes


def test_synth_flat_noiseless_points_on_ground():
    sc = synth_scene(SceneSpec(n_frames=3, n_objects=0), seed=0)
    for fr in sc.frames:
        assert np.abs(fr.lidar.points[:, 2]).max() < 1e-9


def test_synth_repeatable():
    a = synth_scene(SceneSpec(n_frames=3, noise=0.02), seed=5)
    b = synth_scene(SceneSpec(n_frames=3, noise=0.02), seed=5)
    c = synth_scene(SceneSpec(n_frames=3, noise=0.02), seed=6)
    assert all(np.array_equal(x.lidar.points, y.lidar.points) for x, y in zip(a.frames, b.frames))
    assert all(x.lanes_2d == y.lanes_2d for x, y in zip(a.frames, b.frames))
    assert not np.array_equal(a.frames[0].lidar.points, c.frames[0].lidar.points)


def test_synth_band_counting_oracle():
    spec = SceneSpec(n_frames=1, n_objects=0, curvature=0.0)
    sc = synth_scene(spec, seed=2)
    pts = sc.frames[0].lidar.points
    offsets = np.array([l.offset for l in spec.lanes])
    d = np.min(np.abs(pts[:, :1] - offsets[None]), axis=1)
    assert d.max() <= spec.band + 1e-9
    # uniform lateral offsets: half the points fall in the inner half of the band
    assert abs(np.mean(d < spec.band / 2) - 0.5) < 0.01
    expected = spec.density * 2 * spec.band * (spec.lidar_range[1] - spec.lidar_range[0]) * len(offsets)
    assert abs(len(pts) / expected - 1) < 0.02


# ---------------------------------------------------------------------------
# filtering and lifting


def test_remove_points_in_boxes():
    pts = np.array([[0.0, 0, 0], [1, 1, 1], [5, 5, 5]])
    out = remove_points_in_boxes(pts, [[0.5, 0.5, 0.5, 2, 2, 2]])
    assert out.tolist() == [[0, 0, 0], [5, 5, 5]]


def test_filter_radius_zero_and_infinite():
    ys = np.linspace(5, 60, 12)
    axial = Lane2D(project_points(np.column_stack([np.zeros(12), ys, np.zeros(12)]), CAM)[0])
    pts = np.array([[0.0, 10, 0], [0.0, 30, 0], [0.3, 20, 0], [8.0, 4, 0], [0.0, -3, 0]])
    kept = filter_points_near_lane(pts, axial, CAM, radius_px=0.0)
    assert kept.tolist() == [[0, 10, 0], [0, 30, 0]]
    kept = filter_points_near_lane(pts, axial, CAM, radius_px=math.inf)
    uv, depth = project_points(pts, CAM)
    inside = (depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= 479) & (uv[:, 1] >= 0) & (uv[:, 1] <= 359)
    assert np.array_equal(kept, pts[inside])


def test_filter_matches_brute_force(flat_scene):
    fr = flat_scene.frames[4]
    pts = fr.lidar.points
    uv, depth = project_points(pts, CAM)
    for l2 in fr.lanes_2d[:2]:
        kept = filter_points_near_lane(fr.lidar, l2, CAM, radius_px=8)
        idx = np.flatnonzero((depth > 0) & np.isfinite(uv[:, 0]) & (uv[:, 0] >= 0) & (uv[:, 0] <= 479)
                             & (uv[:, 1] >= 0) & (uv[:, 1] <= 359))
        rng = np.random.default_rng(0)
        sample = rng.choice(idx, 600, replace=False)
        want = {i for i in sample if brute_segment_distance(uv[i], l2.points) <= 8}
        kept_set = {tuple(p) for p in kept}
        got = {i for i in sample if tuple(pts[i]) in kept_set}
        assert got == want


def test_interpolate_flat_and_reprojection(flat_scene):
    fr = flat_scene.frames[0]
    pts = remove_points_in_boxes(fr.lidar.points, fr.lidar.object_boxes)
    l2 = fr.lanes_2d[1]
    near = filter_points_near_lane(pts, l2, CAM)
    lifted, keep = interpolate_lane_3d(l2, near, CAM, return_mask=True)
    assert np.abs(lifted[:, 2]).max() < 1e-6
    uv, _ = project_points(lifted, CAM)
    np.testing.assert_allclose(uv, l2.points[keep], atol=1e-9)


def test_interpolate_single_point_and_no_support():
    p = np.array([[0.4, 20.0, 0.1]])
    uv, depth = project_points(p, CAM)
    l2 = Lane2D(np.vstack([uv[0], uv[0] + [0.0, 3.0]]))
    lifted = interpolate_lane_3d(l2, p, CAM)
    _, d = project_points(lifted, CAM)
    np.testing.assert_allclose(d, depth[0], rtol=1e-12)
    far = Lane2D(np.array([[10.0, 300.0], [12.0, 340.0]]))
    with pytest.raises(InsufficientSupport):
        interpolate_lane_3d(far, p, CAM)
    with pytest.raises(InsufficientSupport):
        interpolate_lane_3d(l2, np.zeros((0, 3)), CAM)


def test_interpolate_hill_height():
    sc = synth_scene(SceneSpec(n_frames=1, hill=(0.0, 0.02), curvature=0.0, n_objects=0), seed=3)
    fr = sc.frames[0]
    truth = {t.track_id: t for t in sc.truth_in_ego(0)}
    worst = 0.0
    for l2 in fr.lanes_2d:
        lifted = interpolate_lane_3d(l2, filter_points_near_lane(fr.lidar, l2, CAM), CAM)
        t = truth[l2.track_id]
        z_true = np.interp(lifted[:, 1], t.y, t.z)
        worst = max(worst, np.abs(lifted[:, 2] - z_true).max())
    assert worst < 0.02


# ---------------------------------------------------------------------------
# splicing and visibility


def test_splice_single_frame_identity():
    lane = Lane3D(np.column_stack([np.zeros(10), np.arange(10.0), np.zeros(10)]), track_id=2)
    out = splice_segment([[lane]], [Pose()])
    assert np.array_equal(out[2].points, lane.points)


def test_splice_translation_union():
    a = Lane3D(np.column_stack([np.zeros(10), np.arange(10.0), np.zeros(10)]))
    b = Lane3D(np.column_stack([np.zeros(10), np.arange(10.0) + 0.5, np.zeros(10)]))
    out = splice_segment([[a], [b]], [Pose(), Pose(0.0, 5.0)])
    want = np.sort(np.r_[np.arange(10.0), np.arange(10.0) + 5.5])
    np.testing.assert_allclose(out[0].y, want, atol=1e-12)
    with pytest.raises(PoseMissing):
        splice_segment([[a], [b]], [Pose(), None])


def test_splice_twenty_frames_hausdorff():
    from lane3d.gt.pipeline import _lift_frame
    sc = synth_scene(SceneSpec(), seed=4)
    cfg = LabelConfig()
    long = splice_segment([_lift_frame(f, cfg) for f in sc.frames], [f.pose for f in sc.frames])
    for tid, lane in long.items():
        d = polyline_distance_3d(lane.points, sc.truth[tid].points)
        assert d.max() < 0.05


def test_mark_visibility():
    ys = np.arange(5.0, 91.0, 1.0)
    lane = Lane3D(np.column_stack([np.full_like(ys, 1.75), ys, np.zeros_like(ys)]))
    ann_pts = lane.points[ys <= 60]
    l2 = Lane2D(project_points(ann_pts, CAM)[0])
    vis = mark_visibility(lane, l2, CAM).visibility
    assert np.array_equal(vis, ys <= 60)
    inside = mark_visibility(lane.replace(points=ann_pts, visibility=None), l2, CAM)
    assert inside.visibility.all()
    assert not mark_visibility(lane, None, CAM).visibility.any()


# ---------------------------------------------------------------------------
# fitting


def test_smooth_fit_recovers_cubic():
    y = np.linspace(3, 90, 60)
    cx = (0.3, 0.02, -3e-4, 2e-6)
    cz = (0.1, 0.01, 0.0, -1e-6)
    x = np.polynomial.polynomial.polyval(y, cx)
    z = np.polynomial.polynomial.polyval(y, cz)
    fx, fz = fit_polynomials(y, x, z)
    np.testing.assert_allclose(fx.convert().coef, cx, atol=1e-9)
    np.testing.assert_allclose(fz.convert().coef, cz, atol=1e-9)
    lane = smooth_fit(np.column_stack([x, y, z]))
    np.testing.assert_allclose(lane.x, np.polynomial.polynomial.polyval(lane.y, cx), atol=1e-9)
    assert np.allclose(np.diff(lane.y), 0.5)


def test_smooth_fit_rejects_outlier():
    y = np.linspace(5, 55, 50)
    x = 1.0 + 0.01 * y + 1e-4 * y ** 2
    pts = np.column_stack([x, y, np.zeros(50)])
    clean = smooth_fit(pts)
    bad = pts.copy()
    bad[23, 0] += 5.0
    np.testing.assert_allclose(smooth_fit(bad).points, clean.points, atol=1e-3)
    with pytest.raises(DegenerateLane):
        smooth_fit(pts[:3])


def test_rotation_quarter_arc():
    R = 20.0
    a = np.linspace(0, np.pi / 2, 400)
    pts = np.column_stack([R * np.cos(a), R * np.sin(a), np.zeros_like(a)])
    lane = fit_with_rotation(pts)
    assert np.abs(np.hypot(lane.x, lane.y) - R).max() < 0.02


def test_rotation_straight_lane_is_identity():
    pts = np.column_stack([np.full(30, 2.0), np.linspace(0, 30, 30), np.zeros(30)])
    ang = principal_angle(pts[:, :2] - pts[:, :2].mean(axis=0))
    assert min(abs(ang), abs(abs(ang) - math.pi)) < 1e-12
    np.testing.assert_allclose(fit_with_rotation(pts).x, 2.0, atol=1e-9)


def test_rotation_full_circle_raises():
    a = np.linspace(0, 2 * np.pi, 500, endpoint=False)
    with pytest.raises(StillMultivalued):
        fit_with_rotation(np.column_stack([10 * np.cos(a), 10 * np.sin(a), np.zeros_like(a)]))


# ---------------------------------------------------------------------------
# end to end


def test_generate_labels_noiseless_flat(flat_scene, flat_labels):
    worst, n = worst_rms(flat_scene, flat_labels)
    assert n >= 70 and worst < 0.01


def test_generate_labels_visible_points_in_image(flat_scene, flat_labels):
    for fr, lanes in zip(flat_scene.frames, flat_labels):
        for lane in lanes:
            uv, depth = project_points(lane.points[lane.visibility], fr.cam)
            assert np.all(depth > 0)
            assert np.all((uv >= 0) & (uv <= [479, 359]))


def test_generate_labels_noisy():
    sc = synth_scene(SceneSpec(noise=0.02), seed=12)
    worst, n = worst_rms(sc, generate_labels(sc.frames))
    assert n >= 70 and worst < 0.05


def test_generate_labels_uturn():
    lanes = [LaneSpec(1.75), LaneSpec(polyline=uturn_polyline())]
    sc = synth_scene(SceneSpec(lanes=lanes, curvature=0.0, n_frames=10), seed=3)
    labels = generate_labels(sc.frames)
    worst, _ = worst_rms(sc, labels)
    folded = [l for ls in labels for l in ls if l.track_id == 1 and np.any(np.diff(l.y) < 0)]
    assert folded, "U-turn lane never reached the rotated fit"
    assert worst < 0.05


def test_generate_labels_deterministic_and_threaded(flat_scene, flat_labels):
    again = generate_labels(flat_scene.frames, config=LabelConfig(workers=3))
    assert all(a == b for la, lb in zip(flat_labels, again) for a, b in zip(la, lb))


def test_generate_labels_rigid_motion_equivariance():
    sc = synth_scene(SceneSpec(n_frames=6), seed=9)
    base = generate_labels(sc.frames)
    phi, t = 0.7, np.array([120.0, -40.0, 3.0])
    c, s = math.cos(phi), math.sin(phi)
    moved = []
    for fr in sc.frames:
        p = fr.pose
        pose = Pose(c * p.x - s * p.y + t[0], s * p.x + c * p.y + t[1], p.yaw + phi, p.z + t[2])
        lidar = LidarFrame(fr.lidar.points, pose, fr.lidar.object_boxes)
        moved.append(SynthFrame(fr.frame_id, fr.cam, pose, fr.lanes_2d, lidar, fr.image_size))
    out = generate_labels(moved)
    for la, lb in zip(base, out):
        assert len(la) == len(lb)
        for a, b in zip(la, lb):
            np.testing.assert_allclose(a.points, b.points, atol=1e-9)
            assert np.array_equal(a.visibility, b.visibility)
