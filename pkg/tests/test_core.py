import json
import math
from pathlib import Path

import numpy as np
import pytest

from lane3d.anchors import NUM_CLASSES, build_anchor_set
from lane3d.core import (DeformAttnParams, FeaturePyramid, HeadWeights, SelfAttnParams, TransformerParams,
                         bilinear_sample, deformable_cross_attention, ipm_warp, persformer_forward,
                         prediction_heads, self_attention)
from lane3d.core.gradcheck import desk_inputs, grad_check, grad_check_suite
from lane3d.core.ops import attention_matrix, deformable_sample_locations
from lane3d.errors import MissingGrid, NonDifferentiablePoint, ShapeMismatch
from lane3d.geometry import BevGridSpec, build_ipm_grid, default_camera

GOLDEN = Path(__file__).parent / "golden" / "persformer_checksum.json"


def loop_bilinear(f, u, v):
    H, W, C = f.shape
    u0, v0 = math.floor(u), math.floor(v)
    out = np.zeros(C)
    for dv in (0, 1):
        for du in (0, 1):
            r, c = v0 + dv, u0 + du
            if 0 <= r < H and 0 <= c < W:
                wgt = (u - u0 if du else 1 - (u - u0)) * (v - v0 if dv else 1 - (v - v0))
                out += wgt * f[r, c]
    return out


def loop_deformable(q, f, ref, prm, valid):
    """Scalar loops over queries, heads and points; value projection applied per corner."""
    N, C = q.shape
    H, W, _ = f.shape
    M, P, D = prm.heads, prm.points, C // prm.heads
    value = np.zeros((H, W, C))
    for r in range(H):
        for c in range(W):
            value[r, c] = f[r, c] @ prm.w_val + prm.b_val
    out = np.zeros((N, C))
    for n in range(N):
        if not valid[n]:
            continue
        concat = np.zeros(C)
        for m in range(M):
            logits = [q[n] @ prm.w_att[:, m * P + p] + prm.b_att[m * P + p] for p in range(P)]
            mx = max(logits)
            e = [math.exp(l - mx) for l in logits]
            for p in range(P):
                k = (m * P + p) * 2
                du = q[n] @ prm.w_off[:, k] + prm.b_off[k]
                dv = q[n] @ prm.w_off[:, k + 1] + prm.b_off[k + 1]
                s = loop_bilinear(value[:, :, m * D:(m + 1) * D], ref[n, 0] + du * W, ref[n, 1] + dv * H)
                concat[m * D:(m + 1) * D] += e[p] / sum(e) * s
        out[n] = concat @ prm.w_out + prm.b_out
    return out


def desk_setup(seed=0, C=8, heads=2, points=4):
    rng = np.random.default_rng(seed)
    spec = BevGridSpec(width_cells=6, height_cells=6)
    grid = build_ipm_grid(default_camera().scaled(16 / 480, 12 / 360), spec)
    ref, valid = grid.flat()
    q = rng.normal(size=(36, C))
    f = rng.normal(size=(12, 16, C))
    prm = DeformAttnParams.random(rng, C, heads, points, offset_scale=0.2, value_bias=True)
    return q, f, ref, valid, prm


def test_bilinear_examples():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(5, 6, 3))
    np.testing.assert_array_equal(bilinear_sample(f, [2.0, 3.0]), f[3, 2])
    np.testing.assert_allclose(bilinear_sample(f, [2.5, 3.0]), 0.5 * (f[3, 2] + f[3, 3]), atol=1e-15)
    np.testing.assert_array_equal(bilinear_sample(f, [-3.0, 10.0]), np.zeros(3))
    p = rng.uniform(-1, 6, (40, 2))
    want = np.array([loop_bilinear(f, u, v) for u, v in p])
    np.testing.assert_allclose(bilinear_sample(f, p), want, atol=1e-14)


def test_self_attention_examples():
    rng = np.random.default_rng(1)
    prm = SelfAttnParams.random(rng, 4)
    q1 = rng.normal(size=(1, 4))
    np.testing.assert_allclose(self_attention(q1, prm), q1 @ prm.w_v, atol=1e-15)
    q2 = np.vstack([q1, q1])
    out = self_attention(q2, prm)
    np.testing.assert_array_equal(out[0], out[1])
    q = rng.normal(size=(3, 4))
    Q, K, V = q @ prm.w_q, q @ prm.w_k, q @ prm.w_v
    dense = np.zeros((3, 4))
    for i in range(3):
        s = [Q[i] @ K[j] / 2.0 for j in range(3)]
        w = np.exp(s) / np.sum(np.exp(s))
        dense[i] = sum(w[j] * V[j] for j in range(3))
    np.testing.assert_allclose(self_attention(q, prm), dense, atol=1e-12)
    A = attention_matrix(rng.normal(size=(20, 4)), prm)
    np.testing.assert_allclose(A.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ShapeMismatch):
        self_attention(rng.normal(size=(3, 5)), prm)


def test_deformable_matches_loop_oracle():
    q, f, ref, valid, prm = desk_setup()
    got = deformable_cross_attention(q, f, ref, prm, valid)
    want = loop_deformable(q, f, ref, prm, valid)
    assert np.abs(got - want).max() < 1e-12


def test_deformable_ipm_reduction_and_invalid_cells():
    q, f, ref, valid, _ = desk_setup(1)
    for points in (1, 4):
        prm = DeformAttnParams.ipm_identity(8, heads=2, points=points)
        got = deformable_cross_attention(q, f, ref, prm, valid)
        assert np.abs(got - ipm_warp(f, ref, valid)).max() < 1e-12
    invalid = valid.copy()
    invalid[:6] = False
    out = deformable_cross_attention(q, f, ref, desk_setup(2)[-1], invalid)
    assert np.all(out[:6] == 0)


def test_deformable_errors():
    q, f, ref, valid, prm = desk_setup()
    with pytest.raises(MissingGrid):
        deformable_cross_attention(q, f, None, prm)
    with pytest.raises(ShapeMismatch):
        deformable_cross_attention(q, f, ref[:5], prm)
    with pytest.raises(ShapeMismatch):
        DeformAttnParams.random(np.random.default_rng(0), 9, heads=2)


def test_translation_equivariance():
    q, f, ref, valid, _ = desk_setup(3)
    prm = DeformAttnParams.random(np.random.default_rng(3), 8, offset_scale=0.02, value_bias=True)
    shifted = np.zeros_like(f)
    shifted[:, 1:] = f[:, :-1]
    a = deformable_cross_attention(q, f, ref, prm, valid)
    b = deformable_cross_attention(q, shifted, ref + [1.0, 0.0], prm, valid)
    loc = deformable_sample_locations(q, np.where(valid[:, None], ref, 0.0), prm, f.shape)
    # skip queries reading either border column: the shift drops one and zero-fills the other
    inner = valid & np.all((loc[..., 0] >= 0) & (loc[..., 0] < f.shape[1] - 2), axis=(1, 2))
    assert inner.sum() > 5
    np.testing.assert_allclose(a[inner], b[inner], atol=1e-12)


def forward_setup(seed):
    rng = np.random.default_rng(seed)
    spec = BevGridSpec(width_cells=6, height_cells=6)
    pyr = FeaturePyramid.random(rng, shapes=((12, 16), (6, 8)), channels=8, batch=3)
    params = TransformerParams.random(rng, spec, n_levels=2, channels=8)
    return pyr, spec, params


def test_forward_zero_features_and_batch_permutation():
    pyr, spec, params = forward_setup(0)
    cam = default_camera()
    zero = FeaturePyramid([np.zeros_like(l) for l in pyr.levels])
    assert all(np.all(o == 0) for o in persformer_forward(zero, cam, spec, params))
    out = persformer_forward(pyr, cam, spec, params)
    perm = [2, 0, 1]
    out_p = persformer_forward(FeaturePyramid([l[perm] for l in pyr.levels]), cam, spec, params)
    for a, b in zip(out, out_p):
        np.testing.assert_array_equal(a[perm], b)
    assert out[0].shape == (3, 6, 6, 8) and out[1].shape == (3, 3, 3, 8)


def test_forward_golden_checksum():
    pyr, spec, params = forward_setup(7)
    out = persformer_forward(pyr, default_camera(), spec, params)
    got = [float(np.sum(o)) for o in out] + [float(np.sum(np.abs(o))) for o in out]
    want = json.loads(GOLDEN.read_text())["checksums"]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_pyramid_shape_contract():
    FeaturePyramid.random(np.random.default_rng(0), channels=2)
    with pytest.raises(ShapeMismatch):
        FeaturePyramid([np.zeros((12, 16, 4)), np.zeros((12, 16, 4))])
    with pytest.raises(ShapeMismatch):
        FeaturePyramid([np.zeros((12, 16, 4)), np.zeros((6, 8, 3))])


def test_heads_zero_weights_and_loop_oracle():
    spec = BevGridSpec(width_cells=26, height_cells=14)
    anchors = build_anchor_set(spec)
    rng = np.random.default_rng(5)
    C = 3
    f_bev = rng.normal(size=spec.shape + (C,))
    f_fv = rng.normal(size=(45, 60, C))
    pred = prediction_heads(f_bev, anchors, HeadWeights.zeros(C), f_fv)
    assert np.all(pred.cls_logits == 0) and np.all(pred.u_off == 0)
    hw = HeadWeights.random(rng, C)
    pred = prediction_heads(f_bev, anchors, hw, f_fv)
    for a in (0, 10, 20, 27):
        feats = []
        for x, y in zip(anchors.x_3d[a], anchors.y_samples_3d):
            col = (x - spec.x_extent[0]) / spec.cell_width - 0.5
            row = (spec.y_extent[1] - y) / spec.cell_height - 0.5
            feats.append(loop_bilinear(f_bev, col, row))
        o = np.concatenate(feats) @ hw.w3d + hw.b3d
        np.testing.assert_allclose(pred.cls_logits[a], o[:NUM_CLASSES], atol=1e-12)
        np.testing.assert_allclose(pred.vis_logits[a], o[NUM_CLASSES + 20:], atol=1e-12)


def test_heads_off_grid_anchor_reads_zero():
    anchors = build_anchor_set()
    spec = anchors.spec
    a = 0  # leftmost start, steepest leftward angle leaves the grid immediately
    assert not anchors.vis_3d[a, 1:].any()
    hw = HeadWeights(np.eye(10 * 2, NUM_CLASSES + 30), np.zeros(NUM_CLASSES + 30))
    pred = prediction_heads(np.ones(spec.shape + (2,)), anchors, hw)
    assert np.all(pred.cls_logits[a, 2:] == 0)


def draw_and_check(op_id, rng, attempts=20):
    for _ in range(attempts):
        try:
            return grad_check(op_id, desk_inputs(op_id, rng))
        except NonDifferentiablePoint:
            continue
    raise AssertionError("no differentiable draw")


def test_gradcheck_examples():
    rng = np.random.default_rng(0)
    assert draw_and_check("linear", rng) < 1e-9
    x = {"q": rng.normal(size=(4, 8))}
    x.update({k: rng.normal(0, 0.35, (8, 8)) for k in ("w_q", "w_k", "w_v")})
    assert grad_check("self_attention", x) < 1e-6
    assert draw_and_check("deformable_cross_attention", rng) < 1e-5


def test_gradcheck_rejects_cell_boundary():
    x = desk_inputs("bilinear_sample", np.random.default_rng(0))
    x["p"][0] = [2.0, 3.0]
    with pytest.raises(NonDifferentiablePoint):
        grad_check("bilinear_sample", x)


def test_gradcheck_suite_all_ops():
    errs = grad_check_suite(0)
    assert set(errs) >= {"self_attention", "bilinear_sample", "deformable_cross_attention", "loss_3d",
                         "loss_2d", "loss_seg", "total_loss"}
    assert max(errs.values()) < 1e-5
