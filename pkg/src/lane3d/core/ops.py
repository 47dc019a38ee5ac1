"""Differentiable numpy kernels: linear, bilinear sampling, self-attention and
IPM-seeded deformable cross-attention, each with a hand-written backward pass.

Tensors are plain ``np.ndarray`` values. Feature maps are channel-last
``(H, W, C)``; sample positions are ``(u, v)`` = (column, row) with integer
values at cell centers. Out-of-range corners contribute zero.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace

import numpy as np

from ..errors import MissingGrid, ShapeMismatch


def linear(x, w, b=None):
    y = x @ w
    return y if b is None else y + b


def linear_backward(x, w, g):
    return {"x": g @ w.T, "w": x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1]),
            "b": g.reshape(-1, g.shape[-1]).sum(axis=0)}


def softmax(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    e = np.exp(a - m)
    return e / e.sum(axis=axis, keepdims=True)


def _corners(p):
    u, v = p[..., 0], p[..., 1]
    u0, v0 = np.floor(u), np.floor(v)
    du, dv = u - u0, v - v0
    return u0.astype(np.int64), v0.astype(np.int64), du, dv


def _gather(f, vi, ui):
    H, W = f.shape[:2]
    ok = (vi >= 0) & (vi < H) & (ui >= 0) & (ui < W)
    vals = f[np.clip(vi, 0, H - 1), np.clip(ui, 0, W - 1)]
    return vals * ok[..., None], ok


def bilinear_sample(f, p):
    """Sample ``f`` (H, W, C) at fractional positions ``p`` (..., 2) -> (..., C)."""
    f = np.asarray(f)
    p = np.asarray(p, dtype=f.dtype if f.dtype.kind == "f" else np.float64)
    if f.ndim != 3 or p.shape[-1] != 2:
        raise ShapeMismatch("expected f of shape (H, W, C) and p of shape (..., 2)")
    finite = np.all(np.isfinite(p), axis=-1)
    p = np.where(finite[..., None], p, -10.0)
    u0, v0, du, dv = _corners(p)
    f00, _ = _gather(f, v0, u0)
    f01, _ = _gather(f, v0, u0 + 1)
    f10, _ = _gather(f, v0 + 1, u0)
    f11, _ = _gather(f, v0 + 1, u0 + 1)
    du, dv = du[..., None], dv[..., None]
    return ((1 - du) * (1 - dv) * f00 + du * (1 - dv) * f01
            + (1 - du) * dv * f10 + du * dv * f11)


def bilinear_sample_backward(f, p, g):
    """Gradients of ``sum(g * bilinear_sample(f, p))`` w.r.t. f and p."""
    f = np.asarray(f)
    p = np.asarray(p, dtype=f.dtype)
    H, W, C = f.shape
    finite = np.all(np.isfinite(p), axis=-1)
    p = np.where(finite[..., None], p, -10.0)
    u0, v0, du, dv = _corners(p)
    f00, k00 = _gather(f, v0, u0)
    f01, k01 = _gather(f, v0, u0 + 1)
    f10, k10 = _gather(f, v0 + 1, u0)
    f11, k11 = _gather(f, v0 + 1, u0 + 1)
    dud, dvd = du[..., None], dv[..., None]
    g_u = ((1 - dvd) * (f01 - f00) + dvd * (f11 - f10)) * g
    g_v = ((1 - dud) * (f10 - f00) + dud * (f11 - f01)) * g
    g_p = np.stack([g_u.sum(-1), g_v.sum(-1)], axis=-1) * finite[..., None]

    g_f = np.zeros_like(f)
    gg = g.reshape(-1, C)
    for (dvi, dui, ok, w) in ((0, 0, k00, (1 - du) * (1 - dv)), (0, 1, k01, du * (1 - dv)),
                              (1, 0, k10, (1 - du) * dv), (1, 1, k11, du * dv)):
        m = (ok & finite).reshape(-1)
        vi = (v0 + dvi).reshape(-1)[m]
        ui = (u0 + dui).reshape(-1)[m]
        np.add.at(g_f, (vi, ui), gg[m] * w.reshape(-1)[m, None])
    return {"f": g_f, "p": g_p}


def sample_positions_margin(p) -> float:
    """Smallest distance from any sample coordinate to an integer (cell boundary)."""
    p = np.asarray(p, dtype=np.float64)
    p = p[np.isfinite(p)]
    if p.size == 0:
        return math.inf
    return float(np.min(np.abs(p - np.round(p))))


# ---------------------------------------------------------------------------
# self-attention


@dataclass
class SelfAttnParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    @classmethod
    def identity(cls, channels, dtype=np.float64):
        eye = np.eye(channels, dtype=dtype)
        return cls(eye.copy(), eye.copy(), eye.copy())

    @classmethod
    def random(cls, rng, channels, scale=None, dtype=np.float64):
        scale = scale if scale is not None else 1.0 / math.sqrt(channels)
        return cls(*(rng.normal(0, scale, (channels, channels)).astype(dtype) for _ in range(3)))

    def astype(self, dtype):
        return SelfAttnParams(*(getattr(self, f.name).astype(dtype) for f in fields(self)))


def attention_matrix(q, params: SelfAttnParams):
    Q, K = q @ params.w_q, q @ params.w_k
    return softmax(Q @ K.T / math.sqrt(Q.shape[-1]), axis=-1)


def self_attention(q, params: SelfAttnParams | None = None):
    """softmax(Q K^T / sqrt(d_k)) V with Q, K, V all projected from the same BEV query."""
    q = np.asarray(q)
    if q.ndim != 2:
        raise ShapeMismatch("query must have shape (HW, C)")
    params = params or SelfAttnParams.identity(q.shape[1], q.dtype)
    if params.w_q.shape[0] != q.shape[1]:
        raise ShapeMismatch("query channels do not match projection weights")
    A = attention_matrix(q, params)
    return A @ (q @ params.w_v)


def self_attention_backward(q, params: SelfAttnParams, g):
    Q, K, V = q @ params.w_q, q @ params.w_k, q @ params.w_v
    scale = 1.0 / math.sqrt(Q.shape[-1])
    A = softmax(Q @ K.T * scale, axis=-1)
    g_A = g @ V.T
    g_V = A.T @ g
    g_S = A * (g_A - np.sum(g_A * A, axis=-1, keepdims=True)) * scale
    g_Q = g_S @ K
    g_K = g_S.T @ Q
    return {
        "q": g_Q @ params.w_q.T + g_K @ params.w_k.T + g_V @ params.w_v.T,
        "w_q": q.T @ g_Q,
        "w_k": q.T @ g_K,
        "w_v": q.T @ g_V,
    }


# ---------------------------------------------------------------------------
# deformable cross-attention


@dataclass
class DeformAttnParams:
    """Offset/weight predictors plus value and output projections.

    Offsets are predicted in coordinates normalized to the feature level
    (one unit spans the full width/height) and scaled to pixels before sampling.
    """

    heads: int
    points: int
    channels: int
    w_off: np.ndarray  # (C, heads*points*2)
    b_off: np.ndarray
    w_att: np.ndarray  # (C, heads*points)
    b_att: np.ndarray
    w_val: np.ndarray  # (C, C)
    b_val: np.ndarray
    w_out: np.ndarray  # (C, C)
    b_out: np.ndarray

    def __post_init__(self):
        C, M, P = self.channels, self.heads, self.points
        if M < 1 or C % M:
            raise ShapeMismatch("channels must be divisible by heads")
        if P < 1:
            raise ShapeMismatch("points_per_query must be >= 1")
        expect = {"w_off": (C, M * P * 2), "b_off": (M * P * 2,), "w_att": (C, M * P),
                  "b_att": (M * P,), "w_val": (C, C), "b_val": (C,), "w_out": (C, C), "b_out": (C,)}
        for name, shape in expect.items():
            if np.shape(getattr(self, name)) != shape:
                raise ShapeMismatch(f"{name} has shape {np.shape(getattr(self, name))}, expected {shape}")

    @classmethod
    def ipm_identity(cls, channels, heads=2, points=4, dtype=np.float64):
        """Zero offsets, uniform point weights, identity value/output maps."""
        C, M, P = channels, heads, points
        z = lambda *s: np.zeros(s, dtype)
        return cls(M, P, C, z(C, M * P * 2), z(M * P * 2), z(C, M * P), z(M * P),
                   np.eye(C, dtype=dtype), z(C), np.eye(C, dtype=dtype), z(C))

    @classmethod
    def random(cls, rng, channels, heads=2, points=4, offset_scale=0.05, dtype=np.float64,
               value_bias=False):
        C, M, P = channels, heads, points
        s = 1.0 / math.sqrt(C)
        n = lambda *shape, scale=s: rng.normal(0, scale, shape).astype(dtype)
        zb = lambda k: (n(k) if value_bias else np.zeros(k, dtype))
        return cls(M, P, C, n(C, M * P * 2, scale=offset_scale * s), n(M * P * 2, scale=offset_scale),
                   n(C, M * P), n(M * P), n(C, C), zb(C), n(C, C), zb(C))

    def astype(self, dtype):
        kw = {f.name: getattr(self, f.name).astype(dtype)
              for f in fields(self) if isinstance(getattr(self, f.name), np.ndarray)}
        return replace(self, **kw)

    def arrays(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)
                if isinstance(getattr(self, f.name), np.ndarray)}


def _check_ref(q, ref, valid):
    if ref is None:
        raise MissingGrid("deformable cross-attention needs an IPM reference grid")
    ref = np.asarray(ref)
    if ref.shape != (q.shape[0], 2):
        raise ShapeMismatch(f"reference map has shape {ref.shape}, expected {(q.shape[0], 2)}")
    valid = np.ones(len(ref), bool) if valid is None else np.asarray(valid, bool).reshape(-1)
    if valid.shape != (q.shape[0],):
        raise ShapeMismatch("validity mask length must equal query count")
    return ref, valid


def _deform_forward(q, f, ref, valid, prm: DeformAttnParams):
    N, C = q.shape
    H, W, Cf = f.shape
    if C != prm.channels or Cf != prm.channels:
        raise ShapeMismatch("query/feature channels must equal params.channels")
    M, P, D = prm.heads, prm.points, C // prm.heads
    scale = np.array([W, H], dtype=q.dtype)
    value = f @ prm.w_val + prm.b_val  # (H, W, C)
    off = (q @ prm.w_off + prm.b_off).reshape(N, M, P, 2)
    safe_ref = np.where(valid[:, None], ref, -1e6)
    loc = safe_ref[:, None, None, :] + off * scale
    att = softmax((q @ prm.w_att + prm.b_att).reshape(N, M, P), axis=-1)
    samples = np.empty((N, M, P, D), dtype=q.dtype)
    for m in range(M):
        samples[:, m] = bilinear_sample(value[:, :, m * D:(m + 1) * D], loc[:, m])
    heads_out = np.einsum("nmp,nmpd->nmd", att, samples)
    concat = heads_out.reshape(N, C)
    out = (concat @ prm.w_out + prm.b_out) * valid[:, None]
    cache = dict(value=value, loc=loc, att=att, samples=samples, concat=concat, scale=scale)
    return out, cache


def deformable_cross_attention(q, f_fv, ref, params: DeformAttnParams, valid=None):
    """Per BEV query: predict point offsets and weights, sample ``f_fv`` around the IPM
    reference pixel, aggregate per head, project. Invalid queries output zeros.

    Args:
        q: (N, C) BEV queries.
        f_fv: (H, W, C) front-view features.
        ref: (N, 2) reference pixels in ``f_fv`` coordinates.
        valid: (N,) bool, False for cells above the horizon.
    """
    q = np.asarray(q)
    ref, valid = _check_ref(q, ref, valid)
    return _deform_forward(q, np.asarray(f_fv), ref, valid, params)[0]


def deformable_sample_locations(q, ref, params: DeformAttnParams, feature_shape, valid=None):
    """(N, heads, points, 2) pixel locations the block samples at."""
    q = np.asarray(q)
    ref, valid = _check_ref(q, ref, valid)
    H, W = feature_shape[:2]
    off = (q @ params.w_off + params.b_off).reshape(len(q), params.heads, params.points, 2)
    loc = ref[:, None, None, :] + off * np.array([W, H], dtype=q.dtype)
    return loc[valid]


def deformable_cross_attention_backward(q, f_fv, ref, params: DeformAttnParams, g, valid=None):
    """Gradients of ``sum(g * out)`` w.r.t. the queries, features and every weight."""
    q = np.asarray(q)
    f = np.asarray(f_fv)
    ref, valid = _check_ref(q, ref, valid)
    out, c = _deform_forward(q, f, ref, valid, params)
    N, C = q.shape
    M, P, D = params.heads, params.points, C // params.heads
    g = np.asarray(g) * valid[:, None]

    grads = {"w_out": c["concat"].T @ g, "b_out": g.sum(axis=0)}
    g_heads = (g @ params.w_out.T).reshape(N, M, D)
    g_att = np.einsum("nmd,nmpd->nmp", g_heads, c["samples"])
    g_samples = c["att"][..., None] * g_heads[:, :, None, :]
    att = c["att"]
    g_logits = (att * (g_att - np.sum(g_att * att, axis=-1, keepdims=True))).reshape(N, M * P)
    grads["w_att"] = q.T @ g_logits
    grads["b_att"] = g_logits.sum(axis=0)

    g_value = np.zeros_like(c["value"])
    g_loc = np.zeros_like(c["loc"])
    for m in range(M):
        sl = slice(m * D, (m + 1) * D)
        b = bilinear_sample_backward(c["value"][:, :, sl], c["loc"][:, m], g_samples[:, m])
        g_value[:, :, sl] += b["f"]
        g_loc[:, m] = b["p"]
    g_off = (g_loc * c["scale"]).reshape(N, M * P * 2)
    grads["w_off"] = q.T @ g_off
    grads["b_off"] = g_off.sum(axis=0)
    gv = g_value.reshape(-1, C)
    grads["w_val"] = f.reshape(-1, C).T @ gv
    grads["b_val"] = gv.sum(axis=0)
    grads["f_fv"] = g_value @ params.w_val.T
    grads["q"] = g_logits @ params.w_att.T + g_off @ params.w_off.T
    return grads


def ipm_warp(f_fv, ref, valid=None):
    """Plain IPM: bilinearly sample front-view features at each reference pixel."""
    ref = np.asarray(ref)
    out = bilinear_sample(f_fv, ref)
    if valid is not None:
        out = out * np.asarray(valid, bool).reshape(ref.shape[:-1])[..., None]
    return out
