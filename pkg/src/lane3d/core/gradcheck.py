"""Central-difference verification of the hand-written backward passes.

Every registered op exposes a forward returning an array (or scalar) and a
backward returning gradients of ``sum(G * out)`` for a fixed random ``G``.
The reported error for one input is the norm-wise relative error
``|a - n| / max(|a|, |n|)``; ``grad_check`` returns the max over inputs.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..errors import NonDifferentiablePoint
from .model import RawPrediction
from .ops import (DeformAttnParams, SelfAttnParams, bilinear_sample, bilinear_sample_backward,
                  deformable_cross_attention, deformable_cross_attention_backward,
                  deformable_sample_locations, linear, linear_backward, self_attention,
                  self_attention_backward)

DEFAULT_WIGGLE = 1e-5


@dataclass
class _Op:
    forward: Callable
    backward: Callable
    wrt: tuple
    guard: Callable | None = None


def _near_integer(p, tol):
    p = np.asarray(p)
    p = p[np.isfinite(p)]
    return p.size > 0 and np.min(np.abs(p - np.round(p))) < tol


# ---- linear ---------------------------------------------------------------

def _lin_fwd(x):
    return linear(x["x"], x["w"], x["b"])


def _lin_bwd(x, g):
    return linear_backward(x["x"], x["w"], g)


# ---- self-attention -------------------------------------------------------

def _sa_params(x):
    return SelfAttnParams(x["w_q"], x["w_k"], x["w_v"])


def _sa_fwd(x):
    return self_attention(x["q"], _sa_params(x))


def _sa_bwd(x, g):
    return self_attention_backward(x["q"], _sa_params(x), g)


# ---- bilinear -------------------------------------------------------------

def _bl_fwd(x):
    return bilinear_sample(x["f"], x["p"])


def _bl_bwd(x, g):
    return bilinear_sample_backward(x["f"], x["p"], g)


def _bl_guard(x, h):
    if _near_integer(x["p"], 2 * h):
        raise NonDifferentiablePoint("a bilinear sample sits on a cell boundary; re-sample inputs")


# ---- deformable cross-attention ------------------------------------------

_DEFORM_WEIGHTS = ("w_off", "b_off", "w_att", "b_att", "w_val", "b_val", "w_out", "b_out")


def _da_params(x):
    return DeformAttnParams(x["heads"], x["points"], x["q"].shape[1],
                            **{k: x[k] for k in _DEFORM_WEIGHTS})


def _da_fwd(x):
    return deformable_cross_attention(x["q"], x["f_fv"], x["ref"], _da_params(x), x.get("valid"))


def _da_bwd(x, g):
    return deformable_cross_attention_backward(x["q"], x["f_fv"], x["ref"], _da_params(x), g,
                                               x.get("valid"))


def _da_guard(x, h):
    prm = _da_params(x)
    loc = deformable_sample_locations(x["q"], x["ref"], prm, x["f_fv"].shape, x.get("valid"))
    H, W = x["f_fv"].shape[:2]
    reach = max(1.0, np.abs(x["q"]).max(), np.abs(prm.w_off).max())
    if _near_integer(loc, 2 * h * max(H, W) * reach):
        raise NonDifferentiablePoint("a deformable sample sits on a cell boundary; re-sample inputs")


# ---- losses ---------------------------------------------------------------

def _pred3d(x):
    return RawPrediction(x["cls_logits"], x["x_off"], x["z"], x["vis_logits"])


def _pred2d(x):
    return RawPrediction(x["cls_logits"], x["x_off"], x["z"], x["vis_logits"],
                         x["cls_logits_2d"], x["u_off"], x["vis_logits_2d"])


def _kink_guard(pairs, logits, h):
    from ..losses import LOGIT_CLAMP
    for a, b, m in pairs:
        d = np.abs(a - b)[np.asarray(m, bool)]
        if d.size and d.min() < 2 * h:
            raise NonDifferentiablePoint("an L1 residual is at zero")
    for l in logits:
        if np.any(np.abs(np.abs(l) - LOGIT_CLAMP) < 2 * h):
            raise NonDifferentiablePoint("a logit sits on the clamp boundary")


def _l3_fwd(x):
    from ..losses import loss_3d
    return np.asarray(loss_3d(_pred3d(x), x["targets"]))


def _l3_bwd(x, g):
    from ..losses import loss_3d_grad
    return {k: g * v for k, v in loss_3d_grad(_pred3d(x), x["targets"]).items()}


def _l3_guard(x, h):
    t = x["targets"]
    m = t.vis & (t.cls > 0)[:, None]
    _kink_guard([(x["x_off"], t.x_off, m), (x["z"], t.z, m)], [x["cls_logits"], x["vis_logits"]], h)


def _l2_fwd(x):
    from ..losses import loss_2d
    return np.asarray(loss_2d(_pred2d(x), x["targets"]))


def _l2_bwd(x, g):
    from ..losses import loss_2d_grad
    return {k: g * v for k, v in loss_2d_grad(_pred2d(x), x["targets"]).items()}


def _l2_guard(x, h):
    t = x["targets"]
    m = t.vis_2d & (t.cls > 0)[:, None]
    _kink_guard([(x["u_off"], t.u_off, m)], [x["cls_logits_2d"], x["vis_logits_2d"]], h)


def _seg_fwd(x):
    from ..losses import loss_seg
    return np.asarray(loss_seg(x["pred"], x["target"]))


def _seg_bwd(x, g):
    from ..losses import loss_seg_grad
    return {"pred": g * loss_seg_grad(x["pred"], x["target"])}


def _weights(x):
    from ..losses import LossWeights
    return LossWeights(float(x["log_alpha"]), float(x["log_beta"]), float(x["log_gamma"]))


def _tot_fwd(x):
    from ..losses import total_loss
    return np.asarray(total_loss(float(x["l2d"]), float(x["l3d"]), float(x["lseg"]), _weights(x)))


def _tot_bwd(x, g):
    from ..losses import total_loss_grad
    d = total_loss_grad(float(x["l2d"]), float(x["l3d"]), float(x["lseg"]), _weights(x))
    return {k: g * np.asarray(v) for k, v in d.items()}


OPS = {
    "linear": _Op(_lin_fwd, _lin_bwd, ("x", "w", "b")),
    "self_attention": _Op(_sa_fwd, _sa_bwd, ("q", "w_q", "w_k", "w_v")),
    "bilinear_sample": _Op(_bl_fwd, _bl_bwd, ("f", "p"), _bl_guard),
    "deformable_cross_attention": _Op(_da_fwd, _da_bwd, ("q", "f_fv") + _DEFORM_WEIGHTS, _da_guard),
    "loss_3d": _Op(_l3_fwd, _l3_bwd, ("cls_logits", "x_off", "z", "vis_logits"), _l3_guard),
    "loss_2d": _Op(_l2_fwd, _l2_bwd, ("cls_logits_2d", "u_off", "vis_logits_2d"), _l2_guard),
    "loss_seg": _Op(_seg_fwd, _seg_bwd, ("pred",)),
    "total_loss": _Op(_tot_fwd, _tot_bwd, ("log_alpha", "log_beta", "log_gamma", "l2d", "l3d", "lseg")),
}


def _numeric(op: _Op, x: dict, key: str, G, h):
    base = np.array(x[key], dtype=np.float64)
    flat = base.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = np.sum(G * op.forward({**x, key: base}))
        flat[i] = orig - h
        fm = np.sum(G * op.forward({**x, key: base}))
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(base.shape)


def grad_check_table(op_id: str, inputs: dict, wiggle: float = DEFAULT_WIGGLE, seed: int = 0,
                     wrt=None) -> dict:
    """Relative error per differentiable input of ``op_id``."""
    if op_id not in OPS:
        raise KeyError(f"unknown op {op_id!r}; known: {sorted(OPS)}")
    op = OPS[op_id]
    x = {k: (np.asarray(v, dtype=np.float64) if k in op.wrt else v) for k, v in inputs.items()}
    if op.guard is not None:
        op.guard(x, wiggle)
    out = np.asarray(op.forward(x))
    G = np.random.default_rng(seed).normal(size=out.shape)
    analytic = op.backward(x, G)
    table = {}
    for key in (wrt or op.wrt):
        n = _numeric(op, x, key, G, wiggle)
        a = np.asarray(analytic[key], dtype=np.float64).reshape(n.shape)
        denom = max(np.linalg.norm(a), np.linalg.norm(n))
        table[key] = float(np.linalg.norm(a - n) / denom) if denom > 0 else 0.0
    return table


def grad_check(op_id: str, inputs: dict, wiggle: float = DEFAULT_WIGGLE, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return max(grad_check_table(op_id, inputs, wiggle, seed).values())


# ---- desk-scale input factories ------------------------------------------

def desk_inputs(op_id: str, rng, channels=8, bev_hw=(6, 6), fv_hw=(12, 16)) -> dict:
    """Random float64 inputs for ``op_id`` at a size where finite differences are quick."""
    C = channels
    if op_id == "linear":
        return {"x": rng.normal(size=(5, C)), "w": rng.normal(size=(C, 3)), "b": rng.normal(size=3)}
    if op_id == "self_attention":
        p = SelfAttnParams.random(rng, C)
        return {"q": rng.normal(size=(4, C)), "w_q": p.w_q, "w_k": p.w_k, "w_v": p.w_v}
    if op_id == "bilinear_sample":
        H, W = fv_hw
        return {"f": rng.normal(size=(H, W, 3)),
                "p": rng.uniform([-0.9, -0.9], [W - 0.1, H - 0.1], size=(10, 2))}
    if op_id == "deformable_cross_attention":
        N = bev_hw[0] * bev_hw[1]
        H, W = fv_hw
        prm = DeformAttnParams.random(rng, C, value_bias=True)
        return {"q": rng.normal(size=(N, C)), "f_fv": rng.normal(size=(H, W, C)),
                "ref": rng.uniform([0, 0], [W - 1, H - 1], size=(N, 2)), "valid": np.ones(N, bool),
                "heads": prm.heads, "points": prm.points, **prm.arrays()}
    if op_id in ("loss_3d", "loss_2d"):
        from ..anchors import NUM_CLASSES, LaneTargets
        A, n_y, n_v = 6, 10, 12
        cls = rng.integers(0, NUM_CLASSES, A)
        cls[:2] = (1, 3)
        tg = LaneTargets(cls, rng.normal(size=(A, n_y)), rng.normal(size=(A, n_y)),
                         rng.random((A, n_y)) < 0.7, rng.normal(size=(A, n_v)), rng.random((A, n_v)) < 0.7)
        return {"cls_logits": rng.normal(size=(A, NUM_CLASSES)), "x_off": rng.normal(size=(A, n_y)),
                "z": rng.normal(size=(A, n_y)), "vis_logits": rng.normal(size=(A, n_y)),
                "cls_logits_2d": rng.normal(size=(A, NUM_CLASSES)), "u_off": rng.normal(size=(A, n_v)),
                "vis_logits_2d": rng.normal(size=(A, n_v)), "targets": tg}
    if op_id == "loss_seg":
        return {"pred": rng.uniform(0.05, 0.95, size=(6, 5)), "target": (rng.random((6, 5)) < 0.3)}
    if op_id == "total_loss":
        return {k: rng.normal() for k in ("log_alpha", "log_beta", "log_gamma")} | \
               {k: rng.uniform(0.1, 3) for k in ("l2d", "l3d", "lseg")}
    raise KeyError(op_id)


def grad_check_suite(seed: int = 0, wiggle: float = DEFAULT_WIGGLE, attempts: int = 20) -> dict:
    """Max relative error for every registered op, re-drawing inputs that land on a kink."""
    rng = np.random.default_rng(seed)
    res = {}
    for op_id in OPS:
        for _ in range(attempts):
            try:
                res[op_id] = grad_check(op_id, desk_inputs(op_id, rng), wiggle, seed)
                break
            except NonDifferentiablePoint:
                continue
        else:
            raise NonDifferentiablePoint(f"{op_id}: no smooth inputs after {attempts} draws")
    return res
