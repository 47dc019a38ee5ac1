"""Robust smoothing of lifted lane points and the rotate-then-fit fallback."""
from __future__ import annotations

import math

import numpy as np
from numpy.polynomial import Polynomial
from scipy.interpolate import make_lsq_spline
from scipy.ndimage import median_filter

from ..errors import DegenerateLane, StillMultivalued
from ..lanes import Lane3D

MAD_SCALE = 1.4826


def fit_curve(t, values, knot_spacing=5.0, weights=None):
    """Least-squares cubic in ``t``; a cubic B-spline with interior knots at data
    quantiles once the run is longer than two knot spacings.

    Returns a callable (``numpy.polynomial.Polynomial`` when no interior knot is needed).
    """
    t = np.asarray(t, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    span = t[-1] - t[0]
    n_int = int(span // knot_spacing) - 1 if math.isfinite(knot_spacing) else 0
    n_int = min(max(n_int, 0), max(len(np.unique(t)) - 4, 0) // 2)
    if n_int == 0:
        return Polynomial.fit(t, values, 3, w=weights)
    inner = np.quantile(t, np.linspace(0, 1, n_int + 2)[1:-1])
    knots = np.concatenate([[t[0]] * 4, inner, [t[-1]] * 4])
    return make_lsq_spline(t, values, knots, k=3, w=weights)


def fit_polynomials(y, x, z, knot_spacing=float("inf")):
    """(x(y), z(y)) as plain least-squares cubics, for inspection of coefficients."""
    order = np.argsort(y, kind="stable")
    return (fit_curve(y[order], x[order], knot_spacing), fit_curve(y[order], z[order], knot_spacing))


def outlier_mask(y, values, window=9, k=3.0, floor=0.05):
    """True for inliers: residual against a running median stays within k robust sigmas."""
    # mirror padding: edge replication would let an end point vote for itself
    med = median_filter(values, size=window, mode="mirror")
    r = values - med
    mad = np.median(np.abs(r - np.median(r)))
    return np.abs(r - np.median(r)) <= max(k * MAD_SCALE * mad, floor)


def smooth_fit(points, step=0.5, knot_spacing=5.0, window=9, mad_k=3.0, floor=0.05,
               category=0, track_id=0) -> Lane3D:
    """Gate outliers, fit x(y) and z(y), resample on a ``step``-spaced y grid.

    Raises:
        DegenerateLane: fewer than 4 points, or no y extent.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 4:
        raise DegenerateLane("smoothing needs at least 4 points")
    pts = pts[np.argsort(pts[:, 1], kind="stable")]
    if len(pts) >= window:
        keep = outlier_mask(pts[:, 1], pts[:, 0], window, mad_k, floor)
        keep &= outlier_mask(pts[:, 1], pts[:, 2], window, mad_k, floor)
        pts = pts[keep]
    y = pts[:, 1]
    if len(pts) < 4 or len(np.unique(y)) < 4 or y[-1] - y[0] <= 0:
        raise DegenerateLane("not enough distinct y values to fit")
    fx = fit_curve(y, pts[:, 0], knot_spacing)
    fz = fit_curve(y, pts[:, 2], knot_spacing)
    lo, hi = math.ceil(y[0] / step - 1e-9), math.floor(y[-1] / step + 1e-9)
    yq = np.arange(lo, hi + 1) * step
    if len(yq) < 2:
        yq = np.array([y[0], y[-1]])
    return Lane3D(np.column_stack([fx(yq), yq, fz(yq)]), category=category, track_id=track_id)


def max_bin_spread(x, y, bin_size=0.5) -> float:
    """Largest x range among points sharing a y bin."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        return 0.0
    b = np.floor((y - y.min()) / bin_size).astype(np.int64)
    order = np.argsort(b, kind="stable")
    b, xs = b[order], x[order]
    starts = np.flatnonzero(np.r_[True, np.diff(b) > 0])
    return float(np.max(np.maximum.reduceat(xs, starts) - np.minimum.reduceat(xs, starts)))


def is_single_valued(x, y, bin_size=0.5, slack=2.5, tol=0.2) -> bool:
    """Function-of-y test for an unordered point set: within every y bin the x
    spread must stay below what a steep but single-valued curve can produce."""
    return max_bin_spread(x, y, bin_size) <= slack * bin_size + tol


def _rot(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def principal_angle(xy) -> float:
    """Rotation that maps the leading covariance axis onto +y."""
    xy = np.asarray(xy, dtype=np.float64)
    w, v = np.linalg.eigh(np.cov(xy.T))
    e = v[:, np.argmax(w)]
    if e[1] < 0 or (e[1] == 0 and e[0] < 0):
        e = -e
    return math.atan2(e[0], e[1])


def fit_with_rotation(points, step=0.5, knot_spacing=1.0, scan_step_deg=1.0, category=0,
                      track_id=0, **fit_kw) -> Lane3D:
    """Rotate an unordered point set until it is single-valued in y, smooth there, rotate back.

    Orientations are scanned over a half-turn in ``scan_step_deg`` steps from
    the principal axis, and the one with the smallest per-bin x spread wins
    (ties go to the angle nearest the principal axis). Barely passing
    orientations leave steep stretches that the fixed y step samples sparsely.
    Lanes that need this path bend sharply, hence the finer default knot spacing.

    Raises:
        StillMultivalued: no rotation makes the set a function of y.
        DegenerateLane: fewer than 4 points.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 4:
        raise DegenerateLane("need at least 4 points")
    center = pts[:, :2].mean(axis=0)
    xy = pts[:, :2] - center
    base = principal_angle(xy)
    # the flattest orientation keeps the curve's slope small everywhere
    n = int(round(180.0 / scan_step_deg))
    spreads = []
    for i in range(n):
        a = base + math.radians(i * scan_step_deg)
        r = xy @ _rot(a).T
        spreads.append((max_bin_spread(r[:, 0], r[:, 1]), min(i, n - i), a))
    spread, _, a = min(spreads)
    best = a if spread <= 2.5 * 0.5 + 0.2 else None
    if best is not None:
        R = _rot(best)  # rotates the chosen axis onto +y
        r = xy @ R.T
        lane = smooth_fit(np.column_stack([r, pts[:, 2]]), step, knot_spacing,
                          category=category, track_id=track_id, **fit_kw)
        out = np.column_stack([lane.points[:, :2] @ R + center, lane.z])
        if out[-1, 1] < out[0, 1]:  # the scan may pick the backward-facing axis
            out = out[::-1]
        return lane.replace(points=out)
    raise StillMultivalued("no rotation makes the lane a function of y")
