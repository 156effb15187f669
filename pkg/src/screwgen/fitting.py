"""Boundary-curve fitting and parametric matching.

Point clouds are fitted with a stabilized least-squares collocation whose
knot vector is reselected adaptively from the local projection residual.
Matching assigns consistent parametric values to two opposing clouds by
recursive closest-pair bisection; the resulting monotone reparameterization
functions can be shifted periodically (closed loops) and blended over the
rotation angle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FitConvergenceError, FitError, MatchingError
from .splines import (KnotVector, SplineCurve, basis_matrix,
                      greville_abscissae, refine_knots)


def bounding_box_diagonal(points) -> float:
    points = np.asarray(points, dtype=float)
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0)))


def chord_length_params(points) -> np.ndarray:
    """Cumulative chord-length parameters of an ordered cloud, scaled to [0, 1]."""
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        raise FitError("need at least 2 points for chord-length parameters")
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = seg.sum()
    if total <= 0:
        raise FitError("degenerate cloud: zero total chord length")
    t = np.concatenate([[0.0], np.cumsum(seg)]) / total
    t[-1] = 1.0
    return t


# ---------------------------------------------------------------------------
# stabilized least-squares fitting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FitResult:
    curve: SplineCurve
    params: np.ndarray
    residuals: np.ndarray

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max())


def fit_curve(points, params, kv: KnotVector, lam_reg: float | None = None,
              pins=None) -> FitResult:
    """Stabilized least-squares fit of (points, params) against the basis.

    The first and last control points are pinned to the first and last cloud
    points (exact endpoint interpolation); the remaining control points
    minimize the squared collocation residual plus ``lam_reg`` times a
    second-difference penalty, which keeps the normal system regular even
    when the cloud carries fewer points than the basis has functions.

    ``pins`` may add interior interpolation constraints as (param, point)
    pairs, enforced exactly through Lagrange multipliers.
    """
    points = np.asarray(points, dtype=float)
    params = np.asarray(params, dtype=float)
    if points.shape[0] != params.shape[0]:
        raise FitError("points and params length mismatch")
    if lam_reg is None:
        lam_reg = 1e-7 * bounding_box_diagonal(points) ** 2
    n = kv.n
    B = basis_matrix(kv, params)
    # second divided differences of the control polygon over the Greville
    # abscissae, scaled by the local gap: straight lines lie in the null
    # space and the penalty weight decays under knot refinement, so the
    # stabilization fixes rank deficiency without flooring fine fits
    g = greville_abscissae(kv)
    D = np.zeros((max(n - 2, 0), n))
    for i in range(n - 2):
        h0 = g[i + 1] - g[i]
        h1 = g[i + 2] - g[i + 1]
        hbar = 0.5 * (h0 + h1)
        D[i, i:i + 3] = (hbar / h0, -(hbar / h0 + hbar / h1), hbar / h1)

    pinned = np.zeros((n, 2))
    pinned[0] = points[0]
    pinned[-1] = points[-1]
    free = np.arange(1, n - 1)
    if free.size:
        Bf = B[:, free]
        rhs_pts = points - B[:, [0, n - 1]] @ pinned[[0, -1]]
        Df = D[:, free]
        Dp = D[:, [0, n - 1]] @ pinned[[0, -1]]
        M = Bf.T @ Bf + lam_reg * (Df.T @ Df)
        rhs = Bf.T @ rhs_pts - lam_reg * (Df.T @ Dp)
        if pins:
            pin_t = np.array([p[0] for p in pins], dtype=float)
            pin_p = np.array([p[1] for p in pins], dtype=float)
            C = basis_matrix(kv, pin_t)
            dvec = pin_p - C[:, [0, n - 1]] @ pinned[[0, -1]]
            Cf = C[:, free]
            k = len(pins)
            kkt = np.zeros((len(free) + k, len(free) + k))
            kkt[:len(free), :len(free)] = M
            kkt[:len(free), len(free):] = Cf.T
            kkt[len(free):, :len(free)] = Cf
            rhs_kkt = np.vstack([rhs, dvec])
            try:
                sol = np.linalg.solve(kkt, rhs_kkt)[:len(free)]
            except np.linalg.LinAlgError as exc:
                raise FitError(f"singular constrained fit: {exc}") from exc
        else:
            try:
                sol = np.linalg.solve(M, rhs)
            except np.linalg.LinAlgError as exc:
                raise FitError(f"singular fitting system: {exc}") from exc
        if not np.all(np.isfinite(sol)):
            raise FitError("fitting system numerically singular despite stabilization")
        ctrl = pinned
        ctrl[free] = sol
    else:
        ctrl = pinned
    curve = SplineCurve(kv, ctrl)
    residuals = np.linalg.norm(curve(params) - points, axis=1)
    return FitResult(curve, params, residuals)


def adapt_knots(fit: FitResult, threshold: float) -> KnotVector:
    """Bisect every knot span containing a point whose residual exceeds the
    threshold; spans without offenders are kept."""
    kv = fit.curve.basis
    bps = kv.breakpoints
    offenders = fit.params[fit.residuals > threshold]
    new = []
    for a, b in zip(bps[:-1], bps[1:]):
        if np.any((offenders >= a) & (offenders <= b)):
            new.append(0.5 * (a + b))
    if not new:
        return kv
    return refine_knots(kv, new)


def fit_curve_adaptive(points, params, kv: KnotVector, threshold: float,
                       lam_reg: float | None = None,
                       max_spans: int = 512, pins=None) -> FitResult:
    """Repeated fit/adapt loop until max_residual <= threshold.

    Raises FitConvergenceError (carrying the best fit) if the span budget is
    exhausted first.
    """
    best = None
    while True:
        fit = fit_curve(points, params, kv, lam_reg, pins=pins)
        if best is None or fit.max_residual < best.max_residual:
            best = fit
        if fit.max_residual <= threshold:
            return fit
        refined = adapt_knots(fit, threshold)
        if refined.n_elements > max_spans:
            raise FitConvergenceError(
                f"adaptive fit exceeded {max_spans} spans at residual "
                f"{best.max_residual:.3e} (threshold {threshold:.3e})",
                best_fit=best)
        if refined is kv or refined.n == kv.n:
            raise FitConvergenceError(
                "adaptive fit stalled without reaching the threshold",
                best_fit=best)
        kv = refined


# ---------------------------------------------------------------------------
# reparameterization functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ReparamFunction:
    """Monotone piecewise-linear map [0,1] -> [0,1] given by breakpoints."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
            raise MatchingError("breakpoint arrays must be equal-length 1d")
        if abs(x[0]) > 1e-12 or abs(x[-1] - 1) > 1e-12 \
                or abs(y[0]) > 1e-12 or abs(y[-1] - 1) > 1e-12:
            raise MatchingError("reparameterization must map 0->0 and 1->1")
        if np.any(np.diff(x) <= 0) or np.any(np.diff(y) <= 0):
            raise MatchingError("breakpoints must be strictly increasing")
        x = x.copy()
        y = y.copy()
        x[0] = 0.0
        x[-1] = 1.0
        y[0] = 0.0
        y[-1] = 1.0
        for a in (x, y):
            a.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __call__(self, t):
        return np.interp(t, self.x, self.y)

    def inverse(self) -> "ReparamFunction":
        return ReparamFunction(self.y, self.x)

    @staticmethod
    def identity() -> "ReparamFunction":
        return ReparamFunction(np.array([0.0, 1.0]), np.array([0.0, 1.0]))


def _dedupe_breakpoints(x, y):
    """Sort and strictly monotonize matched breakpoint pairs."""
    order = np.argsort(x)
    x, y = np.asarray(x, float)[order], np.asarray(y, float)[order]
    keep_x, keep_y = [x[0]], [y[0]]
    for xi, yi in zip(x[1:], y[1:]):
        if xi - keep_x[-1] > 1e-12 and yi - keep_y[-1] > 1e-12:
            keep_x.append(xi)
            keep_y.append(yi)
    # endpoints are anchored by construction; force them exactly
    keep_x[0], keep_y[0] = 0.0, 0.0
    if abs(keep_x[-1] - 1) > 1e-12 or abs(keep_y[-1] - 1) > 1e-12:
        keep_x.append(1.0)
        keep_y.append(1.0)
    else:
        keep_x[-1], keep_y[-1] = 1.0, 1.0
    return np.array(keep_x), np.array(keep_y)


def _hierarchical_pairs(dist):
    """Matched index pairs by recursive closest-pair bisection.

    The globally closest pair splits both index ranges; recursion continues
    on each side and stops on segments of <= 2 points.  Pairs are monotone
    by construction.
    """
    na, nb = dist.shape
    pairs = [(0, 0), (na - 1, nb - 1)]
    stack = [(0, na - 1, 0, nb - 1)]
    while stack:
        a0, a1, b0, b1 = stack.pop()
        if a1 - a0 < 2 or b1 - b0 < 2:
            continue
        sub = dist[a0 + 1:a1, b0 + 1:b1]
        i, j = np.unravel_index(np.argmin(sub), sub.shape)
        ia, jb = a0 + 1 + i, b0 + 1 + j
        pairs.append((ia, jb))
        stack.append((a0, ia, b0, jb))
        stack.append((ia, a1, jb, b1))
    return sorted(pairs)


def match_points(cloud_a, cloud_b, mode: str = "one_side_fixed"):
    """Match two consistently ordered open clouds by hierarchical
    closest-pair bisection and return reparameterization function(s).

    one_side_fixed: cloud_a keeps its chord-length parameterization; the
    returned function maps cloud_b chord parameters to the parameters of the
    matched cloud_a points.

    both_float: matched pairs receive the average of their chord parameters;
    returns the pair (f_a, f_b) mapping each cloud's chord parameter to the
    common value.
    """
    a = np.asarray(cloud_a, dtype=float)
    b = np.asarray(cloud_b, dtype=float)
    ta = chord_length_params(a)
    tb = chord_length_params(b)
    # reversed-orientation input would force crossing matches; detect it from
    # the endpoint correspondence before committing to the recursion
    d_fwd = np.linalg.norm(a[0] - b[0]) + np.linalg.norm(a[-1] - b[-1])
    d_rev = np.linalg.norm(a[0] - b[-1]) + np.linalg.norm(a[-1] - b[0])
    if d_rev < 0.5 * d_fwd:
        raise MatchingError("clouds appear oppositely oriented (crossing matches)")
    dist = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
    pairs = _hierarchical_pairs(dist)

    ia = np.array([p[0] for p in pairs])
    jb = np.array([p[1] for p in pairs])
    if mode == "one_side_fixed":
        x, y = _dedupe_breakpoints(tb[jb], ta[ia])
        return ReparamFunction(x, y)
    if mode == "both_float":
        avg = 0.5 * (ta[ia] + tb[jb])
        xa, ya = _dedupe_breakpoints(ta[ia], avg)
        xb, yb = _dedupe_breakpoints(tb[jb], avg)
        return ReparamFunction(xa, ya), ReparamFunction(xb, yb)
    raise MatchingError(f"unknown matching mode {mode!r}")


def shift_reparam(f: ReparamFunction, theta: float, period: float) -> ReparamFunction:
    """Periodic shift of a closed-loop reparameterization.

    Treats f as a circle map (0 and 1 identified), shifts the breakpoints by
    theta/period modulo 1 in the domain coordinate and re-normalizes so that
    0 maps to 0 again.
    """
    s = (theta / period) % 1.0
    if s < 1e-15 or s > 1 - 1e-15:
        return f
    f_at = float(f(s))
    # extend f to a circle map F with F(t + 1) = F(t) + 1 and place kinks of
    # the shifted map G(t) = F(t + s) - F(s); the winding offset follows the
    # domain wrap, which by monotonicity keeps y aligned with x
    xs = f.x - s
    ys = f.y - f_at
    wrap = xs < -1e-15
    xs = xs + wrap
    ys = ys + wrap
    order = np.argsort(xs)
    xs, ys = xs[order], ys[order]
    keep = (xs > 1e-12) & (xs < 1 - 1e-12)
    # (0, 0) and (1, 1) lie exactly on the shifted polyline, so adding them
    # as anchors does not change the function
    xs = np.concatenate([[0.0], xs[keep], [1.0]])
    ys = np.concatenate([[0.0], ys[keep], [1.0]])
    xs, ys = _dedupe_breakpoints(xs, ys)
    return ReparamFunction(xs, ys)


def blend_reparams(samples, theta: float) -> ReparamFunction:
    """Breakpoint-wise linear blend of the two reparameterizations bracketing
    ``theta``; exact at the sample angles themselves.

    ``samples`` is a sequence of (theta_i, ReparamFunction) sorted by angle.
    """
    angles = np.array([s[0] for s in samples], dtype=float)
    if len(samples) == 0:
        raise MatchingError("no reparameterization samples")
    if theta <= angles[0]:
        return samples[0][1]
    if theta >= angles[-1]:
        return samples[-1][1]
    k = int(np.searchsorted(angles, theta, side="right")) - 1
    t0, f0 = samples[k]
    t1, f1 = samples[k + 1]
    if abs(theta - t0) < 1e-14:
        return f0
    if abs(theta - t1) < 1e-14:
        return f1
    w = (theta - t0) / (t1 - t0)
    x = np.union1d(f0.x, f1.x)
    y = (1 - w) * f0(x) + w * f1(x)
    return ReparamFunction(x, y)
