"""Orthogonality control mapping.

A control map is a unit-square self-map s(mu, nu) = (mu, sigma(mu, nu))
that slides grid lines in the eta direction only.  Its scalar field sigma
is spanned by an independent (low-order) tensor basis whose first and last
eta control columns are pinned to 0 and 1; per-column ordering of the
remaining control values with a positive margin is a sufficient linear
condition for bijectivity.  The control values minimize a discrete Riemann
sum of the squared dot product between the composite map's mu- and
nu-derivatives, which maximizes grid orthogonality.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .errors import ConstraintError, DomainError
from .splines import (KnotVector, SplineMap, TensorBasis, basis_ders_nonzero,
                      basis_matrix, greville_abscissae, uniform_knots)

DEFAULT_MARGIN = 1e-3


def default_control_basis(degree: int = 2, n_elements: int = 8) -> TensorBasis:
    return TensorBasis(uniform_knots(degree, n_elements),
                       uniform_knots(degree, n_elements))


@dataclass(frozen=True)
class ControlMap:
    """Unit-square self-map sliding in eta: s(mu, nu) = (mu, sigma(mu, nu))."""

    basis: TensorBasis
    coeffs: np.ndarray  # (n_mu, n_nu) control values of sigma
    margin: float = DEFAULT_MARGIN
    iterations: int = 0

    def __post_init__(self):
        c = np.ascontiguousarray(self.coeffs, dtype=float)
        if c.shape != self.basis.shape:
            raise DomainError("control value grid does not match the basis")
        if np.abs(c[:, 0]).max() > 1e-12 or np.abs(c[:, -1] - 1).max() > 1e-12:
            raise ConstraintError("boundary control rows must be pinned to 0 and 1")
        if np.any(np.diff(c, axis=1) <= 0):
            raise ConstraintError("control values must increase along eta")
        c.flags.writeable = False
        object.__setattr__(self, "coeffs", c)

    def sigma_grid(self, mus, nus, dmu: int = 0, dnu: int = 0) -> np.ndarray:
        """sigma (or its derivative) on the tensor grid mus x nus."""
        Bu = basis_matrix(self.basis.xi, mus, der=dmu)
        Bv = basis_matrix(self.basis.eta, nus, der=dnu)
        return Bu @ self.coeffs @ Bv.T

    def feasible(self, margin: float | None = None) -> bool:
        m = self.margin if margin is None else margin
        return bool(np.all(np.diff(self.coeffs, axis=1) >= m - 1e-9))


def identity_control(basis: TensorBasis, margin: float = DEFAULT_MARGIN) -> ControlMap:
    """sigma(mu, nu) = nu exactly, via Greville control values."""
    g = greville_abscissae(basis.eta)
    coeffs = np.tile(g, (basis.xi.n, 1))
    return ControlMap(basis, coeffs, margin)


# ---------------------------------------------------------------------------
# composite evaluation
# ---------------------------------------------------------------------------

def composite_points(x: SplineMap, s: ControlMap | None, mus, nus) -> np.ndarray:
    """(x o s) on the tensor grid mus x nus; s = None means the identity."""
    mus = np.asarray(mus, dtype=float)
    nus = np.asarray(nus, dtype=float)
    if s is None:
        return x.evaluate_grid(mus, nus)
    sig = np.clip(s.sigma_grid(mus, nus), 0.0, 1.0)
    mu_flat = np.repeat(mus, len(nus))
    pts = x.evaluate(mu_flat, sig.ravel())
    return pts.reshape(len(mus), len(nus), 2)


def composite_jacobian_dets(x: SplineMap, s: ControlMap | None, mus, nus) -> np.ndarray:
    """det of d(x o s) on the tensor grid (chain rule: det J_x * sigma_nu)."""
    mus = np.asarray(mus, dtype=float)
    nus = np.asarray(nus, dtype=float)
    if s is None:
        xu = x.evaluate_grid(mus, nus, 1, 0)
        xv = x.evaluate_grid(mus, nus, 0, 1)
        return xu[..., 0] * xv[..., 1] - xu[..., 1] * xv[..., 0]
    sig = np.clip(s.sigma_grid(mus, nus), 0.0, 1.0)
    sig_nu = s.sigma_grid(mus, nus, 0, 1)
    mu_flat = np.repeat(mus, len(nus))
    xu = x.evaluate(mu_flat, sig.ravel(), 1, 0).reshape(len(mus), len(nus), 2)
    xv = x.evaluate(mu_flat, sig.ravel(), 0, 1).reshape(len(mus), len(nus), 2)
    det_x = xu[..., 0] * xv[..., 1] - xu[..., 1] * xv[..., 0]
    return det_x * sig_nu


def check_composite_folding(x: SplineMap, s: ControlMap | None,
                            n_samples: int) -> list:
    """Cells of the n x n lattice whose corners carry det <= 0."""
    t = np.linspace(0.0, 1.0, n_samples + 1)
    det = composite_jacobian_dets(x, s, t, t)
    bad = np.argwhere(det <= 0.0)
    cells = set()
    for i, j in bad:
        for ci in (i - 1, i):
            for cj in (j - 1, j):
                if 0 <= ci < n_samples and 0 <= cj < n_samples:
                    cells.add((int(ci), int(cj)))
    return sorted(cells)


# ---------------------------------------------------------------------------
# orthogonality cost
# ---------------------------------------------------------------------------

class CostEvaluator:
    """Riemann-sum orthogonality cost with per-column precomputation.

    The sample mu-columns are fixed, so the map's xi-contraction is done
    once; each cost call only evaluates eta-direction splines at the slid
    ordinates.
    """

    def __init__(self, x: SplineMap, basis: TensorBasis, n_cells: int = 64):
        if n_cells < 2 * max(basis.shape):
            raise DomainError("sample grid must be at least twice the control "
                              "resolution")
        self.x = x
        self.basis = basis
        self.n_cells = n_cells
        t = (np.arange(n_cells) + 0.5) / n_cells
        self.mus = t
        self.nus = t
        self.cell_area = 1.0 / (n_cells * n_cells)
        Bx = basis_matrix(x.basis.xi, t, der=0)
        Bxd = basis_matrix(x.basis.xi, t, der=1)
        # eta-spline coefficient stacks per mu-column: x and x_xi
        self.coef_x = np.einsum("ai,ijd->ajd", Bx, x.control_points)
        self.coef_xxi = np.einsum("ai,ijd->ajd", Bxd, x.control_points)
        self.Bmu = basis_matrix(basis.xi, t, der=0)
        self.Bmu_d = basis_matrix(basis.xi, t, der=1)
        self.Bnu = basis_matrix(basis.eta, t, der=0)
        self.Bnu_d = basis_matrix(basis.eta, t, der=1)
        self.eta_kv = x.basis.eta
        self._col = np.repeat(np.arange(n_cells), n_cells)

    def _derivs_at(self, sig):
        """x_xi and x_eta at points (mu_a, sig[a, b]) for all samples."""
        eta = np.clip(sig.ravel(), 0.0, 1.0)
        spans, ders = basis_ders_nonzero(self.eta_kv, eta, 1)
        p = self.eta_kv.degree
        win = spans[:, None] + np.arange(-p, 1)[None, :]
        cx = self.coef_xxi[self._col[:, None], win]   # (M, p+1, 2)
        ce = self.coef_x[self._col[:, None], win]
        x_xi = np.einsum("mj,mjd->md", ders[0], cx)
        x_eta = np.einsum("mj,mjd->md", ders[1], ce)
        n = self.n_cells
        return x_xi.reshape(n, n, 2), x_eta.reshape(n, n, 2)

    def _integrand(self, coeffs, rows=None):
        """Squared-dot integrand per sample; optionally only on the given
        mu-sample rows (eta-direction support never narrows the columns
        enough to be worth slicing separately from the gather)."""
        Bmu = self.Bmu if rows is None else self.Bmu[rows]
        Bmu_d = self.Bmu_d if rows is None else self.Bmu_d[rows]
        col = self._col if rows is None else \
            np.repeat(rows, self.n_cells)
        sig = Bmu @ coeffs @ self.Bnu.T
        sig_mu = Bmu_d @ coeffs @ self.Bnu.T
        sig_nu = Bmu @ coeffs @ self.Bnu_d.T
        eta = np.clip(sig.ravel(), 0.0, 1.0)
        spans, ders = basis_ders_nonzero(self.eta_kv, eta, 1)
        p = self.eta_kv.degree
        win = spans[:, None] + np.arange(-p, 1)[None, :]
        cx = self.coef_xxi[col[:, None], win]
        ce = self.coef_x[col[:, None], win]
        x_xi = np.einsum("mj,mjd->md", ders[0], cx).reshape(sig.shape + (2,))
        x_eta = np.einsum("mj,mjd->md", ders[1], ce).reshape(sig.shape + (2,))
        t_mu = x_xi + sig_mu[..., None] * x_eta
        t_nu = sig_nu[..., None] * x_eta
        dots = np.einsum("abd,abd->ab", t_mu, t_nu)
        return dots * dots

    def cost_of(self, coeffs: np.ndarray) -> float:
        return 0.5 * float(np.sum(self._integrand(coeffs))) * self.cell_area

    def gradient(self, coeffs: np.ndarray, fd_step: float) -> np.ndarray:
        """Central finite-difference gradient over the interior eta columns,
        re-evaluating only the mu-sample rows inside each control value's
        basis support."""
        n_mu, n_nu = self.basis.shape
        base = self._integrand(coeffs)
        row_support = [np.nonzero(self.Bmu[:, i])[0] for i in range(n_mu)]
        g = np.zeros((n_mu, n_nu - 2))
        for i in range(n_mu):
            rows = row_support[i]
            if len(rows) == 0:
                continue
            base_rows = base[rows].sum()
            for j in range(1, n_nu - 1):
                up = coeffs.copy()
                up[i, j] += fd_step
                dn = coeffs.copy()
                dn[i, j] -= fd_step
                f_up = self._integrand(up, rows).sum()
                f_dn = self._integrand(dn, rows).sum()
                g[i, j - 1] = 0.5 * self.cell_area * (f_up - f_dn) / (2 * fd_step)
        return g.ravel()


def orthogonality_cost(x: SplineMap, s: ControlMap, n_cells: int = 64) -> float:
    """0.5 sum over cell centers of (d(x o s)/dmu . d(x o s)/dnu)^2 * area."""
    ev = CostEvaluator(x, s.basis, n_cells)
    return ev.cost_of(s.coeffs)


# ---------------------------------------------------------------------------
# constrained optimization
# ---------------------------------------------------------------------------

def _constraint_matrix(n_mu: int, n_nu: int, margin: float):
    """Linear ordering constraints A z >= b on the free (interior eta
    columns) control values, rows ordered per mu-column."""
    n_free = n_nu - 2
    nz = n_mu * n_free
    A = np.zeros((n_mu * (n_nu - 1), nz))
    b = np.full(n_mu * (n_nu - 1), margin)
    for i in range(n_mu):
        for j in range(n_nu - 1):
            row = i * (n_nu - 1) + j
            # difference c[i, j+1] - c[i, j] with pinned c[i,0]=0, c[i,-1]=1
            if j + 1 <= n_free:
                A[row, i * n_free + j] += 1.0
            else:
                b[row] -= 1.0  # c[i, -1] = 1
            if 1 <= j:
                A[row, i * n_free + j - 1] -= 1.0
    return A, b


def optimize_control(x: SplineMap, init: ControlMap,
                     margin: float = DEFAULT_MARGIN, n_cells: int = 64,
                     fd_step: float = 1e-6, max_iter: int = 200,
                     ftol_rel: float = 1e-8) -> ControlMap:
    """Minimize the orthogonality cost over the sliding control values.

    Sequential quadratic programming (SLSQP) on the interior eta columns
    with the per-column ordering margin as linear inequality constraints;
    the gradient is central finite differences with the given step.  Every
    accepted iterate stays feasible and the returned cost never exceeds the
    initial one.
    """
    if not init.feasible(margin):
        raise ConstraintError("initial control map violates the ordering margin")
    n_mu, n_nu = init.basis.shape
    ev = CostEvaluator(x, init.basis, n_cells)
    A, b = _constraint_matrix(n_mu, n_nu, margin)

    def unpack(z):
        c = np.empty((n_mu, n_nu))
        c[:, 0] = 0.0
        c[:, -1] = 1.0
        c[:, 1:-1] = z.reshape(n_mu, n_nu - 2)
        return c

    def fun(z):
        return ev.cost_of(unpack(z))

    def jac(z):
        return ev.gradient(unpack(z), fd_step)

    z0 = init.coeffs[:, 1:-1].ravel().copy()
    f0 = fun(z0)
    if f0 <= 1e-14:
        return ControlMap(init.basis, init.coeffs, margin, iterations=0)
    cons = [{"type": "ineq", "fun": lambda z: A @ z - b, "jac": lambda z: A}]
    res = minimize(fun, z0, jac=jac, method="SLSQP", constraints=cons,
                   options={"maxiter": max_iter, "ftol": ftol_rel * max(f0, 1e-30)})
    z = res.x
    if fun(z) > f0:
        z = z0  # never return a worse map than the start
    coeffs = unpack(z)
    # repair sub-tolerance constraint drift from the SQP's own feasibility slack
    diffs = np.diff(coeffs, axis=1)
    if diffs.min() < margin - 1e-7:
        raise ConstraintError("optimizer left the feasible region",
                              min_diff=float(diffs.min()))
    for j in range(1, n_nu - 1):
        lo = coeffs[:, j - 1] + max(margin - 1e-7, 1e-12)
        coeffs[:, j] = np.maximum(coeffs[:, j], lo)
    return ControlMap(init.basis, coeffs, margin,
                      iterations=int(res.nit))
