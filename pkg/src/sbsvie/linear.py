"""Linear singular BSVIE solved through its martingale representation.

For data ``(xi, f, g)`` the solution is

    x(t)       = E{xi | F_t} + int_t^T k(s - t) E{f(t, s) | F_t} ds
    ytilde(t,u) = -L(u) - int_u^T k(s - t) K(s, u) ds
    y(t, u)    = ytilde(t, u) / k(u - t) - g(t, u)

with ``k(r) = r**(alpha - 1)``.  ``ytilde`` is the integrand of the combined
stochastic integral ``dw(u)``; dividing by the kernel gives the ``y`` that
enters the equation inside ``k(s - t) [g + y] dw(s)``.  On the grid, ``k`` on
cell ``l`` is replaced by its cell average so the singular first cell is
integrated exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_per_path
from .condexp import LevelRegression, RegressionBasis, martingale_sweep
from .kernel import as_alpha, cell_kernel_average, product_weight_matrix
from .stochastic import (
    AdaptedProcess,
    PathEnsemble,
    TimeGrid,
    TwoParamField,
    bootstrap_se,
    m_norm_terms,
)


def _rows_field(arr, M: int, N: int, trailing: tuple, name: str) -> Optional[np.ndarray]:
    """Normalise a driver to ``(M, R, N + 1) + trailing`` with R in {1, N + 1}."""
    if arr is None:
        return None
    a = np.asarray(arr, dtype=float)
    full = (M, N + 1, N + 1) + trailing
    single = (M, N + 1) + trailing
    if a.shape == full:
        return a
    if a.shape == single:
        return a[:, None]
    if a.shape == (M, 1, N + 1) + trailing:
        return a
    raise ValueError(f"{name} must have shape {full} or {single}, got {a.shape}")


@dataclass(frozen=True, eq=False)
class LinearData:
    """Terminal value and coefficient fields of the linear equation.

    ``f[:, i, j] = f(t_i, s_j)`` and ``g[:, i, j] = g(t_i, s_j)`` for ``j >= i``;
    a length-1 row axis means the field does not depend on t.  ``None`` is zero.
    """

    xi: np.ndarray
    f: Optional[np.ndarray] = None
    g: Optional[np.ndarray] = None

    def normalised(self, ensemble: PathEnsemble) -> "LinearData":
        M, N, d = ensemble.M, ensemble.grid.N, ensemble.d
        xi = check_per_path(self.xi, M, "xi")
        n = xi.shape[1]
        f = _rows_field(self.f, M, N, (n,), "f")
        g = _rows_field(self.g, M, N, (n, d), "g")
        for name, arr in (("f", f), ("g", g)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        return LinearData(xi, f, g)

    def scaled(self, kappa: float) -> "LinearData":
        return LinearData(
            kappa * np.asarray(self.xi),
            None if self.f is None else kappa * np.asarray(self.f),
            None if self.g is None else kappa * np.asarray(self.g),
        )


@dataclass(frozen=True, eq=False)
class LinearSolution:
    x: AdaptedProcess
    y_tilde: Optional[TwoParamField]
    y: TwoParamField
    grid: TimeGrid
    alpha: float
    rows: np.ndarray


def _row_index(field: Optional[np.ndarray], rows: np.ndarray) -> np.ndarray:
    if field is None or field.shape[1] == 1:
        return np.zeros_like(rows)
    return rows


def _cell_values(field: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Node field ``(M, R, N+1, ...)`` -> cell-aligned ``(M, len(rows), N+1, ...)``.

    Cell ``j`` (ending at s_j) takes the left-point value ``field[:, i, j - 1]``.
    """
    sel = field[:, _row_index(field, rows)]
    out = np.zeros_like(sel)
    out[:, :, 1:] = sel[:, :, :-1]
    N = field.shape[2] - 1
    mask = np.arange(N + 1)[None, :] > rows[:, None]
    return out * mask.reshape(mask.shape + (1,) * (out.ndim - 3))[None]


def solve_linear(data: LinearData, ensemble: PathEnsemble, alpha, basis=None,
                 rows=None, keep_y_tilde: bool = True,
                 regression: Optional[LevelRegression] = None) -> LinearSolution:
    """Solve the linear equation on outer rows ``rows`` (default: all).

    ``regression`` may carry cached factorisations from an earlier solve on
    the same ensemble and basis.
    """
    alpha = as_alpha(alpha)
    data = data.normalised(ensemble)
    grid = ensemble.grid
    M, N, d = ensemble.M, grid.N, ensemble.d
    n = data.xi.shape[1]
    rows = np.arange(N + 1) if rows is None else np.unique(np.asarray(rows, dtype=int))
    if rows.size == 0 or rows[0] < 0 or rows[-1] > N:
        raise IndexError("rows must be a nonempty subset of 0..N")
    weights = product_weight_matrix(grid, alpha)
    kappa = cell_kernel_average(grid, alpha)
    reg = regression if regression is not None else LevelRegression(ensemble, basis)
    row_pos = {int(i): a for a, i in enumerate(rows)}

    f = data.f
    if f is None:
        obs, row_start, t_dep = np.zeros((M, 0, N + 1, n)), np.zeros(0, dtype=int), False
    elif f.shape[1] > 1:
        obs, row_start, t_dep = f[:, rows], rows, True
    else:
        obs, row_start, t_dep = f, np.zeros(1, dtype=int), False

    x = np.zeros((M, N + 1, n))
    ytil = np.zeros((M, N + 1, N + 1, n, d))
    for l, cond, alive, K, xi_l, L in martingale_sweep(reg, obs, row_start, xi=data.xi,
                                                       min_level=int(rows[0])):
        if l in row_pos:
            x[:, l] = xi_l
            if f is not None:
                a = row_pos[l] if t_dep else 0
                x[:, l] += np.einsum("j,mjn->mn", weights[l, l:], cond[:, a, l:])
        if l == N:
            continue
        out = rows[rows <= l]
        if out.size == 0:
            continue
        contrib = -np.broadcast_to(L[:, None], (M, out.size, n, d))
        if f is not None:
            w = weights[out, l + 1:]
            if t_dep:
                # alive rows at level l are exactly ``out``, in the same order
                contrib = contrib - np.einsum("ij,mijad->miad", w, K)
            else:
                contrib = contrib - np.einsum("ij,mjad->miad", w, K[:, 0])
        ytil[:, out, l + 1] = contrib

    kap = np.zeros((N + 1, N + 1))
    kap[:, 1:] = kappa
    mask = np.triu(np.ones((N + 1, N + 1), dtype=bool), k=1)
    inv_kap = np.where(mask, 1.0 / np.where(mask, kap, 1.0), 0.0)
    if keep_y_tilde:
        y = ytil * inv_kap[None, :, :, None, None]
    else:
        y = ytil
        y *= inv_kap[None, :, :, None, None]
    if data.g is not None:
        y[:, rows] -= _cell_values(data.g, rows)
    lam = ensemble.spec.lam
    return LinearSolution(
        AdaptedProcess(x),
        TwoParamField(ytil, lam) if keep_y_tilde else None,
        TwoParamField(y, lam),
        grid,
        alpha,
        rows,
    )


def _drift_sum(f: Optional[np.ndarray], weights: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``sum_j W[i, j] f(t_i, s_j)`` for ``i`` in rows, shape ``(M, len(rows), n)``."""
    if f is None:
        return 0.0
    sel = f[:, _row_index(f, rows)]
    return np.einsum("ij,mijn->min", weights[rows], sel)


def _stochastic_sum(g: Optional[np.ndarray], y: np.ndarray, kappa: np.ndarray,
                    increments: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``sum_l kappa[i, l] (g + y)[i, cell l] . dW_l`` for ``i`` in rows."""
    integrand = y[:, rows, 1:]
    if g is not None:
        integrand = integrand + _cell_values(g, rows)[:, :, 1:]
    return np.einsum("il,milad,mld->mia", kappa[rows], integrand, increments)


def linear_residual_paths(sol: LinearSolution, data: LinearData, ensemble: PathEnsemble) -> np.ndarray:
    """Per-path ``max_i |residual of the discretised linear equation at t_i|``."""
    data = data.normalised(ensemble)
    rows = sol.rows
    weights = product_weight_matrix(ensemble.grid, sol.alpha)
    kappa = cell_kernel_average(ensemble.grid, sol.alpha)
    rhs = data.xi[:, None, :] + _drift_sum(data.f, weights, rows)
    rhs = rhs + _stochastic_sum(data.g, sol.y.values, kappa, ensemble.increments, rows)
    res = rhs - sol.x.values[:, rows]
    return np.max(np.sqrt(np.sum(res**2, axis=-1)), axis=1)


def residual_check(sol: LinearSolution, data: LinearData, ensemble: PathEnsemble, alpha=None) -> float:
    """``E max_i |xi + int k f + int k (g + y) dW - x(t_i)|``."""
    if alpha is not None and as_alpha(alpha) != sol.alpha:
        raise ValueError("alpha differs from the one used to solve")
    return float(np.mean(linear_residual_paths(sol, data, ensemble)))


@dataclass(frozen=True)
class BoundAudit:
    lhs: float
    rhs: float
    slack: float
    holds: bool
    eps_mc: float

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "slack": self.slack,
                "holds": self.holds, "eps_mc": self.eps_mc}


def audit_inequality(lhs_paths, rhs_paths, n_resamples: int = 200, seed: int = 0) -> BoundAudit:
    """``E lhs <= E rhs (1 + eps)`` with eps = 5 combined bootstrap SE relative to rhs."""
    lhs_paths = np.asarray(lhs_paths, dtype=float)
    rhs_paths = np.broadcast_to(np.asarray(rhs_paths, dtype=float), lhs_paths.shape)
    lhs, rhs = float(lhs_paths.mean()), float(rhs_paths.mean())
    se = np.hypot(bootstrap_se(lhs_paths, n_resamples, seed), bootstrap_se(rhs_paths, n_resamples, seed + 1))
    eps = 5.0 * se / rhs if rhs > 0 else 0.0
    bound = rhs * (1.0 + eps)
    tol = 1e-12 * max(1.0, abs(rhs))
    return BoundAudit(lhs, rhs, float(bound - lhs), bool(lhs <= bound + tol), float(eps))


def _f_row_energy(f: Optional[np.ndarray], grid: TimeGrid, t_index: int) -> np.ndarray:
    """Per-path ``int_t^T |f(t, r)|^2 dr`` by trapezoid."""
    if f is None:
        return 0.0
    row = f[:, t_index if f.shape[1] > 1 else 0]
    return np.sum(row**2, axis=-1) @ grid.trapezoid_weights(t_index)


def _g_energy(g: Optional[np.ndarray], lam, grid: TimeGrid, t_index: int) -> np.ndarray:
    if g is None:
        return 0.0
    N = grid.N
    cells = _cell_values(g, np.arange(N + 1))
    zero_x = np.zeros((g.shape[0], N + 1, 1))
    return m_norm_terms(zero_x, TwoParamField(cells, lam), t_index, grid)[1]


def apriori_bound_audit(sol: LinearSolution, data: LinearData, t_index: int = 0,
                        ensemble: Optional[PathEnsemble] = None) -> BoundAudit:
    """A-priori estimate of the linear solution in ``M[t, T]``."""
    M = sol.x.values.shape[0]
    grid, alpha = sol.grid, sol.alpha
    if ensemble is not None:
        data = data.normalised(ensemble)
    xi = check_per_path(data.xi, M, "xi")
    T = grid.T
    big = (2 * T) ** (2 * alpha) / (2 * alpha - 1)
    sup_part, y_part = m_norm_terms(sol.x, sol.y, t_index, grid)
    xi_sq = np.sum(xi**2, axis=1)
    rhs = (8 + 16 * T) * xi_sq + 16 * big * _f_row_energy(data.f, grid, t_index)
    rhs = rhs + 2 * _g_energy(data.g, sol.y.lam, grid, t_index)
    return audit_inequality(sup_part + y_part, rhs)


def intermediate_bounds(sol: LinearSolution, data: LinearData, t_index: int = 0) -> dict:
    """Separate audits of the x-estimate and the ytilde-estimate."""
    grid, alpha = sol.grid, sol.alpha
    M = sol.x.values.shape[0]
    xi_sq = np.sum(check_per_path(data.xi, M, "xi") ** 2, axis=1)
    T = grid.T
    big = (2 * T) ** (2 * alpha) / (2 * alpha - 1)
    f_energy = _f_row_energy(data.f, grid, t_index)
    sup_part, _ = m_norm_terms(sol.x, None, t_index, grid)
    out = {"x_sup": audit_inequality(sup_part, 8 * xi_sq + 8 * big * f_energy)}
    if sol.y_tilde is not None:
        _, ytil_part = m_norm_terms(sol.x, sol.y_tilde, t_index, grid)
        out["y_tilde"] = audit_inequality(ytil_part, 8 * T * xi_sq + 4 * big * f_energy)
    return out


class LinearBSVIESolver(BaseEstimator):
    """Estimator wrapper around :func:`solve_linear`.

    Parameters
    ----------
    alpha : float
        Kernel order in (1/2, 1).
    degree : int
        Polynomial degree of the regression basis.
    keep_y_tilde : bool
        Store the ``dw``-integrand next to ``y`` (doubles the memory of the field).
    """

    def __init__(self, alpha: float = 0.75, degree: int = 3, keep_y_tilde: bool = True):
        self.alpha = alpha
        self.degree = degree
        self.keep_y_tilde = keep_y_tilde

    def fit(self, ensemble: PathEnsemble, data: LinearData, rows=None):
        self.solution_ = solve_linear(data, ensemble, self.alpha, RegressionBasis(self.degree),
                                      rows=rows, keep_y_tilde=self.keep_y_tilde)
        self.x_ = self.solution_.x.values
        self.y_ = self.solution_.y.values
        return self

    def residual(self, ensemble: PathEnsemble, data: LinearData) -> float:
        check_is_fitted(self, "solution_")
        return residual_check(self.solution_, data, ensemble)

    def audit(self, data: LinearData, t_index: int = 0) -> BoundAudit:
        check_is_fitted(self, "solution_")
        return apriori_bound_audit(self.solution_, data, t_index)
