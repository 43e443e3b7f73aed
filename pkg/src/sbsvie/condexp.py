"""Regression estimates of ``E{. | F_t}`` and numerical martingale representation.

Conditional expectations are least-squares projections onto monomials of the
current Wiener state ``W(t_i)`` (Longstaff-Schwartz style).  Martingale
integrands ``L``/``K`` come from regressing one-step martingale increments on
``basis(W(t_i)) * dW_i``, so the fitted slope against ``dW_k`` is the integrand
component ``k`` directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.preprocessing import PolynomialFeatures
from sklearn.utils.validation import check_is_fitted

from ._validation import check_per_path
from .stochastic import PathEnsemble, hs_norm_sq

RANK_TOL = 1e-10


@dataclass(frozen=True)
class RegressionBasis:
    degree: int = 3

    def __post_init__(self):
        if isinstance(self.degree, bool) or int(self.degree) != self.degree or self.degree < 0:
            raise ValueError(f"basis degree must be an integer >= 0, got {self.degree}")

    def size(self, d: int) -> int:
        return comb(d + self.degree, self.degree)


def _as_basis(basis) -> RegressionBasis:
    if basis is None:
        return RegressionBasis()
    if isinstance(basis, RegressionBasis):
        return basis
    return RegressionBasis(int(basis))


def polynomial_design(Z: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of the columns of ``Z`` up to total ``degree`` (constant first)."""
    M = Z.shape[0]
    if Z.shape[1] == 0 or degree == 0:
        return np.ones((M, 1))
    return PolynomialFeatures(degree, include_bias=True).fit_transform(Z)


def _full_rank_qr(X: np.ndarray):
    if X.shape[0] < X.shape[1]:
        return None
    Q, R = np.linalg.qr(X)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag.min() <= RANK_TOL * diag.max():
        return None
    return Q, R


class PolynomialConditionalMean(RegressorMixin, BaseEstimator):
    """Least-squares regression on monomials, lowering the degree on rank loss.

    Degree 0 always succeeds (the sample mean).
    """

    def __init__(self, degree: int = 3):
        self.degree = degree

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        Y = np.asarray(y, dtype=float)
        squeeze = Y.ndim == 1
        Y = Y[:, None] if squeeze else Y
        for deg in range(int(self.degree), -1, -1):
            design = polynomial_design(X, deg)
            fact = _full_rank_qr(design)
            if fact is not None:
                break
        else:  # pragma: no cover - degree 0 with M >= 1 is always full rank
            raise np.linalg.LinAlgError("regression failed even at degree 0")
        Q, R = fact
        self.coef_ = np.linalg.solve(R, Q.T @ Y)
        self.degree_ = deg
        self.n_features_in_ = X.shape[1]
        self._squeeze = squeeze
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        out = polynomial_design(X, self.degree_) @ self.coef_
        return out[:, 0] if self._squeeze else out


def state_features(ensemble: PathEnsemble, i: int) -> np.ndarray:
    """Standardised active components ``W_k(t_i) / sqrt(lambda_k t_i)``."""
    t = ensemble.grid.nodes[i]
    active = ensemble.spec.active
    if t == 0.0 or active.size == 0:
        return np.zeros((ensemble.M, 0))
    scale = np.sqrt(ensemble.spec.lam[active] * t)
    return ensemble.W[:, i, active] / scale


class LevelRegression:
    """Cached per-level factorisations for projections and increment regressions."""

    def __init__(self, ensemble: PathEnsemble, basis=None):
        self.ensemble = ensemble
        self.basis = _as_basis(basis)
        self._proj = {}
        self._inc = {}

    def _projection_factor(self, l: int):
        if l not in self._proj:
            Z = state_features(self.ensemble, l)
            top = self.basis.degree if Z.shape[1] else 0
            for deg in range(top, -1, -1):
                fact = _full_rank_qr(polynomial_design(Z, deg))
                if fact is not None:
                    self._proj[l] = (fact[0], deg)
                    break
        return self._proj[l]

    def degree_at(self, l: int) -> int:
        return self._projection_factor(l)[1]

    def project(self, l: int, V: np.ndarray) -> np.ndarray:
        """Fitted values of the regression of each column of ``V`` on basis(W(t_l))."""
        Q, _ = self._projection_factor(l)
        return Q @ (Q.T @ V)

    def _increment_factor(self, l: int):
        if l not in self._inc:
            ens = self.ensemble
            active = ens.spec.active
            if active.size == 0:
                self._inc[l] = None
                return None
            Z = state_features(ens, l)
            dW = ens.increments[:, l, active]
            M = ens.M
            for deg in range(self.basis.degree, -1, -1):
                psi = polynomial_design(Z, deg)
                X = (psi[:, :, None] * dW[:, None, :]).reshape(M, -1)
                fact = _full_rank_qr(X)
                if fact is not None:
                    Q, R = fact
                    self._inc[l] = (Q, np.linalg.inv(R), psi)
                    break
            else:
                self._inc[l] = None
        return self._inc[l]

    def integrand(self, l: int, D: np.ndarray) -> np.ndarray:
        """Integrand ``Z`` on interval ``l`` with ``D ~ Z . dW_l``; shape ``(M, q, d)``."""
        ens = self.ensemble
        M, q = D.shape
        out = np.zeros((M, q, ens.d))
        fact = self._increment_factor(l)
        if fact is None or q == 0:
            return out
        Q, Rinv, psi = fact
        active = ens.spec.active
        coef = Rinv @ (Q.T @ D)  # (p * da, q)
        coef = coef.reshape(psi.shape[1], active.size, q)
        out[:, :, active] = np.einsum("mp,pkq->mqk", psi, coef)
        return out


def condexp(values, ensemble: PathEnsemble, i: int, basis=None) -> np.ndarray:
    """Regression estimate of ``E{values | F_{t_i}}`` per path."""
    V = check_per_path(values, ensemble.M)
    N = ensemble.grid.N
    if not 0 <= i <= N:
        raise IndexError(f"conditioning index {i} outside 0..{N}")
    if i == N:
        return V.copy()
    est = PolynomialConditionalMean(_as_basis(basis).degree)
    est.fit(state_features(ensemble, i), V)
    return est.predict(state_features(ensemble, i))


@dataclass(frozen=True, eq=False)
class MartingaleRep:
    """``values ~ mean + sum_i integrand[:, i] . dW_i``.

    ``conditional[:, i]`` holds the fitted martingale ``E{values | F_{t_i}}``.
    """

    mean: np.ndarray
    integrand: np.ndarray
    conditional: np.ndarray


def martingale_sweep(reg: LevelRegression, obs: np.ndarray, row_start: np.ndarray,
                     xi: np.ndarray | None = None, min_level: int = 0):
    """Backward induction over levels ``l = N .. min_level``.

    ``obs[:, r, j]`` is an ``F_{s_j}``-measurable observation, valid for
    ``j >= row_start[r]``.  Yields ``(l, cond, alive, K, xi_cond, L)`` where
    ``cond[:, r, j]`` equals ``E{obs[:, r, j] | F_{t_l}}`` for ``j >= l`` and
    ``K[:, a, j - l - 1]`` is the integrand on interval ``l`` for alive row
    ``a`` and ``j > l``.  ``L`` is the integrand of ``xi`` on interval ``l``.
    """
    M, R, Np1, n = obs.shape
    N = Np1 - 1
    d = reg.ensemble.d
    cond = np.array(obs, dtype=float, copy=True)
    xi_cond = None if xi is None else np.array(xi, dtype=float, copy=True)
    for l in range(N, min_level - 1, -1):
        alive = np.flatnonzero(row_start <= l)
        K = np.zeros((M, alive.size, N - l, n, d))
        L = np.zeros((M, n, d)) if xi is not None else None
        if l < N:
            if alive.size:
                block = cond[:, alive, l + 1:, :].reshape(M, -1)
                proj = reg.project(l, block)
                K = reg.integrand(l, block - proj).reshape(M, alive.size, N - l, n, d)
                cond[:, alive, l + 1:, :] = proj.reshape(M, alive.size, N - l, n)
            if xi is not None:
                proj = reg.project(l, xi_cond)
                L = reg.integrand(l, xi_cond - proj)
                xi_cond = proj
        yield l, cond, alive, K, xi_cond, L


def martingale_representation(values, ensemble: PathEnsemble, basis=None) -> MartingaleRep:
    """Mean and integrand ``L`` of ``values = E values + int L dW``."""
    V = check_per_path(values, ensemble.M)
    N = ensemble.grid.N
    reg = LevelRegression(ensemble, basis)
    M, n = V.shape
    integrand = np.zeros((M, N, n, ensemble.d))
    conditional = np.zeros((M, N + 1, n))
    empty = np.zeros((M, 0, N + 1, n))
    for l, _, _, _, xi_l, L in martingale_sweep(reg, empty, np.zeros(0, dtype=int), xi=V):
        conditional[:, l] = xi_l
        if l < N:
            integrand[:, l] = L
    mean = conditional[:, 0].mean(axis=0)
    return MartingaleRep(mean, integrand, conditional)


def stochastic_sum(integrand: np.ndarray, increments: np.ndarray) -> np.ndarray:
    """``sum_i integrand[:, i] . dW_i`` for integrand ``(M, N, n, d)``."""
    return np.einsum("mind,mid->mn", integrand, increments)


def representation_residual(rep: MartingaleRep, values, ensemble: PathEnsemble) -> float:
    V = check_per_path(values, ensemble.M)
    recon = rep.mean[None, :] + stochastic_sum(rep.integrand, ensemble.increments)
    return float(np.sqrt(np.mean(np.sum((V - recon) ** 2, axis=1))))


def driver_representation(driver, ensemble: PathEnsemble, basis=None) -> list[MartingaleRep]:
    """Representation of each observation ``driver[:, j]`` (``F_{s_j}``-measurable).

    The integrand of observation ``j`` vanishes on intervals ``l >= j``.
    """
    F = np.asarray(driver, dtype=float)
    if F.ndim == 2:
        F = F[..., None]
    M, Np1, n = F.shape
    N = Np1 - 1
    if M != ensemble.M or N != ensemble.grid.N:
        raise ValueError("driver shape does not match the ensemble")
    reg = LevelRegression(ensemble, basis)
    integrands = np.zeros((N + 1, M, N, n, ensemble.d))
    conditional = np.zeros((N + 1, M, N + 1, n))
    for j in range(N + 1):
        conditional[j, :, j:] = F[:, j][:, None, :]
    for l, cond, _, K, _, _ in martingale_sweep(reg, F[:, None], np.zeros(1, dtype=int)):
        conditional[l:, :, l] = np.moveaxis(cond[:, 0, l:], 1, 0)
        if l < N:
            integrands[l + 1:, :, l] = np.moveaxis(K[:, 0], 1, 0)
    return [
        MartingaleRep(conditional[j, :, 0].mean(axis=0), integrands[j], conditional[j])
        for j in range(N + 1)
    ]


def integrand_energy(rep: MartingaleRep, ensemble: PathEnsemble) -> float:
    """``E sum_i |integrand_i|^2 dt_i`` with the lambda-weighted HS norm."""
    sq = hs_norm_sq(rep.integrand, ensemble.spec.lam)  # (M, N)
    return float(np.mean(sq @ ensemble.grid.steps))
