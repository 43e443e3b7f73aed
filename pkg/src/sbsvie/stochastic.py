"""Time grids, truncated Q-Wiener paths, random fields and the M[t, T] norm.

The Hilbert spaces are truncated to ``R^n`` (state) and ``R^d`` (noise) with a
diagonal covariance ``lambda``.  Hilbert-Schmidt norms of ``n x d`` matrices
are weighted by ``lambda``: ``|phi|^2 = sum_k lambda_k |phi[:, k]|^2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from ._io import write_csv
from ._validation import check_positive_int
from .kernel import FractionalOrder
from .modulus import ModulusRho


@dataclass(frozen=True, eq=False)
class TimeGrid:
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2:
            raise ValueError("a time grid needs at least two nodes")
        if nodes[0] != 0.0:
            raise ValueError(f"first node must be 0, got {nodes[0]}")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("grid nodes must be strictly increasing")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def uniform(cls, T: float, N: int) -> "TimeGrid":
        N = check_positive_int(N, "N")
        return cls(np.linspace(0.0, float(T), N + 1))

    @classmethod
    def graded(cls, T: float, N: int, gamma: float = 2.0) -> "TimeGrid":
        """Nodes ``T (j/N)**gamma`` clustered at 0 (global grading)."""
        N = check_positive_int(N, "N")
        if gamma < 1:
            raise ValueError("grading exponent must be >= 1")
        return cls(float(T) * (np.arange(N + 1) / N) ** gamma)

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def N(self) -> int:
        return self.nodes.size - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.nodes)

    def trapezoid_weights(self, start: int = 0) -> np.ndarray:
        """Trapezoid weights on nodes ``start..N`` (zeros before ``start``)."""
        w = np.zeros(self.N + 1)
        h = self.steps[start:]
        w[start:-1] += h / 2
        w[start + 1:] += h / 2
        return w

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.nodes, other.nodes)

    def __hash__(self):
        return hash(self.nodes.tobytes())


@dataclass(frozen=True, eq=False)
class WienerSpec:
    lam: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.array(self.lam, dtype=float))
        if lam.ndim != 1 or lam.size < 1:
            raise ValueError("lambda must be a nonempty 1-d sequence")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("covariance eigenvalues must be finite and >= 0")
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)

    @property
    def d(self) -> int:
        return self.lam.size

    @property
    def trace(self) -> float:
        return float(self.lam.sum())

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.lam > 0)


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    grid: TimeGrid
    spec: WienerSpec
    increments: np.ndarray
    seed: int

    @property
    def M(self) -> int:
        return self.increments.shape[0]

    @property
    def d(self) -> int:
        return self.spec.d

    @cached_property
    def W(self) -> np.ndarray:
        """Cumulative paths, shape ``(M, N + 1, d)`` with ``W[:, 0] = 0``."""
        W = np.zeros((self.M, self.grid.N + 1, self.d))
        np.cumsum(self.increments, axis=1, out=W[:, 1:])
        W.setflags(write=False)
        return W

    def export_csv(self, path):
        M, N, d = self.increments.shape
        rows = (
            (m, i, k, self.increments[m, i, k])
            for m in range(M)
            for i in range(N)
            for k in range(d)
        )
        return write_csv(path, ("path", "interval", "component", "increment"), rows)


def generate_paths(grid: TimeGrid, spec: WienerSpec, M: int, seed: int) -> PathEnsemble:
    """Simulate ``M`` truncated Q-Wiener paths; deterministic in ``seed``."""
    M = check_positive_int(M, "M")
    rng = np.random.Generator(np.random.Philox(int(seed)))
    z = rng.standard_normal((M, grid.N, spec.d))
    scale = np.sqrt(spec.lam[None, None, :] * grid.steps[None, :, None])
    increments = z * scale
    increments.setflags(write=False)
    return PathEnsemble(grid, spec, increments, int(seed))


def deterministic_ensemble(grid: TimeGrid, d: int = 1) -> PathEnsemble:
    """Single zero path (all ``lambda_k = 0``): the equation becomes deterministic."""
    return generate_paths(grid, WienerSpec(np.zeros(d)), 1, 0)


def cumulative_path(ensemble: PathEnsemble, m: int, i: int) -> np.ndarray:
    return np.asarray(ensemble.W[m, i]).copy()


def hs_norm_sq(values, lam) -> np.ndarray:
    """lambda-weighted squared Frobenius norm over the trailing ``(n, d)`` axes."""
    values = np.asarray(values, dtype=float)
    return np.einsum("...ak,k->...", values * values, np.asarray(lam, dtype=float))


@dataclass(frozen=True, eq=False)
class AdaptedProcess:
    """``values[m, i]``: the state x(t_i) on path m, shape ``(M, N + 1, n)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[..., None]
        if v.ndim != 3:
            raise ValueError(f"adapted process must be (M, N+1, n), got {v.shape}")
        object.__setattr__(self, "values", v)

    def scaled(self, kappa: float) -> "AdaptedProcess":
        return AdaptedProcess(kappa * self.values)


@dataclass(frozen=True, eq=False)
class TwoParamField:
    """``values[m, i, j]`` for ``j > i``: value on the cell ``(s_{j-1}, s_j]`` of y(t_i, .).

    The entry is measurable at ``s_{j-1}`` (left point); entries with
    ``j <= i`` are outside the domain and held at zero.
    Shape ``(M, N + 1, N + 1, n, d)``.
    """

    values: np.ndarray
    lam: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 5 or v.shape[1] != v.shape[2]:
            raise ValueError(f"two-parameter field must be (M, N+1, N+1, n, d), got {v.shape}")
        lam = np.atleast_1d(np.asarray(self.lam, dtype=float))
        if lam.size != v.shape[-1]:
            raise ValueError("lambda length must match the noise dimension d")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "lam", lam)

    @classmethod
    def zeros(cls, M: int, N: int, n: int, lam) -> "TwoParamField":
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        return cls(np.zeros((M, N + 1, N + 1, n, lam.size)), lam)

    def scaled(self, kappa: float) -> "TwoParamField":
        return TwoParamField(kappa * self.values, self.lam)

    def at_nodes(self) -> np.ndarray:
        """Values aligned with driver evaluation at (t_i, s_j); diagonal borrows j = i + 1."""
        v = self.values.copy()
        N = v.shape[1] - 1
        idx = np.arange(N)
        v[:, idx, idx] = v[:, idx, idx + 1]
        return v


def y_row_energy(y: TwoParamField, grid: TimeGrid) -> np.ndarray:
    """Per-path ``int_{t_i}^T |y(t_i, u)|^2 du`` (exact over cells), shape ``(M, N + 1)``."""
    sq = hs_norm_sq(y.values, y.lam)  # (M, N+1, N+1)
    N = grid.N
    mask = np.triu(np.ones((N + 1, N + 1), dtype=bool), k=1)
    h_right = np.concatenate([[0.0], grid.steps])  # cell ending at node j has width h[j-1]
    return np.einsum("mij,ij->mi", sq, mask * h_right[None, :])


def m_norm_terms(x, y: Optional[TwoParamField], t_index: int, grid: TimeGrid):
    """Per-path contributions ``(sup_{s >= t} |x(s)|^2, int_t^T int_s^T |y(s, u)|^2 du ds)``."""
    xv = x.values if isinstance(x, AdaptedProcess) else np.asarray(x, dtype=float)
    if xv.ndim == 2:
        xv = xv[..., None]
    if xv.shape[0] == 0:
        raise ValueError("empty ensemble")
    sup_part = np.max(np.sum(xv[:, t_index:] ** 2, axis=-1), axis=1)
    if y is None:
        return sup_part, np.zeros_like(sup_part)
    y_part = y_row_energy(y, grid) @ grid.trapezoid_weights(t_index)
    return sup_part, y_part


def empirical_m_norm(x, y: Optional[TwoParamField], t_index: int, grid: TimeGrid) -> float:
    """Monte Carlo estimate of ``|(x, y)|_t^2`` (grid max in place of the sup)."""
    sup_part, y_part = m_norm_terms(x, y, t_index, grid)
    return float(np.mean(sup_part + y_part))


def second_moment(values) -> float:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("second moment of an empty sample")
    if v.ndim == 1:
        v = v[:, None]
    return float(np.mean(np.sum(v * v, axis=tuple(range(1, v.ndim)))))


def bootstrap_se(per_path, n_resamples: int = 200, seed: int = 0) -> float:
    """Path-bootstrap standard error of the mean of ``per_path``."""
    per_path = np.asarray(per_path, dtype=float).ravel()
    M = per_path.size
    if M < 2:
        return 0.0
    rng = np.random.default_rng(seed)
    means = np.empty(n_resamples)
    chunk = max(1, min(n_resamples, 4_000_000 // M))
    for start in range(0, n_resamples, chunk):
        stop = min(n_resamples, start + chunk)
        means[start:stop] = per_path[rng.integers(0, M, (stop - start, M))].mean(axis=1)
    return float(means.std(ddof=1))


Terminal = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    """Data of the nonlinear singular BSVIE.

    ``xi(W)`` maps cumulative paths ``(M, N+1, d)`` to ``(M, n)``.
    ``f(t, s, x, y)`` and ``g(t, s, x)`` must broadcast over leading axes,
    with ``x`` of trailing shape ``(n,)``, ``y`` of ``(n, d)``; they return
    trailing shapes ``(n,)`` and ``(n, d)``.  The times ``t`` and ``s`` arrive
    with trailing singleton axes already attached (``(..., 1)`` for ``f``,
    ``(..., 1, 1)`` for ``g``) so plain arithmetic broadcasts.

    ``driver_depends_on_t=False`` together with ``c = 0`` lets the solver
    evaluate the coefficients once per node instead of once per (t, s) pair.
    """

    alpha: FractionalOrder
    T: float
    n: int
    wiener: WienerSpec
    xi: Terminal
    f: Callable
    g: Callable
    modulus: ModulusRho
    c: float = 0.0
    driver_depends_on_t: bool = True
    name: str = ""

    def __post_init__(self):
        if not isinstance(self.alpha, FractionalOrder):
            object.__setattr__(self, "alpha", FractionalOrder(self.alpha))
        if not isinstance(self.wiener, WienerSpec):
            object.__setattr__(self, "wiener", WienerSpec(self.wiener))
        if self.T <= 0:
            raise ValueError("horizon T must be positive")
        check_positive_int(self.n, "n")
        if self.c < 0:
            raise ValueError("y-Lipschitz constant c must be >= 0")

    @property
    def d(self) -> int:
        return self.wiener.d

    def terminal(self, ensemble: PathEnsemble) -> np.ndarray:
        xi = np.asarray(self.xi(ensemble.W), dtype=float)
        if xi.ndim == 1 and xi.size == ensemble.M:
            xi = xi[:, None]
        return np.array(np.broadcast_to(xi, (ensemble.M, self.n)))
