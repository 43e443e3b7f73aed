"""Picard approximation for the nonlinear singular BSVIE.

Iterate ``j`` solves a linear equation whose driver is
``f(t, s, x_{j-1}(s), y_j(t, s))`` and whose diffusion coefficient is
``g(t, s, x_{j-1}(s))``.  Because ``y_j`` appears inside its own driver, each
outer step runs an inner fixed-point loop over ``y``.  The module also holds
the assumption checks, the constants that control the a-priori growth of the
iterates, the iterate-bound audits and the comparison sequences ``phi_j``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._io import write_csv, write_json
from ._validation import check_nonnegative, check_positive_int
from .condexp import LevelRegression, RegressionBasis, martingale_representation
from .linear import LinearData, LinearSolution, audit_inequality, linear_residual_paths, solve_linear
from .modulus import ModulusRho
from .stochastic import (
    AdaptedProcess,
    PathEnsemble,
    ProblemSpec,
    TimeGrid,
    TwoParamField,
    hs_norm_sq,
    y_row_energy,
)


class AssumptionError(ValueError):
    """The problem data violate a standing assumption; no solution is attempted."""


class DivergedError(RuntimeError):
    """The iteration stopped contracting."""


def _big(alpha: float, T: float) -> float:
    return (2 * T) ** (2 * alpha) / (2 * alpha - 1)


def contraction_factors(alpha: float, T: float, c: float) -> dict:
    """The three smallness factors ``1 - k (2T)^{2 alpha} / (2 alpha - 1) c`` (k = 8, 32, 8)."""
    big = _big(alpha, T)
    return {
        "varpi": 1.0 - 8 * big * c,
        "factor32": 1.0 - 32 * big * c,
        "uniqueness": 1.0 - 8 * big * c,
    }


def _node_index(grid: TimeGrid, t: float) -> int:
    i = int(np.argmin(np.abs(grid.nodes - t)))
    if not math.isclose(grid.nodes[i], t, rel_tol=0.0, abs_tol=1e-12 * max(1.0, grid.T)):
        raise ValueError(f"t = {t} is not a grid node")
    return i


# --------------------------------------------------------------------------
# coefficient fields on the grid


def f_field(problem: ProblemSpec, grid: TimeGrid, x: np.ndarray, y_nodes: Optional[np.ndarray],
            rows: Optional[np.ndarray] = None) -> np.ndarray:
    """Driver ``f(t_i, s_j, x(s_j), y(t_i, s_j))`` as ``(M, N+1, N+1, n)`` (or ``(M, N+1, n)``).

    Entries with ``j < i`` and rows outside ``rows`` are zero.  The compact
    single-row form is returned when the driver ignores ``t`` and ``y``.
    """
    M, Np1, n = x.shape
    nodes = grid.nodes
    d = problem.d
    if not _needs_rows(problem):
        s = nodes[None, :, None]
        out = problem.f(np.zeros_like(s), s, x, np.zeros((1, 1, n, d)))
        return np.array(np.broadcast_to(out, (M, Np1, n)), dtype=float)
    rows = np.arange(Np1) if rows is None else rows
    t = nodes[rows][None, :, None, None]
    s = nodes[None, None, :, None]
    ysel = np.zeros((1, 1, 1, n, d)) if y_nodes is None else y_nodes[:, rows]
    out = problem.f(t, s, x[:, None], ysel)
    full = np.zeros((M, Np1, Np1, n))
    full[:, rows] = np.broadcast_to(out, (M, rows.size, Np1, n))
    full *= np.triu(np.ones((Np1, Np1)))[None, :, :, None]
    return full


def g_field(problem: ProblemSpec, grid: TimeGrid, x: np.ndarray,
            rows: Optional[np.ndarray] = None) -> np.ndarray:
    """Diffusion ``g(t_i, s_j, x(s_j))`` as ``(M, N+1, N+1, n, d)`` (or ``(M, N+1, n, d)``)."""
    M, Np1, n = x.shape
    d = problem.d
    nodes = grid.nodes
    if not problem.driver_depends_on_t:
        s = nodes[None, :, None, None]
        out = problem.g(np.zeros_like(s), s, x[..., None])
        return np.array(np.broadcast_to(out, (M, Np1, n, d)), dtype=float)
    rows = np.arange(Np1) if rows is None else rows
    t = nodes[rows][None, :, None, None, None]
    s = nodes[None, None, :, None, None]
    out = problem.g(t, s, x[:, None, :, :, None])
    full = np.zeros((M, Np1, Np1, n, d))
    full[:, rows] = np.broadcast_to(out, (M, rows.size, Np1, n, d))
    full *= np.triu(np.ones((Np1, Np1)))[None, :, :, None, None]
    return full


def _needs_rows(problem: ProblemSpec) -> bool:
    return problem.driver_depends_on_t or problem.c > 0


def _y_at_nodes(y: np.ndarray) -> np.ndarray:
    return TwoParamField(y, np.ones(y.shape[-1])).at_nodes()


# --------------------------------------------------------------------------
# assumptions and constants


@dataclass
class AssumptionReport:
    h1: dict
    h11: dict
    h3: dict
    modulus: dict

    @property
    def ok(self) -> bool:
        return bool(self.h1["ok"] and self.h11["ok"] and self.h3["ok"] and all(self.modulus.values()))

    def failures(self) -> list:
        out = [name for name in ("h1", "h11", "h3") if not getattr(self, name)["ok"]]
        if not all(self.modulus.values()):
            out.append("modulus")
        return out

    def to_dict(self) -> dict:
        return {"ok": self.ok, "h1": self.h1, "h11": self.h11, "h3": self.h3,
                "modulus": self.modulus}


def _zero_argument_energies(problem: ProblemSpec, grid: TimeGrid):
    """``|f(t_i, s_j, 0, 0)|^2`` and ``|g(t_i, s_j, 0)|^2`` on the grid, zero below the diagonal."""
    nodes = grid.nodes
    n, d, lam = problem.n, problem.d, problem.wiener.lam
    Np1 = nodes.size
    tf, sf = nodes[:, None, None], nodes[None, :, None]
    fv = problem.f(tf, sf, np.zeros((1, 1, n)), np.zeros((1, 1, n, d)))
    fv = np.broadcast_to(np.asarray(fv, dtype=float), (Np1, Np1, n))
    gv = problem.g(tf[..., None], sf[..., None], np.zeros((1, 1, n, 1)))
    gv = np.broadcast_to(np.asarray(gv, dtype=float), (Np1, Np1, n, d))
    upper = np.triu(np.ones((Np1, Np1)))
    return np.sum(fv**2, axis=-1) * upper, hs_norm_sq(gv, lam) * upper


def _triangle_integral(values: np.ndarray, grid: TimeGrid, t_index: int) -> float:
    """``int_t^T int_s^T v(s, u) du ds`` by nested trapezoid over node values."""
    inner = np.array([values[i] @ grid.trapezoid_weights(i) for i in range(grid.N + 1)])
    return float(inner @ grid.trapezoid_weights(t_index))


def check_assumptions(problem: ProblemSpec, ensemble: PathEnsemble, sample_count: int = 2000,
                      box: float = 3.0, seed: int = 0) -> AssumptionReport:
    """Empirical check of the moment, smallness and modulus conditions.

    The modulus condition is sampled on ``sample_count`` random tuples in
    ``[-box, box]``; half of them use close pairs (log-uniform separation) so
    behaviour near the diagonal, where a non-Lipschitz modulus matters, is
    exercised.  The worst violating tuple is reported as a witness.
    """
    sample_count = check_positive_int(sample_count, "sample_count")
    grid = ensemble.grid
    alpha = problem.alpha.alpha
    T = grid.T

    fz, gz = _zero_argument_energies(problem, grid)
    xi = problem.terminal(ensemble)
    moments = {
        "xi": float(np.mean(np.sum(xi**2, axis=1))),
        "f_zero": float(fz.max()),
        "g_zero": float(gz.max()),
    }
    h1 = {**moments, "ok": bool(all(np.isfinite(v) for v in moments.values()))}

    factors = contraction_factors(alpha, T, problem.c)
    h11 = {**factors, "ok": bool(factors["varpi"] > 0)}

    rng = np.random.default_rng(seed)
    K, n, d = sample_count, problem.n, problem.d
    lam = problem.wiener.lam
    ts = np.sort(rng.uniform(0.0, T, (K, 2)), axis=1)
    t, s = ts[:, :1], ts[:, 1:]
    x = rng.uniform(-box, box, (K, n))
    y = rng.uniform(-box, box, (K, n, d))
    close = np.arange(K) < K // 2
    direction = rng.standard_normal((K, n))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    step = 10.0 ** rng.uniform(-6, math.log10(box), (K, 1))
    xb = np.where(close[:, None], x + step * direction, rng.uniform(-box, box, (K, n)))
    yb = np.where(close[:, None, None], y + step[..., None] * rng.standard_normal((K, n, d)) / np.sqrt(n * d),
                  rng.uniform(-box, box, (K, n, d)))

    rho = problem.modulus
    dx = np.sum((x - xb) ** 2, axis=1)
    df = np.asarray(problem.f(t, s, x, y), dtype=float) - np.asarray(problem.f(t, s, xb, yb), dtype=float)
    lhs_f = np.sum(np.broadcast_to(df, (K, n)) ** 2, axis=1)
    rhs_f = rho(dx) + problem.c * hs_norm_sq(y - yb, lam)
    tg, sg = t[..., None], s[..., None]
    dg = np.asarray(problem.g(tg, sg, x[..., None]), dtype=float) - np.asarray(problem.g(tg, sg, xb[..., None]), dtype=float)
    lhs_g = hs_norm_sq(np.broadcast_to(dg, (K, n, d)), lam)
    rhs_g = rho(dx)

    def excess(lhs, rhs):
        return lhs - rhs * (1 + 1e-9) - 1e-12

    ex_f, ex_g = excess(lhs_f, rhs_f), excess(lhs_g, rhs_g)
    bad = (ex_f > 0) | (ex_g > 0)
    witness = None
    if bad.any():
        which = "f" if ex_f.max() >= ex_g.max() else "g"
        ex = ex_f if which == "f" else ex_g
        k = int(np.argmax(ex))
        lhs, rhs = (lhs_f, rhs_f) if which == "f" else (lhs_g, rhs_g)
        witness = {
            "coefficient": which,
            "t": float(t[k, 0]), "s": float(s[k, 0]),
            "x": x[k].tolist(), "x_bar": xb[k].tolist(),
            "y": y[k].tolist(), "y_bar": yb[k].tolist(),
            "lhs": float(lhs[k]), "rhs": float(rhs[k]),
        }
    h3 = {"ok": not bool(bad.any()), "samples": K, "violations": int(bad.sum()), "witness": witness}
    return AssumptionReport(h1, h11, h3, rho.check_shape())


@dataclass(frozen=True)
class ConstantsBlock:
    """Growth constants at time ``t``.

    ``C1`` and ``C4`` follow the defining formulas, which carry no terminal
    term; ``C1_xi``/``C4_xi`` add ``(8 + 16 T) E|xi|^2`` and are the ones the
    audits compare against.
    """

    t: float
    T: float
    alpha: float
    C1: float
    C2: float
    C3: float
    C4: float
    varpi: float
    factor32: float
    uniqueness: float
    u_star: float
    C1_xi: float
    C4_xi: float
    T0: float
    steps: int

    def to_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, float) else v) for k, v in asdict(self).items()}


def _safe_exp(v: float) -> float:
    return math.exp(v) if v < 709.0 else math.inf


def c3_at(alpha: float, T: float, t: float) -> float:
    return 16 * _big(alpha, T) + 2 * (T - t)


@dataclass(frozen=True)
class HorizonStep:
    step: float
    T0: float
    steps: int


def compute_T0(block: ConstantsBlock, a: float, b: float) -> HorizonStep:
    """Window length ``2 / (C3 (a/u + 2b))``, ``T0 = max(0, T - step)``, window count.

    ``a/u`` is read as 0 when ``a = 0``.  With ``a > 0``, zero data
    (``u = 0``) leaves the step unconstrained.
    """
    check_nonnegative(a, "a")
    check_nonnegative(b, "b")
    T = block.T
    if (a > 0.0 and block.u_star == 0.0) or (a == 0.0 and b == 0.0):
        return HorizonStep(math.inf, 0.0, 1)
    ratio = 0.0 if a == 0.0 else a / block.u_star
    denom = block.C3 * (ratio + 2 * b)
    step = math.inf if denom == 0.0 else 2.0 / denom
    if step >= T:
        return HorizonStep(step, 0.0, 1)
    return HorizonStep(step, max(0.0, T - step), int(math.ceil(T / step)))


def compute_constants(problem: ProblemSpec, t: float, ensemble: PathEnsemble) -> ConstantsBlock:
    """Constants ``C1..C4``, the smallness factors and the horizon step at time ``t``."""
    alpha = problem.alpha.alpha
    grid = ensemble.grid
    T = grid.T
    factors = contraction_factors(alpha, T, problem.c)
    if factors["varpi"] <= 0:
        raise AssumptionError(
            f"smallness condition 8c(2T)^(2a)/(2a-1) < 1 fails: varpi = {factors['varpi']:.6g}"
        )
    t_index = _node_index(grid, t)
    rho = problem.modulus
    big = _big(alpha, T)
    fz, gz = _zero_argument_energies(problem, grid)
    area = (T - t) ** 2 / 2
    C1 = (16 * big * (2 * _triangle_integral(fz, grid, t_index) + 2 * rho.a * area)
          + 2 * (2 * rho.a * area + 2 * _triangle_integral(gz, grid, t_index)))
    C2 = 4 * rho.b * T * (1 + 36 * T ** (2 * alpha) / (2 * alpha - 1))
    C3 = c3_at(alpha, T, t)
    growth = _safe_exp(C2 * T)
    u_star = C1 * growth if C1 > 0 else 0.0
    C4 = C3 * rho(4 * u_star)
    xi = problem.terminal(ensemble)
    C1_xi = C1 + (8 + 16 * T) * float(np.mean(np.sum(xi**2, axis=1)))
    C4_xi = C3 * rho(4 * C1_xi * growth) if C1_xi > 0 else 0.0
    partial = ConstantsBlock(t, T, alpha, C1, C2, C3, float(C4), factors["varpi"],
                             factors["factor32"], factors["uniqueness"], u_star,
                             C1_xi, float(C4_xi), 0.0, 1)
    hs = compute_T0(partial, rho.a, rho.b)
    return ConstantsBlock(**{**asdict(partial), "T0": hs.T0, "steps": hs.steps})


# --------------------------------------------------------------------------
# the iteration


@dataclass
class PicardConfig:
    max_iter: int = 25
    tol: float = 1e-10
    inner_max: int = 30
    inner_tol: float = 1e-10
    degree: int = 3
    inner_init: str = "previous"
    stepping: str = "auto"

    def __post_init__(self):
        check_positive_int(self.max_iter, "max_iter")
        check_positive_int(self.inner_max, "inner_max")
        if not (self.tol > 0 and self.inner_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.inner_init not in ("previous", "zero"):
            raise ValueError("inner_init must be 'previous' or 'zero'")
        if self.stepping not in ("auto", "off"):
            raise ValueError("stepping must be 'auto' or 'off'")


@dataclass
class IterationRecord:
    j: int
    m_norm_diff: float
    noise_floor: float
    sup_x_sq: float
    y_mass: float
    inner_iterations: int
    residual: float


TRACE_COLUMNS = ("j", "m_norm_diff", "sup_x_sq", "y_mass", "inner_iterations", "residual")


@dataclass
class PicardTrace:
    """Per-iteration diagnostics for one window ``rows`` starting at ``t_index``.

    ``iterates[j]`` keeps the full-grid ``x_j`` (``j = 0`` is the starting
    point) and ``y_energy[j]`` the per-path row energies of ``y_j``.
    """

    t_index: int
    rows: np.ndarray
    records: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    y_energy: list = field(default_factory=list)
    converged: bool = False

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_rows(self):
        return [tuple(getattr(r, c) for c in TRACE_COLUMNS) for r in self.records]

    def to_dict(self) -> dict:
        return {
            "t_index": self.t_index,
            "rows": [int(self.rows[0]), int(self.rows[-1])],
            "converged": self.converged,
            "iterations": [asdict(r) for r in self.records],
        }

    def export_csv(self, path):
        return write_csv(path, TRACE_COLUMNS, self.to_rows())

    def export_json(self, path):
        return write_json(path, self.to_dict())


def _window_m_diff(dx: np.ndarray, dy: TwoParamField, t_index: int, grid: TimeGrid) -> np.ndarray:
    sup = np.max(np.sum(dx[:, t_index:] ** 2, axis=-1), axis=1)
    return sup + y_row_energy(dy, grid) @ grid.trapezoid_weights(t_index)


def _residual_paths(problem, ensemble, x, y, rows, xi) -> np.ndarray:
    grid = ensemble.grid
    F = f_field(problem, grid, x, _y_at_nodes(y), rows)
    G = g_field(problem, grid, x, rows)
    sol = LinearSolution(AdaptedProcess(x), None, TwoParamField(y, ensemble.spec.lam),
                         grid, problem.alpha.alpha, rows)
    return linear_residual_paths(sol, LinearData(xi, F, G), ensemble)


def _run_window(problem: ProblemSpec, ensemble: PathEnsemble, config: PicardConfig,
                rows: np.ndarray, x_state: np.ndarray, y_state: np.ndarray,
                x_start: np.ndarray, regression: LevelRegression, xi: np.ndarray):
    grid = ensemble.grid
    lam = ensemble.spec.lam
    alpha = problem.alpha.alpha
    t_index = int(rows[0])
    uses_y = problem.c > 0
    factors = contraction_factors(alpha, grid.T, problem.c)
    if uses_y and factors["factor32"] <= 0:
        raise DivergedError(
            "inner loop cannot contract: 32c(2T)^(2a)/(2a-1) < 1 fails "
            f"(factor {factors['factor32']:.6g})"
        )

    x_prev = x_state.copy()
    x_prev[:, rows] = x_start[:, rows]
    y_prev = y_state.copy()
    y_prev[:, rows] = 0.0
    trace = PicardTrace(t_index, rows)
    trace.iterates.append(x_prev.copy())
    trace.y_energy.append(y_row_energy(TwoParamField(y_prev, lam), grid))
    M = ensemble.M
    outer = []

    for j in range(1, config.max_iter + 1):
        G = g_field(problem, grid, x_prev, rows)
        y_k = y_prev.copy()
        if config.inner_init == "zero":
            y_k[:, rows] = 0.0
        changes = []
        for k in range(1, config.inner_max + 1):
            F = f_field(problem, grid, x_prev, _y_at_nodes(y_k) if uses_y else None, rows)
            sol = solve_linear(LinearData(xi, F, G), ensemble, alpha, rows=rows,
                               keep_y_tilde=False, regression=regression)
            y_next = y_prev.copy()
            y_next[:, rows] = sol.y.values[:, rows]
            if not uses_y:
                y_k = y_next
                break
            change = float(np.mean(y_row_energy(TwoParamField(y_next - y_k, lam), grid)
                                   @ grid.trapezoid_weights(t_index)))
            y_k = y_next
            changes.append(change)
            if not np.isfinite(change):
                raise DivergedError("inner iterate became non-finite; "
                                    "32c(2T)^(2a)/(2a-1) < 1 is likely violated")
            if change < config.inner_tol:
                break
            if len(changes) >= 4 and changes[-1] > changes[-2] > changes[-3] > changes[-4]:
                raise DivergedError(
                    "inner y-iteration grew for 3 consecutive steps; smallness condition "
                    f"32c(2T)^(2a)/(2a-1) < 1 has factor {factors['factor32']:.6g}"
                )
        x_new = x_prev.copy()
        x_new[:, rows] = sol.x.values[:, rows]
        del sol, F

        diff_paths = _window_m_diff(x_new - x_prev, TwoParamField(y_k - y_prev, lam), t_index, grid)
        diff = float(diff_paths.mean())
        if not np.isfinite(diff):
            raise DivergedError(f"Picard iterate {j} became non-finite")
        floor = 5.0 * float(diff_paths.std(ddof=1)) / math.sqrt(M) if M > 1 else 0.0
        energy = y_row_energy(TwoParamField(y_k, lam), grid)
        sup_x = np.max(np.sum(x_new[:, t_index:] ** 2, axis=-1), axis=1)
        residual = float(np.mean(_residual_paths(problem, ensemble, x_new, y_k, rows, xi)))
        trace.records.append(IterationRecord(
            j, diff, floor, float(sup_x.mean()),
            float(np.mean(energy @ grid.trapezoid_weights(t_index))),
            len(changes) if uses_y else 1, residual,
        ))
        trace.iterates.append(x_new.copy())
        trace.y_energy.append(energy)
        x_prev, y_prev = x_new, y_k
        outer.append(diff if diff > floor else 0.0)
        if len(outer) >= 4 and outer[-1] > outer[-2] > outer[-3] > outer[-4]:
            raise DivergedError(
                f"Picard m-norm change grew for 3 consecutive iterations (now {diff:.3g}); "
                "the declared modulus or y-coefficient c understates the driver"
            )
        if diff < max(config.tol, floor):
            trace.converged = True
            break
    return x_prev, y_prev, trace


def _start_values(problem: ProblemSpec, ensemble: PathEnsemble, degree: int):
    """Terminal value and its conditional expectations ``E{xi | F_{t_i}}`` (the starting iterate)."""
    xi = problem.terminal(ensemble)
    if ensemble.spec.active.size == 0:
        return xi, np.repeat(xi[:, None, :], ensemble.grid.N + 1, axis=1)
    rep = martingale_representation(xi, ensemble, RegressionBasis(degree))
    return xi, rep.conditional


def picard_iterate(problem: ProblemSpec, ensemble: PathEnsemble, config: Optional[PicardConfig] = None,
                   rows=None):
    """Plain Picard iteration on one window (default: the whole grid).

    Returns ``(x, y, trace)``.  Raises :class:`DivergedError` when the inner
    loop cannot contract.
    """
    config = config or PicardConfig()
    grid = ensemble.grid
    N, M = grid.N, ensemble.M
    rows = np.arange(N + 1) if rows is None else np.unique(np.asarray(rows, dtype=int))
    xi, start = _start_values(problem, ensemble, config.degree)
    reg = LevelRegression(ensemble, RegressionBasis(config.degree))
    x_state = start.copy()
    y_state = np.zeros((M, N + 1, N + 1, problem.n, problem.d))
    x, y, trace = _run_window(problem, ensemble, config, rows, x_state, y_state, start, reg, xi)
    return AdaptedProcess(x), TwoParamField(y, ensemble.spec.lam), trace


def stepping_windows(grid: TimeGrid, step: HorizonStep) -> list:
    """Row sets of the windows ``[T - q step, T - (q-1) step]``, latest first; empty ones dropped."""
    if step.steps <= 1 or not math.isfinite(step.step):
        return [np.arange(grid.N + 1)]
    q = np.ceil((grid.T - grid.nodes) / step.step - 1e-12).astype(int)
    q = np.clip(q, 1, step.steps)
    return [np.flatnonzero(q == k) for k in range(1, step.steps + 1) if np.any(q == k)]


def solve_problem(problem: ProblemSpec, ensemble: PathEnsemble, config: Optional[PicardConfig] = None,
                  block: Optional[ConstantsBlock] = None):
    """Picard with horizon stepping: windows are solved from ``T`` backwards, later rows frozen.

    Returns ``(x, y, traces, windows)``.
    """
    config = config or PicardConfig()
    grid = ensemble.grid
    N, M = grid.N, ensemble.M
    if block is None:
        block = compute_constants(problem, 0.0, ensemble)
    if config.stepping == "auto":
        rho = problem.modulus
        windows = stepping_windows(grid, compute_T0(block, rho.a, rho.b))
    else:
        windows = [np.arange(N + 1)]
    xi, start = _start_values(problem, ensemble, config.degree)
    reg = LevelRegression(ensemble, RegressionBasis(config.degree))
    x = start.copy()
    y = np.zeros((M, N + 1, N + 1, problem.n, problem.d))
    traces = []
    for rows in windows:
        x, y, trace = _run_window(problem, ensemble, config, rows, x, y, start, reg, xi)
        traces.append(trace)
    return AdaptedProcess(x), TwoParamField(y, ensemble.spec.lam), traces, windows


def verify_solution(problem: ProblemSpec, solution, ensemble: PathEnsemble, rows=None) -> float:
    """``E max_i |xi + int k f(., x, y) + int k (g(., x) + y) dW - x(t_i)|`` on the grid."""
    x, y = solution
    xv = x.values if isinstance(x, AdaptedProcess) else np.asarray(x, dtype=float)
    yv = y.values if isinstance(y, TwoParamField) else np.asarray(y, dtype=float)
    N = ensemble.grid.N
    rows = np.arange(N + 1) if rows is None else np.unique(np.asarray(rows, dtype=int))
    xi = problem.terminal(ensemble)
    return float(np.mean(_residual_paths(problem, ensemble, xv, yv, rows, xi)))


# --------------------------------------------------------------------------
# audits


def _sup_from(paths_sq: np.ndarray) -> np.ndarray:
    """Running ``max_{r >= s}`` over the node axis of ``(M, N+1)``."""
    return np.maximum.accumulate(paths_sq[:, ::-1], axis=1)[:, ::-1]


def _pair_sup(trace: PicardTrace, j: int, k: int) -> np.ndarray:
    diff = trace.iterates[j + k] - trace.iterates[j]
    return _sup_from(np.sum(diff**2, axis=-1))


def audit_iterate_bounds(trace: PicardTrace, block: ConstantsBlock, t: Optional[float] = None,
                         grid: Optional[TimeGrid] = None) -> dict:
    """Growth bounds of the iterates and the pairwise bound ``C4 (T - t)``.

    Uses the terminal-inclusive constants ``C1_xi``/``C4_xi`` (see
    :class:`ConstantsBlock`).  ``t`` defaults to the window start.
    """
    if len(trace) == 0:
        raise ValueError("empty trace")
    T = block.T
    if grid is None:
        nodes = np.linspace(0.0, T, trace.iterates[0].shape[1])
        grid = TimeGrid(nodes)
    i = trace.t_index if t is None else _node_index(grid, t)
    t = float(grid.nodes[i])
    tail = T - t
    growth = _safe_exp(block.C2 * tail)
    bound_x = block.C1_xi * growth
    bound_y = block.C1_xi * (1 + block.C2 * tail * growth) / block.varpi
    bound_pair = block.C4_xi * tail
    w = grid.trapezoid_weights(i)
    violations = []
    x_rows, y_rows = [], []
    for j in range(1, len(trace.iterates)):
        xv = trace.iterates[j]
        sup = np.max(np.sum(xv[:, i:] ** 2, axis=-1), axis=1)
        a = audit_inequality(sup, bound_x)
        x_rows.append({"j": j, **a.to_dict()})
        if not a.holds:
            violations.append({"bound": "sup_x", "j": j, "lhs": a.lhs, "rhs": a.rhs})
        b = audit_inequality(trace.y_energy[j] @ w, bound_y)
        y_rows.append({"j": j, **b.to_dict()})
        if not b.holds:
            violations.append({"bound": "y_mass", "j": j, "lhs": b.lhs, "rhs": b.rhs})
    pairs = 0
    worst = 0.0
    J = len(trace.iterates) - 1
    for j in range(1, J):
        for k in range(1, J - j + 1):
            lhs = _pair_sup(trace, j, k)[:, i]
            a = audit_inequality(lhs, bound_pair) if bound_pair > 0 else audit_inequality(lhs, 0.0)
            pairs += 1
            if bound_pair > 0:
                worst = max(worst, a.lhs / bound_pair)
            if not a.holds:
                violations.append({"bound": "pair", "j": j, "k": k, "lhs": a.lhs, "rhs": a.rhs})
    return {
        "t": t,
        "bounds": {"sup_x": bound_x, "y_mass": bound_y, "pair": bound_pair},
        "sup_x": x_rows,
        "y_mass": y_rows,
        "pairs_checked": pairs,
        "pair_worst_ratio": worst,
        "violations": violations,
    }


def audit_contraction(trace: PicardTrace, problem: ProblemSpec, grid: TimeGrid,
                      t: Optional[float] = None) -> dict:
    """``phi~_{j,k}(t) <= C3(t) int_t^T rho(phi~_{j-1,k}(s)) ds`` for all recorded pairs.

    ``phi~_{j,k}(s) = E sup_{r >= s} |x_{j+k}(r) - x_j(r)|^2``.
    """
    i = trace.t_index if t is None else _node_index(grid, t)
    t = float(grid.nodes[i])
    C3 = c3_at(problem.alpha.alpha, grid.T, t)
    rho = problem.modulus
    w = grid.trapezoid_weights(i)
    J = len(trace.iterates) - 1
    violations = []
    checked = 0
    for j in range(1, J):
        for k in range(1, J - j + 1):
            lhs = _pair_sup(trace, j, k)[:, i]
            prev = _pair_sup(trace, j - 1, k).mean(axis=0)
            rhs = C3 * float(rho(prev) @ w)
            a = audit_inequality(lhs, rhs)
            checked += 1
            if not a.holds:
                violations.append({"j": j, "k": k, "lhs": a.lhs, "rhs": a.rhs})
    return {"t": t, "C3": C3, "pairs_checked": checked, "violations": violations}


@dataclass
class PhiTable:
    nodes: np.ndarray
    values: np.ndarray  # (j_max, N + 1)
    T0: float
    at_T0: np.ndarray
    monotone_on_T0: bool
    monotone_from: float
    decreasing_at_T0: bool

    def to_dict(self) -> dict:
        return {
            "T0": self.T0,
            "phi_at_T0": self.at_T0.tolist(),
            "monotone_on_T0": self.monotone_on_T0,
            "monotone_from": self.monotone_from,
            "decreasing_at_T0": self.decreasing_at_T0,
        }


def phi_sequences(block: ConstantsBlock, rho: ModulusRho, grid: TimeGrid, j_max: int,
                  use_xi: bool = True) -> PhiTable:
    """Comparison functions ``phi_1 = C4 (T - t)``, ``phi_{j+1} = C3 int_t^T rho(phi_j)``."""
    j_max = check_positive_int(j_max, "j_max")
    nodes, T, N = grid.nodes, grid.T, grid.N
    C4 = block.C4_xi if use_xi else block.C4
    cum = np.zeros((N + 1, N + 1))
    for i in range(N + 1):
        cum[i] = grid.trapezoid_weights(i)
    values = np.zeros((j_max, N + 1))
    with np.errstate(over="ignore", invalid="ignore"):
        values[0] = C4 * (T - nodes)
        for j in range(1, j_max):
            values[j] = block.C3 * (cum @ rho(values[j - 1]))
    values[:, -1] = 0.0
    scale = np.maximum(np.abs(values[:-1]), 1e-300)
    ok_nodes = np.all(values[1:] <= values[:-1] + 1e-12 * scale, axis=0) if j_max > 1 else np.ones(N + 1, bool)
    bad = np.flatnonzero(~ok_nodes)
    monotone_from = float(nodes[bad[-1] + 1]) if bad.size else 0.0
    if bad.size and bad[-1] == N:
        monotone_from = math.inf
    T0 = block.T0
    at_T0 = np.array([np.interp(T0, nodes, v) for v in values])
    in_window = nodes >= T0 - 1e-14
    monotone_on_T0 = bool(np.all(ok_nodes[in_window])) and bool(np.all(np.diff(at_T0) <= 1e-12 * np.abs(at_T0[:-1])))
    decreasing = bool(np.all(np.diff(at_T0) < 0)) if at_T0[0] > 0 else bool(np.all(at_T0 == 0))
    return PhiTable(nodes, values, T0, at_T0, monotone_on_T0, monotone_from, decreasing)


def audit_phi_domination(trace: PicardTrace, phi: PhiTable) -> dict:
    """``phi~_{j,k}(s) <= phi_j(s) (1 + eps)`` for grid nodes ``s >= T0``."""
    nodes = phi.nodes
    idx = np.flatnonzero(nodes >= phi.T0 - 1e-14)
    J = len(trace.iterates) - 1
    violations = []
    checked = 0
    for j in range(1, min(J, phi.values.shape[0] + 1)):
        for k in range(1, J - j + 1):
            sup = _pair_sup(trace, j, k)
            for i in idx:
                a = audit_inequality(sup[:, i], phi.values[j - 1, i])
                checked += 1
                if not a.holds:
                    violations.append({"j": j, "k": k, "t": float(nodes[i]), "lhs": a.lhs, "rhs": a.rhs})
    return {"checked": checked, "violations": violations}


def uniqueness_distance(first, second, ensemble: PathEnsemble, t_index: int = 0) -> dict:
    """M-norm distance of two solutions against 5 combined standard errors."""
    (x1, y1), (x2, y2) = first, second
    grid = ensemble.grid
    dy = TwoParamField(y1.values - y2.values, ensemble.spec.lam)
    paths = _window_m_diff(x1.values - x2.values, dy, t_index, grid)
    M = paths.size
    se = float(paths.std(ddof=1)) / math.sqrt(M) if M > 1 else 0.0
    dist = float(paths.mean())
    return {"distance": dist, "se": se, "holds": bool(dist <= 5 * se + 1e-12)}


# --------------------------------------------------------------------------
# estimator


class PicardSolver(BaseEstimator):
    """Estimator front end: assumption check, constants, stepped Picard iteration.

    Parameters mirror :class:`PicardConfig`; ``check`` runs
    :func:`check_assumptions` before iterating and raises
    :class:`AssumptionError` on failure.
    """

    def __init__(self, degree: int = 3, max_iter: int = 25, tol: float = 1e-10,
                 inner_max: int = 30, inner_tol: float = 1e-10, inner_init: str = "previous",
                 stepping: str = "auto", check: bool = True, sample_count: int = 2000):
        self.degree = degree
        self.max_iter = max_iter
        self.tol = tol
        self.inner_max = inner_max
        self.inner_tol = inner_tol
        self.inner_init = inner_init
        self.stepping = stepping
        self.check = check
        self.sample_count = sample_count

    def _config(self) -> PicardConfig:
        return PicardConfig(self.max_iter, self.tol, self.inner_max, self.inner_tol,
                            self.degree, self.inner_init, self.stepping)

    def fit(self, problem: ProblemSpec, ensemble: PathEnsemble):
        config = self._config()
        if self.check:
            report = check_assumptions(problem, ensemble, self.sample_count)
            self.assumptions_ = report
            if not report.ok:
                raise AssumptionError(f"assumption check failed: {', '.join(report.failures())}")
        self.constants_ = compute_constants(problem, 0.0, ensemble)
        x, y, traces, windows = solve_problem(problem, ensemble, config, self.constants_)
        self.x_, self.y_ = x, y
        self.traces_ = traces
        self.windows_ = windows
        self.converged_ = all(tr.converged for tr in traces)
        self.n_iter_ = max(len(tr) for tr in traces)
        return self

    def predict(self, t_index: int = 0) -> np.ndarray:
        """Per-path ``x(t_i)``."""
        check_is_fitted(self, "x_")
        return self.x_.values[:, t_index]

    def residual(self, problem: ProblemSpec, ensemble: PathEnsemble) -> float:
        check_is_fitted(self, "x_")
        return verify_solution(problem, (self.x_, self.y_), ensemble)
