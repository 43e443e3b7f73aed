"""Shipped problem library.

Each scenario builds a :class:`ProblemSpec` from the run configuration; a few
carry closed forms used as oracles.  Scenarios tagged ``intended_failure``
violate an assumption on purpose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .config import RunConfig
from .kernel import FractionalOrder
from .modulus import ModulusRho
from .stochastic import (
    PathEnsemble,
    ProblemSpec,
    TimeGrid,
    WienerSpec,
    deterministic_ensemble,
    generate_paths,
)

TAGS = ("trivial", "lipschitz", "non_lipschitz", "deterministic", "stochastic", "intended_failure")


def mittag_leffler_x0(lam: float, alpha: float, T: float, tol: float = 1e-17) -> float:
    """``sum_k (lam Gamma(alpha))^k T^{k alpha} / Gamma(k alpha + 1)``."""
    base = lam * math.gamma(alpha) * T**alpha
    if base == 0:
        return 1.0
    sign = math.copysign(1.0, base)
    total, k = 0.0, 0
    while True:
        term = sign**k * math.exp(k * math.log(abs(base)) - math.lgamma(k * alpha + 1))
        total += term
        if k > 5 and abs(term) < tol * max(1.0, abs(total)):
            return total
        k += 1


@dataclass(frozen=True)
class Scenario:
    name: str
    tags: tuple
    build: Callable[[RunConfig], ProblemSpec]
    deterministic: bool = False
    closed_form: Optional[Callable] = None
    description: str = ""

    def problem(self, config: RunConfig) -> ProblemSpec:
        return self.build(config)

    def ensemble(self, config: RunConfig) -> PathEnsemble:
        grid = make_grid(config)
        if self.deterministic:
            return deterministic_ensemble(grid, config.d)
        return generate_paths(grid, WienerSpec(config.lam), config.M, config.seed)

    @property
    def intended_failure(self) -> bool:
        return "intended_failure" in self.tags


def make_grid(config: RunConfig) -> TimeGrid:
    if config.grading == 1.0:
        return TimeGrid.uniform(config.T, config.N)
    return TimeGrid.graded(config.T, config.N, config.grading)


def _zero_g(n: int, d: int):
    return lambda t, s, x: np.zeros(np.broadcast_shapes(np.shape(x)[:-2], np.shape(s)[:-2]) + (n, d))


def _zero_f(n: int):
    return lambda t, s, x, y: np.zeros(np.broadcast_shapes(np.shape(x)[:-1], np.shape(s)[:-1]) + (n,))


def _terminal_sum(W: np.ndarray) -> np.ndarray:
    return W[:, -1, :].sum(axis=1, keepdims=True)


def _spec(config: RunConfig, xi, f, g, modulus, c=0.0, t_dep=False, name=""):
    return ProblemSpec(FractionalOrder(config.alpha), config.T, config.n,
                       WienerSpec(config.lam), xi, f, g, modulus, c, t_dep, name)


def _zero_coefficients(cfg):
    return _spec(cfg, lambda W: np.ones((W.shape[0], cfg.n)), _zero_f(cfg.n), _zero_g(cfg.n, cfg.d),
                 ModulusRho.linear(0.0), name="zero_coefficients")


def _martingale_xi(cfg):
    return _spec(cfg, lambda W: np.repeat(_terminal_sum(W), cfg.n, axis=1), _zero_f(cfg.n),
                 _zero_g(cfg.n, cfg.d), ModulusRho.linear(0.0), name="martingale_xi")


def _martingale_closed_form(cfg, ensemble):
    """``x(t) = sum_k W_k(t)``, ``y(t, s) = -(s - t)^(1 - alpha)`` per noise component."""
    x = np.repeat(ensemble.W.sum(axis=2, keepdims=True), cfg.n, axis=2)
    return {"x": x}


def _deterministic_driver(cfg):
    f = lambda t, s, x, y: np.ones(np.broadcast_shapes(np.shape(x)[:-1], np.shape(s)[:-1]) + (cfg.n,))
    return _spec(cfg, lambda W: np.repeat(_terminal_sum(W), cfg.n, axis=1), f, _zero_g(cfg.n, cfg.d),
                 ModulusRho.linear(0.0), name="deterministic_driver")


def _deterministic_driver_closed_form(cfg, ensemble):
    nodes = ensemble.grid.nodes
    drift = (cfg.T - nodes) ** cfg.alpha / cfg.alpha
    x = ensemble.W.sum(axis=2, keepdims=True) + drift[None, :, None]
    return {"x": np.repeat(x, cfg.n, axis=2)}


ML_RATE = 0.1


def _mittag_leffler(cfg):
    # scalar and noise-free whatever the configured n and lambda
    return ProblemSpec(FractionalOrder(cfg.alpha), cfg.T, 1, WienerSpec(np.zeros(cfg.d)),
                       lambda W: np.ones((W.shape[0], 1)), lambda t, s, x, y: ML_RATE * x,
                       _zero_g(1, cfg.d), ModulusRho.linear(1.0), 0.0, False,
                       "mittag_leffler_lambda0.1")


def _ml_closed_form(cfg, ensemble):
    return {"x0": mittag_leffler_x0(ML_RATE, cfg.alpha, cfg.T)}


def lipschitz_problem(cfg: RunConfig, seed: int = 0, name: str = "lipschitz_random") -> ProblemSpec:
    """Random Lipschitz coefficients with the inner smallness factor kept positive.

    ``f = a (1 + t/2) x + mu mean_k y[:, k] + e``, ``g = (sigma x + sigma0) 1_d / sqrt(d)``.
    """
    rng = np.random.default_rng(seed)
    a = rng.uniform(-0.1, 0.1)
    e = rng.uniform(-0.5, 0.5)
    sigma, sigma0 = rng.uniform(-0.15, 0.15), rng.uniform(-0.3, 0.3)
    lam = np.asarray(cfg.lam)
    mu = rng.uniform(-0.04, 0.04) if lam.min() > 0 else 0.0
    shift = rng.uniform(-0.5, 0.5)
    n, d = cfg.n, cfg.d

    def f(t, s, x, y):
        return a * (1 + 0.5 * t) * x + mu * np.mean(y, axis=-1) + e

    def g(t, s, x):
        return np.broadcast_to((sigma * x + sigma0) / math.sqrt(d), np.shape(x)[:-1] + (d,))

    def xi(W):
        return np.repeat(np.sin(_terminal_sum(W)) + shift, n, axis=1)

    b = 1.05 * max(2 * (1.5 * a) ** 2, sigma**2 * float(lam.max()), 1e-12)
    c = 1.05 * 2 * mu**2 / (d * float(lam.min())) if mu else 0.0
    return _spec(cfg, xi, f, g, ModulusRho.linear(b), c=c, t_dep=True, name=name)


def log_q(x):
    """``x sqrt(1 - ln x^2)`` for ``|x| < 1``, ``sign(x)`` beyond."""
    x = np.asarray(x, dtype=float)
    inside = np.abs(x) < 1
    safe = np.where(inside & (x != 0), x, 0.5)
    body = np.where(x != 0, safe * np.sqrt(1 - np.log(safe**2)), 0.0)
    return np.where(inside, body, np.sign(x))


def _log_modulus(cfg):
    n, d = cfg.n, cfg.d

    def f(t, s, x, y):
        return 0.5 * log_q(x)

    def g(t, s, x):
        return np.broadcast_to(0.2 * log_q(x) / math.sqrt(d), np.shape(x)[:-1] + (d,))

    def xi(W):
        return np.repeat(np.tanh(_terminal_sum(W)), n, axis=1)

    return _spec(cfg, xi, f, g, ModulusRho.log(), name="log_modulus")


def _h11_violation(cfg):
    n = cfg.n
    return _spec(cfg, lambda W: np.repeat(_terminal_sum(W), n, axis=1),
                 lambda t, s, x, y: 0.1 * x + np.mean(y, axis=-1), _zero_g(n, cfg.d),
                 ModulusRho.linear(0.021), c=2.1 / min(cfg.lam) if min(cfg.lam) > 0 else 2.1,
                 t_dep=True, name="h11_violation")


def _h3_violation(cfg):
    b = 1.0
    return _spec(cfg, lambda W: np.ones((W.shape[0], cfg.n)),
                 lambda t, s, x, y: math.sqrt(2 * b) * x, _zero_g(cfg.n, cfg.d),
                 ModulusRho.linear(b), name="h3_violation")


SCENARIOS = (
    Scenario("zero_coefficients", ("trivial", "stochastic"), _zero_coefficients,
             description="f = g = 0, xi = 1"),
    Scenario("martingale_xi", ("trivial", "stochastic"), _martingale_xi,
             closed_form=_martingale_closed_form, description="f = g = 0, xi = W(T)"),
    Scenario("deterministic_driver", ("trivial", "stochastic"), _deterministic_driver,
             closed_form=_deterministic_driver_closed_form, description="f = 1, g = 0, xi = W(T)"),
    Scenario("mittag_leffler_lambda0.1", ("lipschitz", "deterministic"), _mittag_leffler,
             deterministic=True, closed_form=_ml_closed_form,
             description="x(t) = 1 + 0.1 int k x, noise switched off"),
    Scenario("lipschitz_random", ("lipschitz", "stochastic"), lambda cfg: lipschitz_problem(cfg, cfg.seed),
             description="random Lipschitz f, g with small y-dependence"),
    Scenario("log_modulus", ("non_lipschitz", "stochastic"), _log_modulus,
             description="f = q(x)/2 with modulus u(1 - ln u)"),
    Scenario("h11_violation", ("lipschitz", "stochastic", "intended_failure"), _h11_violation,
             description="y-coefficient too large for the smallness condition"),
    Scenario("h3_violation", ("lipschitz", "stochastic", "intended_failure"), _h3_violation,
             description="|df|^2 = 2b|dx|^2 against rho(u) = b u"),
)


def list_scenarios(tag: Optional[str] = None) -> list:
    return [s for s in SCENARIOS if tag is None or tag in s.tags]


def get_scenario(name: str) -> Scenario:
    for s in SCENARIOS:
        if s.name == name:
            return s
    raise KeyError(f"unknown scenario {name!r}; choose from {[s.name for s in SCENARIOS]}")
