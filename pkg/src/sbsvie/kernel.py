"""Weakly singular kernel ``(s - t)**(alpha - 1)`` and product integration.

The product rules absorb the singular factor into analytically integrated
cell moments, so that ``sum_j w_j phi(s_j)`` is exact for every ``phi`` that
is piecewise linear on the grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._validation import check_alpha

_SERIES_CUTOFF = 0.25
_SERIES_TERMS = 40


@dataclass(frozen=True)
class FractionalOrder:
    """Order ``alpha`` of the singular kernel, restricted to (1/2, 1)."""

    alpha: float

    def __post_init__(self):
        object.__setattr__(self, "alpha", check_alpha(self.alpha))

    @property
    def square_factor(self) -> float:
        """``1 / (2 alpha - 1)``, finite and positive by construction."""
        return 1.0 / (2.0 * self.alpha - 1.0)

    def __float__(self) -> float:
        return self.alpha


def as_alpha(alpha) -> float:
    if isinstance(alpha, FractionalOrder):
        return alpha.alpha
    return check_alpha(alpha)


@dataclass(frozen=True)
class ProductRule:
    """Weights for nodes ``s_j``, ``j >= left_index``, of one left endpoint."""

    left_index: int
    weights: np.ndarray

    def integrate(self, values) -> float:
        values = np.asarray(values, dtype=float)
        if self.weights.size == 0:
            return 0.0
        return float(self.weights @ values[self.left_index:])

    @property
    def mass(self) -> float:
        return float(self.weights.sum())


def kernel_value(alpha, t, s):
    """Evaluate ``(s - t)**(alpha - 1)``; requires ``s > t`` elementwise."""
    alpha = as_alpha(alpha)
    gap = np.asarray(s, dtype=float) - np.asarray(t, dtype=float)
    if np.any(gap <= 0):
        raise ValueError("kernel (s - t)^(alpha - 1) is undefined for s <= t")
    out = gap ** (alpha - 1.0)
    return float(out) if out.ndim == 0 else out


def _rel_increment(alpha: float, r):
    """``((1 + r)**alpha - 1) / alpha`` without cancellation for small r."""
    return np.expm1(alpha * np.log1p(r)) / alpha


def _first_moment_scaled(alpha: float, r):
    """``int_0^r (1 + w)**(alpha - 1) * w dw`` for r >= 0."""
    r = np.asarray(r, dtype=float)
    out = np.empty_like(r)
    small = r <= _SERIES_CUTOFF
    if np.any(small):
        rs = r[small]
        acc = np.zeros_like(rs)
        coef = 1.0
        power = rs * rs
        for m in range(_SERIES_TERMS):
            acc += coef * power / (m + 2)
            coef *= (alpha - 1.0 - m) / (m + 1)
            power = power * rs
        out[small] = acc
    if np.any(~small):
        rl = r[~small]
        out[~small] = _rel_increment(alpha + 1.0, rl) - _rel_increment(alpha, rl)
    return out


def cell_moments(alpha: float, offset, width):
    """Moments ``int_0^h (o + v)**(alpha-1) v**p dv`` for p = 0, 1.

    ``offset`` is the distance from the kernel's left point to the cell start
    (``o >= 0``) and ``width`` the cell length ``h > 0``.  Arrays broadcast.
    """
    o, h = np.broadcast_arrays(np.asarray(offset, dtype=float), np.asarray(width, dtype=float))
    m0 = np.empty(o.shape)
    m1 = np.empty(o.shape)
    at_left = o <= 0.0
    if np.any(at_left):
        hl = h[at_left]
        m0[at_left] = hl**alpha / alpha
        m1[at_left] = hl ** (alpha + 1.0) / (alpha + 1.0)
    inner = ~at_left
    if np.any(inner):
        oi, hi = o[inner], h[inner]
        r = hi / oi
        m0[inner] = oi**alpha * _rel_increment(alpha, r)
        m1[inner] = oi ** (alpha + 1.0) * _first_moment_scaled(alpha, r)
    return m0, m1


def kernel_moment(alpha, t: float, a: float, b: float, p: int = 0) -> float:
    """``int_a^b (s - t)**(alpha - 1) * (s - a)**p ds`` for p in {0, 1}."""
    alpha = as_alpha(alpha)
    if p not in (0, 1):
        raise ValueError(f"p must be 0 or 1, got {p}")
    if not a < b:
        raise ValueError(f"empty or reversed interval: a={a}, b={b}")
    if a < t:
        raise ValueError(f"interval must start at or after t: a={a} < t={t}")
    m0, m1 = cell_moments(alpha, a - t, b - a)
    return float(m0 if p == 0 else m1)


def _nodes(grid) -> np.ndarray:
    return np.asarray(getattr(grid, "nodes", grid), dtype=float)


def product_weight_matrix(grid, alpha) -> np.ndarray:
    """Upper-triangular matrix ``W[i, j] = int_{t_i}^T k(s - t_i) hat_j(s) ds``.

    Row ``i`` is the product rule anchored at ``t_i``; the last row is empty.
    """
    alpha = as_alpha(alpha)
    s = _nodes(grid)
    n = s.size - 1
    h = np.diff(s)
    offset = s[None, :-1] - s[:, None]  # (rows, cells)
    active = offset >= 0.0
    m0, m1 = cell_moments(alpha, np.where(active, offset, 0.0), np.broadcast_to(h, offset.shape))
    right = np.where(active, m1 / h, 0.0)
    left = np.where(active, m0, 0.0) - right
    weights = np.zeros((n + 1, n + 1))
    weights[:, :-1] += left
    weights[:, 1:] += right
    return weights


def product_weights(grid, alpha, left_index: int) -> ProductRule:
    s = _nodes(grid)
    last = s.size - 1
    if not 0 <= left_index <= last:
        raise IndexError(f"left_index {left_index} outside 0..{last}")
    if left_index == last:
        return ProductRule(left_index, np.zeros(0))
    alpha = as_alpha(alpha)
    sub = s[left_index:]
    h = np.diff(sub)
    m0, m1 = cell_moments(alpha, sub[:-1] - sub[0], h)
    w = np.zeros(sub.size)
    w[:-1] += m0 - m1 / h
    w[1:] += m1 / h
    return ProductRule(left_index, w)


def cell_kernel_average(grid, alpha) -> np.ndarray:
    """``kappa[i, c]``: mean of ``k(s - t_i)`` over cell ``c`` (zero for c < i)."""
    alpha = as_alpha(alpha)
    s = _nodes(grid)
    h = np.diff(s)
    offset = s[None, :-1] - s[:, None]
    active = offset >= 0.0
    m0, _ = cell_moments(alpha, np.where(active, offset, 0.0), np.broadcast_to(h, offset.shape))
    return np.where(active, m0 / h, 0.0)


class SquaredKernelConstant(NamedTuple):
    tight: float
    majorant: float


def squared_kernel_constant(alpha, T: float, t: float) -> SquaredKernelConstant:
    """``int_t^T (r - t)**(2 alpha - 2) dr`` and its majorant ``(2T)**(2 alpha)/(2 alpha - 1)``."""
    alpha = as_alpha(alpha)
    if not 0.0 <= t <= T:
        raise ValueError(f"need 0 <= t <= T, got t={t}, T={T}")
    e = 2.0 * alpha - 1.0
    return SquaredKernelConstant((T - t) ** e / e, (2.0 * T) ** (2.0 * alpha) / e)
