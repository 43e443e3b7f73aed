"""Concave moduli of continuity ``rho`` used in the non-Lipschitz condition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("affine", "linear", "log")


@dataclass(frozen=True)
class ModulusRho:
    """``rho(u)`` with an affine majorant ``a + b u``.

    ``affine``: ``rho(u) = min(u, 1) * a + b u`` keeps rho(0) = 0 while reaching
    the majorant for u >= 1.  ``linear``: ``rho(u) = b u``.  ``log``:
    ``u (1 - ln u)`` on [0, 1], constant 1 beyond (the slope at u = 1 is 0).
    """

    kind: str = "linear"
    a: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown modulus kind {self.kind!r}; expected one of {KINDS}")
        if self.a < 0 or self.b < 0:
            raise ValueError("modulus parameters a, b must be >= 0")
        if self.kind == "linear" and self.a != 0:
            raise ValueError("linear modulus requires a = 0")
        if self.kind == "log" and (self.a < 1.0):
            raise ValueError("log modulus needs a >= 1 for the affine bound a + b u")

    @classmethod
    def linear(cls, b: float) -> "ModulusRho":
        return cls("linear", 0.0, float(b))

    @classmethod
    def log(cls) -> "ModulusRho":
        return cls("log", 1.0, 0.0)

    def __call__(self, u):
        u = np.maximum(np.asarray(u, dtype=float), 0.0)
        if self.kind == "linear":
            out = self.b * u
        elif self.kind == "affine":
            out = self.a * np.minimum(u, 1.0) + self.b * u
        else:
            with np.errstate(divide="ignore", invalid="ignore"):
                body = np.where(u > 0, u * (1.0 - np.log(np.where(u > 0, u, 1.0))), 0.0)
            out = np.where(u <= 1.0, body, 1.0)
        return float(out) if out.ndim == 0 else out

    def majorant(self, u):
        return self.a + self.b * np.asarray(u, dtype=float)

    def check_shape(self, lattice=None) -> dict:
        """Finite-difference checks: rho(0) = 0, nondecreasing, concave, below a + b u."""
        if lattice is None:
            lattice = np.concatenate([np.linspace(0.0, 2.0, 401), np.geomspace(2.0, 1e4, 200)[1:]])
        u = np.asarray(lattice, dtype=float)
        r = self(u)
        du = np.diff(u)
        slopes = np.diff(r) / du
        tol = 1e-12 * max(1.0, float(np.max(np.abs(r))))
        return {
            "zero_at_origin": abs(self(0.0)) == 0.0,
            "nondecreasing": bool(np.all(np.diff(r) >= -tol)),
            "concave": bool(np.all(np.diff(slopes) <= 1e-9 * max(1.0, float(np.max(np.abs(slopes)))))),
            "affine_bound": bool(np.all(r <= self.majorant(u) + tol)),
        }
