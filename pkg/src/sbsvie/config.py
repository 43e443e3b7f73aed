"""Run configuration: flat ``key = value`` files mirrored by command-line flags."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from ._validation import check_alpha, check_positive_int


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    alpha: float = 0.75
    T: float = 1.0
    n: int = 1
    d: int = 1
    lam: tuple = (1.0,)
    M: int = 10_000
    N: int = 32
    seed: int = 0
    degree: int = 3
    max_iter: int = 25
    tol: float = 1e-10
    inner_max: int = 30
    inner_tol: float = 1e-10
    grading: float = 1.0
    stepping: str = "auto"
    output_dir: str = "runs"

    def __post_init__(self):
        check_alpha(self.alpha)
        if not self.T > 0:
            raise ConfigError("T must be positive")
        for name in ("n", "d", "M", "N", "max_iter", "inner_max"):
            check_positive_int(getattr(self, name), name)
        if int(self.degree) != self.degree or self.degree < 0:
            raise ConfigError("degree must be an integer >= 0")
        if not (self.tol > 0 and self.inner_tol > 0):
            raise ConfigError("tolerances must be positive")
        if self.grading < 1:
            raise ConfigError("grading must be >= 1")
        if self.stepping not in ("auto", "off"):
            raise ConfigError("stepping must be 'auto' or 'off'")
        lam = tuple(float(v) for v in np.atleast_1d(self.lam))
        if len(lam) == 1 and self.d > 1:
            lam = lam * self.d
        if len(lam) != self.d:
            raise ConfigError(f"lambda has {len(lam)} entries but d = {self.d}")
        if any(v < 0 for v in lam):
            raise ConfigError("lambda entries must be >= 0")
        object.__setattr__(self, "lam", lam)

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["lam"] = list(self.lam)
        return out


_ALIASES = {
    "lambda": "lam", "paths": "M", "grid": "N", "max-iter": "max_iter",
    "inner-max": "inner_max", "inner-tol": "inner_tol", "out": "output_dir",
}


def _coerce(key: str, raw: str):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    kind = kinds[key]
    try:
        if key == "lam":
            return tuple(float(v) for v in raw.replace(",", " ").split())
        if kind == "int":
            value = float(raw)
            if value != int(value):
                raise ValueError
            return int(value)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """``key = value`` per line, ``#`` starts a comment; unknown keys are errors."""
    out = {}
    known = {f.name for f in fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = _ALIASES.get(key, key.replace("-", "_"))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text)
