"""Model parameters and the closed-form demand, supply and potential.

All prices are in currency units.  The kinetic weights are called
``kinetic_accel`` (weight of the squared second time derivative) and
``kinetic_vel`` (weight of the squared first derivative); both act in the
rotated channel basis ``a = rotation @ y``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import (
    ConvergenceError,
    DomainError,
    UnsupportedConfigurationError,
    ValidationError,
)

ORTHOGONALITY_TOL = 1e-12

_VECTOR_FIELDS = ("a", "b", "d", "s", "kinetic_accel", "kinetic_vel")
_ALLOWED_KEYS = {"n_commodities", "m", "p_scale", "rotation", *_VECTOR_FIELDS}


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Per-commodity coefficients of the potential plus the kinetic couplings.

    Vectors have length ``n_commodities``.  ``kinetic_accel`` and
    ``kinetic_vel`` default to ones and zeros respectively; ``rotation``
    defaults to the identity.
    """

    a: np.ndarray
    b: np.ndarray
    d: np.ndarray
    s: np.ndarray
    m: float
    p_scale: float = 1.0
    kinetic_accel: np.ndarray | None = None
    kinetic_vel: np.ndarray | None = None
    rotation: np.ndarray | None = None
    n_commodities: int = field(default=0)

    def __post_init__(self):
        vecs = {}
        for name in ("a", "b", "d", "s"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=float)).copy()
            if v.ndim != 1:
                raise ValidationError(f"'{name}' must be a vector", field=name)
            vecs[name] = v
        n = vecs["a"].size
        if self.n_commodities not in (0, n):
            raise ValidationError(
                f"'n_commodities' is {self.n_commodities} but 'a' has {n} entries",
                field="n_commodities")
        kin_a = np.ones(n) if self.kinetic_accel is None else self.kinetic_accel
        kin_v = np.zeros(n) if self.kinetic_vel is None else self.kinetic_vel
        vecs["kinetic_accel"] = np.atleast_1d(np.asarray(kin_a, dtype=float)).copy()
        vecs["kinetic_vel"] = np.atleast_1d(np.asarray(kin_v, dtype=float)).copy()
        for name, v in vecs.items():
            if v.shape != (n,):
                raise ValidationError(
                    f"'{name}' has {v.size} entries, expected {n}", field=name)
            if not np.all(np.isfinite(v)):
                raise ValidationError(f"'{name}' has non-finite entries", field=name)
        for name in ("a", "b", "d", "s", "kinetic_accel"):
            if np.any(vecs[name] <= 0):
                raise ValidationError(f"'{name}' must be strictly positive", field=name)
        if np.any(vecs["kinetic_vel"] < 0):
            raise ValidationError("'kinetic_vel' must be non-negative", field="kinetic_vel")
        m = float(self.m)
        if not (np.isfinite(m) and m > 0):
            raise ValidationError("'m' must be strictly positive", field="m")
        p_scale = float(self.p_scale)
        if not (np.isfinite(p_scale) and p_scale > 0):
            raise ValidationError("'p_scale' must be strictly positive", field="p_scale")
        rot = np.eye(n) if self.rotation is None else np.asarray(self.rotation, dtype=float)
        if rot.shape != (n, n):
            raise ValidationError(f"'rotation' must be {n}x{n}", field="rotation")
        if not np.allclose(rot @ rot.T, np.eye(n), rtol=0, atol=ORTHOGONALITY_TOL):
            raise ValidationError("'rotation' is not orthogonal", field="rotation")
        for name, v in vecs.items():
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        rot = rot.copy()
        rot.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "p_scale", p_scale)
        object.__setattr__(self, "n_commodities", n)

    @property
    def n(self) -> int:
        return self.n_commodities

    @property
    def uniform_a(self) -> bool:
        return bool(np.all(self.a == self.a[0]))

    def with_budget(self, m: float) -> "ModelParams":
        return replace(self, m=m)

    def to_dict(self) -> dict[str, Any]:
        return {
            "n_commodities": self.n,
            "a": self.a.tolist(),
            "b": self.b.tolist(),
            "d": self.d.tolist(),
            "s": self.s.tolist(),
            "m": self.m,
            "p_scale": self.p_scale,
            "kinetic_accel": self.kinetic_accel.tolist(),
            "kinetic_vel": self.kinetic_vel.tolist(),
            "rotation": self.rotation.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any], text: str | None = None,
                  source: str | None = None) -> "ModelParams":
        """Build from a parsed document.

        ``text`` is the raw document; when given, validation errors report the
        line where the offending key appears.
        """
        def fail(msg, key):
            raise ValidationError(msg, field=key, line=_find_key_line(text, key),
                                  source=source)

        unknown = sorted(set(doc) - _ALLOWED_KEYS)
        if unknown:
            fail(f"unknown key '{unknown[0]}'", unknown[0])
        for key in ("a", "b", "d", "s", "m"):
            if key not in doc:
                raise ValidationError(f"missing required key '{key}'", field=key,
                                      source=source)
        kwargs: dict[str, Any] = {}
        for key, value in doc.items():
            if key in _VECTOR_FIELDS:
                if isinstance(value, (int, float)) and not isinstance(value, bool):
                    value = [value]
                if not (isinstance(value, list)
                        and all(isinstance(x, (int, float)) and not isinstance(x, bool)
                                for x in value)):
                    fail(f"'{key}' must be a list of numbers", key)
            elif key in ("m", "p_scale"):
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    fail(f"'{key}' must be a number", key)
            elif key == "n_commodities":
                if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                    fail("'n_commodities' must be a positive integer", key)
            elif key == "rotation":
                if not (isinstance(value, list) and all(isinstance(r, list) for r in value)):
                    fail("'rotation' must be a list of rows", key)
            kwargs[key] = value
        try:
            return cls(**kwargs)
        except ValidationError as exc:
            raise ValidationError(str(exc), field=exc.field,
                                  line=_find_key_line(text, exc.field),
                                  source=source) from None


def _find_key_line(text: str | None, key: str | None) -> int | None:
    if not text or not key:
        return None
    pat = re.compile(r'"%s"\s*:|^\s*%s\s*=' % (re.escape(key), re.escape(key)))
    for lineno, line in enumerate(text.splitlines(), start=1):
        if pat.search(line):
            return lineno
    return None


def load_params(path: str | Path) -> ModelParams:
    """Read ``ModelParams`` from a TOML or JSON file (chosen by suffix).

    A TOML file may hold the keys at top level or under a ``[params]`` table.
    """
    path = Path(path)
    text = path.read_text()
    doc = parse_document(text, path.suffix, source=str(path))
    if "params" in doc and isinstance(doc["params"], dict):
        doc = doc["params"]
    return ModelParams.from_dict(doc, text=text, source=str(path))


def parse_document(text: str, suffix: str, source: str | None = None) -> dict:
    if suffix.lower() == ".json":
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValidationError(exc.msg, line=exc.lineno, source=source) from None
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        raise ValidationError(str(exc), line=int(m.group(1)) if m else None,
                              source=source) from None


def _as_prices(params: ModelParams, p) -> np.ndarray:
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if p.shape != (params.n,):
        raise DomainError(f"expected {params.n} prices, got shape {p.shape}")
    if not np.all(p > 0):
        raise DomainError("prices must be strictly positive")
    return p


def demand(params: ModelParams, p) -> float:
    p = _as_prices(params, p)
    return 0.5 * params.m * float(np.sum(params.d / p ** params.a))


def supply(params: ModelParams, p) -> float:
    p = _as_prices(params, p)
    return 0.5 * params.m * float(np.sum(params.s * p ** params.b))


def potential(params: ModelParams, p) -> float:
    """Microeconomic potential: demand plus supply."""
    return demand(params, p) + supply(params, p)


def stationary_prices(params: ModelParams) -> np.ndarray:
    """Prices minimizing the potential, one per commodity."""
    a, b = params.a, params.b
    return (a * params.d / (b * params.s)) ** (1.0 / (a + b))


def classical_market_prices(params: ModelParams) -> np.ndarray:
    """Prices at which each commodity's demand term equals its supply term."""
    return (params.d / params.s) ** (1.0 / (params.a + params.b))


def log_price_minimum(params: ModelParams) -> np.ndarray:
    """``ln(p0 / p_scale)`` for each commodity."""
    return np.log(stationary_prices(params) / params.p_scale)


def minimum_potential(params: ModelParams) -> float:
    """Value of the potential at the stationary prices."""
    return potential(params, stationary_prices(params))


def gamma_coefficients(params: ModelParams) -> np.ndarray:
    """Curvature of the potential in log-price at its minimum.

    Defined so that ``V(p0 e^y) = V0 + (m/2) sum_i gamma_i y_i^2 + O(y^3)``.
    For ``a_i = b_i = 1`` this equals ``sqrt(d_i s_i)``; no such identity holds
    for other exponents.
    """
    a, b = params.a, params.b
    p0 = stationary_prices(params)
    return 0.5 * (a ** 2 * params.d * p0 ** (-a) + b ** 2 * params.s * p0 ** b)


def numerical_stationary_prices(params: ModelParams, tol: float = 1e-12,
                                max_iter: int = 200) -> np.ndarray:
    """Minimize the potential by Newton iteration in log-price coordinates.

    Uses only the potential's derivatives, never the closed-form minimizer,
    so it serves as an independent check of :func:`stationary_prices`.
    Converges when the gradient infinity-norm, measured relative to the size
    of the competing demand and supply forces, drops below ``tol``.
    """
    half_m = 0.5 * params.m
    a, b, d, s = params.a, params.b, params.d, params.s
    x = np.zeros(params.n)  # log price
    trace = []
    for _ in range(max_iter):
        dem = d * np.exp(-a * x)
        sup = s * np.exp(b * x)
        grad = half_m * (b * sup - a * dem)
        scale = half_m * (b * sup + a * dem)
        rel = np.max(np.abs(grad) / scale)
        trace.append(rel)
        if rel < tol:
            return np.exp(x)
        hess = half_m * (a * a * dem + b * b * sup)
        step = grad / hess
        # keep steps bounded far from the minimum where exp terms dominate
        x = x - np.clip(step, -2.0, 2.0)
    raise ConvergenceError("Newton minimization of the potential did not converge",
                           last=np.exp(x), trace=trace)


def model_utility(params: ModelParams, q) -> float:
    """Utility dual to the model demand (uniform demand exponent only)."""
    if not params.uniform_a:
        raise UnsupportedConfigurationError(
            "model utility is only available for a uniform demand exponent")
    q = np.atleast_1d(np.asarray(q, dtype=float))
    if q.shape != (params.n,):
        raise DomainError(f"expected {params.n} quantities, got shape {q.shape}")
    if not np.all(q > 0):
        raise DomainError("quantities must be strictly positive")
    a = params.a[0]
    inner = np.sum(params.d ** (1.0 / (a + 1)) * q ** (a / (a + 1)))
    return 0.5 * params.m ** (1.0 - a) * float(inner ** (a + 1))
