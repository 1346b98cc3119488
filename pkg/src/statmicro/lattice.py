"""Discretized action for log-price fluctuation paths.

A path is an ``(N, T)`` array ``y`` of log-price fluctuations about the
potential minimum, ``p_i(t) = p0_i exp(y_i(t))``.  The kinetic term is
evaluated in the channel basis ``a = rotation @ y`` with a central
second-difference stencil and a forward first difference; the same stencils
define the discrete precision operator inverted by :mod:`statmicro.propagator`.

Boundaries: ``"periodic"`` wraps the time axis; ``"zero"`` holds ``y = 0``
outside the window and keeps every stencil that touches it.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DomainError, ValidationError
from .model import ModelParams, gamma_coefficients, minimum_potential, stationary_prices

BOUNDARIES = ("periodic", "zero")


@dataclass(frozen=True)
class Lattice:
    n_steps: int
    dt: float
    boundary: str = "periodic"

    def __post_init__(self):
        if int(self.n_steps) != self.n_steps or self.n_steps < 8:
            raise DomainError("lattice needs at least 8 time slices")
        if not self.dt > 0:
            raise DomainError("lattice spacing must be positive")
        if self.boundary not in BOUNDARIES:
            raise DomainError(f"boundary must be one of {BOUNDARIES}")
        object.__setattr__(self, "n_steps", int(self.n_steps))
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def periodic(self) -> bool:
        return self.boundary == "periodic"

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps) * self.dt


@dataclass(frozen=True, eq=False)
class PricePath:
    """Log-price fluctuations ``y[i, t]`` about the potential minimum."""

    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        if y.ndim == 1:
            y = y[None, :]
        if y.ndim != 2 or not np.all(np.isfinite(y)):
            raise DomainError("path must be a finite (N, T) array")
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_steps(self) -> int:
        return self.y.shape[1]

    def log_prices(self, params: ModelParams) -> np.ndarray:
        """``x = ln(p / p_scale)``, the fluctuation shifted by the minimum."""
        return np.log(stationary_prices(params) / params.p_scale)[:, None] + self.y

    def prices(self, params: ModelParams) -> np.ndarray:
        return stationary_prices(params)[:, None] * np.exp(self.y)


def _check(params: ModelParams, lattice: Lattice, y) -> np.ndarray:
    y = y.y if isinstance(y, PricePath) else np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[None, :]
    if y.shape != (params.n, lattice.n_steps):
        raise DomainError(
            f"path shape {y.shape} does not match ({params.n}, {lattice.n_steps})")
    return y


# --- difference stencils and their adjoints (rows are channels) --------------

def first_difference(lattice: Lattice, a: np.ndarray) -> np.ndarray:
    eps = lattice.dt
    if lattice.periodic:
        return (np.roll(a, -1, axis=-1) - a) / eps
    ap = np.pad(a, [(0, 0)] * (a.ndim - 1) + [(1, 1)])
    return np.diff(ap, axis=-1) / eps


def first_difference_adjoint(lattice: Lattice, w: np.ndarray) -> np.ndarray:
    eps = lattice.dt
    if lattice.periodic:
        return (np.roll(w, 1, axis=-1) - w) / eps
    return (w[..., :-1] - w[..., 1:]) / eps


def second_difference(lattice: Lattice, a: np.ndarray) -> np.ndarray:
    eps2 = lattice.dt ** 2
    if lattice.periodic:
        return (np.roll(a, -1, axis=-1) - 2 * a + np.roll(a, 1, axis=-1)) / eps2
    ap = np.pad(a, [(0, 0)] * (a.ndim - 1) + [(2, 2)])
    return (ap[..., 2:] - 2 * ap[..., 1:-1] + ap[..., :-2]) / eps2


def second_difference_adjoint(lattice: Lattice, w: np.ndarray) -> np.ndarray:
    if lattice.periodic:
        return second_difference(lattice, w)
    eps2 = lattice.dt ** 2
    return (w[..., :-2] - 2 * w[..., 1:-1] + w[..., 2:]) / eps2


# --- action terms ------------------------------------------------------------

def kinetic_action(params: ModelParams, lattice: Lattice, path) -> float:
    y = _check(params, lattice, path)
    a = params.rotation @ y
    acc = second_difference(lattice, a)
    vel = first_difference(lattice, a)
    per_channel = (params.kinetic_accel * np.sum(acc ** 2, axis=1)
                   + params.kinetic_vel * np.sum(vel ** 2, axis=1))
    return lattice.dt * 0.5 * params.m * float(np.sum(per_channel))


def _site_potential_coeffs(params: ModelParams):
    p0 = stationary_prices(params)
    return params.d * p0 ** (-params.a), params.s * p0 ** params.b


def potential_action(params: ModelParams, lattice: Lattice, path) -> float:
    """Time sum of the exact potential along the path."""
    y = _check(params, lattice, path)
    dem, sup = _site_potential_coeffs(params)
    a, b = params.a[:, None], params.b[:, None]
    v = dem[:, None] * np.exp(-a * y) + sup[:, None] * np.exp(b * y)
    return lattice.dt * 0.5 * params.m * float(np.sum(v))


def quadratic_potential_action(params: ModelParams, lattice: Lattice, path) -> float:
    """Quadratic part of the potential about its minimum, summed over time (no constant)."""
    y = _check(params, lattice, path)
    gamma = gamma_coefficients(params)
    return lattice.dt * 0.5 * params.m * float(np.sum(gamma[:, None] * y ** 2))


def quadratic_action(params: ModelParams, lattice: Lattice, path) -> float:
    """Order-``y^2`` part of the action: kinetic plus quadratic potential."""
    return kinetic_action(params, lattice, path) + quadratic_potential_action(
        params, lattice, path)


def total_action(params: ModelParams, lattice: Lattice, path,
                 quadratic: bool = False) -> float:
    """Kinetic plus potential action.

    With ``quadratic=True`` the potential is replaced by its truncation
    ``V0 + (m/2) gamma y^2``, so the result differs from the exact action
    only by terms of order ``y^3``.
    """
    if quadratic:
        const = lattice.dt * lattice.n_steps * minimum_potential(params)
        return const + quadratic_action(params, lattice, path)
    return kinetic_action(params, lattice, path) + potential_action(params, lattice, path)


def _kinetic_operator(params: ModelParams, lattice: Lattice, y: np.ndarray) -> np.ndarray:
    """``R^T [kappa D2^T D2 + mu D1^T D1] R y`` without the budget factor."""
    rot = params.rotation
    a = rot @ y
    acc = second_difference_adjoint(lattice, second_difference(lattice, a))
    vel = first_difference_adjoint(lattice, first_difference(lattice, a))
    return rot.T @ (params.kinetic_accel[:, None] * acc + params.kinetic_vel[:, None] * vel)


def apply_precision(params: ModelParams, lattice: Lattice, y) -> np.ndarray:
    """Apply the discrete inverse-propagator operator to a field ``y[i, t]``.

    ``m [R^T (kappa D2^T D2 + mu D1^T D1) R + diag(gamma)] y``, with ``R`` the
    rotation.  The quadratic action equals ``dt/2 * sum(y * apply_precision(y))``.
    """
    y = _check(params, lattice, y)
    gamma = gamma_coefficients(params)
    return params.m * (_kinetic_operator(params, lattice, y) + gamma[:, None] * y)


def action_gradient(params: ModelParams, lattice: Lattice, path,
                    quadratic: bool = False) -> np.ndarray:
    """Exact derivative of :func:`total_action` with respect to every ``y[i, t]``."""
    y = _check(params, lattice, path)
    eps, m = lattice.dt, params.m
    grad = eps * m * _kinetic_operator(params, lattice, y)
    if quadratic:
        grad += eps * m * gamma_coefficients(params)[:, None] * y
    else:
        dem, sup = _site_potential_coeffs(params)
        a, b = params.a[:, None], params.b[:, None]
        grad += eps * 0.5 * m * (-a * dem[:, None] * np.exp(-a * y)
                                 + b * sup[:, None] * np.exp(b * y))
    return grad


def dense_precision(params: ModelParams, lattice: Lattice) -> np.ndarray:
    """Dense ``(N*T, N*T)`` matrix of ``dt * apply_precision``; index ``i*T + t``.

    This is the precision of the Gaussian path measure, so its inverse is
    the lattice propagator for either boundary condition.
    """
    n, t = params.n, lattice.n_steps
    eye = np.eye(n * t).reshape(n * t, n, t)
    cols = [lattice.dt * apply_precision(params, lattice, e).ravel() for e in eye]
    return np.array(cols).T


# --- path I/O ----------------------------------------------------------------

_HEADER = struct.Struct("<3d")


def write_path_csv(path: PricePath, lattice: Lattice, file) -> None:
    """CSV with columns ``t, y_1, ..., y_N``; ``t`` is the slice time."""
    with open(file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"y_{i + 1}" for i in range(path.n)])
        for k, row in enumerate(path.y.T):
            w.writerow([repr(k * lattice.dt)] + [repr(float(v)) for v in row])


def read_path_csv(file, boundary: str = "periodic") -> tuple[PricePath, Lattice]:
    with open(file, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0].strip() != "t":
        raise ValidationError("first header column must be 't'", line=1, source=str(file))
    n = len(rows[0]) - 1
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != n + 1:
            raise ValidationError(f"expected {n + 1} columns, got {len(row)}",
                                  line=lineno, source=str(file))
        try:
            data.append([float(x) for x in row])
        except ValueError as exc:
            raise ValidationError(str(exc), line=lineno, source=str(file)) from None
    arr = np.array(data)
    t = arr[:, 0]
    dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
    if not np.allclose(np.diff(t), dt, rtol=1e-9, atol=0):
        raise ValidationError("time column is not uniformly spaced", field="t",
                              source=str(file))
    return PricePath(arr[:, 1:].T.copy()), Lattice(len(t), dt, boundary)


def write_path_binary(path: PricePath, lattice: Lattice, file) -> None:
    """Header of three little-endian doubles ``(N, T, dt)`` then ``y`` row-major."""
    with open(file, "wb") as fh:
        fh.write(_HEADER.pack(path.n, path.n_steps, lattice.dt))
        fh.write(np.ascontiguousarray(path.y, dtype="<f8").tobytes())


def read_path_binary(file, boundary: str = "periodic") -> tuple[PricePath, Lattice]:
    raw = Path(file).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValidationError("truncated header", source=str(file))
    n, t, dt = _HEADER.unpack_from(raw)
    n, t = int(n), int(t)
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size)
    if body.size != n * t:
        raise ValidationError(f"expected {n * t} values, found {body.size}", source=str(file))
    return PricePath(body.reshape(n, t).astype(float)), Lattice(t, dt, boundary)
