"""Gaussian propagator of the quadratic action.

``G_ij(tau) = E[y_i(t) y_j(t + tau)]`` under the quadratic truncation of the
action.  Three evaluation routes:

* ``continuum-residue``: closed form per channel (diagonal rotation only),
* ``continuum-quadrature``: numerical frequency integral of the matrix inverse,
* ``lattice-fourier``: exact inverse of the discrete precision operator on a
  periodic lattice, one ``N x N`` inversion per frequency.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import DomainError, LagRangeError
from .lattice import Lattice, dense_precision
from .model import ModelParams, gamma_coefficients, stationary_prices

METHODS = ("continuum-residue", "continuum-quadrature", "lattice-fourier")

# relative width of the confluent (double-root) band of the channel symbol
DEGENERATE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class PropagatorTable:
    lags: np.ndarray   # tau values, time units
    g: np.ndarray      # g[i, j, k] = G_ij(lags[k])
    method: str

    @property
    def n(self) -> int:
        return self.g.shape[0]

    def at(self, i: int, j: int, tau: float, tol: float = 1e-9) -> float:
        k = np.flatnonzero(np.abs(self.lags - tau) <= tol * max(1.0, abs(tau)))
        if k.size == 0:
            raise LagRangeError(f"lag {tau} not in table")
        return float(self.g[i, j, k[0]])

    def equal_time(self) -> np.ndarray:
        k = np.flatnonzero(self.lags == 0)
        if k.size == 0:
            raise LagRangeError("table has no zero lag")
        return self.g[:, :, k[0]]

    def rows(self):
        """``(tau, i, j, G)`` ordered i major, j minor, tau ascending."""
        order = np.argsort(self.lags, kind="stable")
        for i in range(self.n):
            for j in range(self.n):
                for k in order:
                    yield float(self.lags[k]), i, j, float(self.g[i, j, k])

    def to_csv(self, file) -> None:
        with open(file, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["tau", "i", "j", "G"])
            for tau, i, j, g in self.rows():
                w.writerow([repr(tau), i, j, repr(g)])

    def to_dict(self) -> dict:
        order = np.argsort(self.lags, kind="stable")
        return {
            "method": self.method,
            "lags": self.lags[order].tolist(),
            "g": self.g[:, :, order].tolist(),
        }

    def to_json(self, file) -> None:
        with open(file, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)


def channel_propagator(kappa: float, mu: float, gamma: float, m: float, tau):
    """``(1/m) int dw/2pi exp(i w tau) / (kappa w^4 + mu w^2 + gamma)`` by residues.

    The sign of ``mu^2 - 4 kappa gamma`` selects two decaying exponentials
    (real roots) or a damped oscillation (complex roots); a relative band
    of width ``DEGENERATE_TOL`` uses the double-root limit.
    """
    if not gamma > 0 or not kappa > 0:
        raise DomainError("channel propagator needs kappa > 0 and gamma > 0")
    if mu < 0 or not m > 0:
        raise DomainError("channel propagator needs mu >= 0 and m > 0")
    t = np.abs(np.asarray(tau, dtype=float))
    disc2 = mu * mu - 4 * kappa * gamma
    if abs(disc2) <= DEGENERATE_TOL * (mu * mu + 4 * kappa * gamma):
        s = np.sqrt(mu / (2 * kappa))
        out = (1 + s * t) * np.exp(-s * t) / (4 * s ** 3 * m * kappa)
    elif disc2 > 0:
        disc = np.sqrt(disc2)
        # both roots of kappa z^2 - mu z + gamma in their cancellation-free forms
        slow = np.sqrt(2 * gamma / (mu + disc))
        fast = np.sqrt((mu + disc) / (2 * kappa))
        out = (np.exp(-slow * t) / (2 * slow) - np.exp(-fast * t) / (2 * fast)) / (m * disc)
    else:
        w = np.sqrt(-disc2)
        mod = (gamma / kappa) ** 0.25
        half = 0.5 * np.arctan2(w, mu)
        u, v = mod * np.cos(half), mod * np.sin(half)
        out = np.exp(-u * t) * (u * np.sin(v * t) + v * np.cos(v * t)) / (
            m * w * np.sqrt(gamma / kappa))
    return out if out.ndim else float(out)


def channel_branch(kappa: float, mu: float, gamma: float) -> str:
    """``"real"``, ``"complex"`` or ``"degenerate"`` root structure of a channel."""
    disc2 = mu * mu - 4 * kappa * gamma
    if abs(disc2) <= DEGENERATE_TOL * (mu * mu + 4 * kappa * gamma):
        return "degenerate"
    return "real" if disc2 > 0 else "complex"


def lattice_symbols(lattice: Lattice) -> tuple[np.ndarray, np.ndarray]:
    """Fourier symbols of the first-difference and second-difference stencils.

    Returns ``(w2, w4)`` per FFT frequency: ``w2 = (2 - 2 cos(w dt)) / dt^2``
    and ``w4 = w2^2``.
    """
    k = np.arange(lattice.n_steps)
    w2 = (2 - 2 * np.cos(2 * np.pi * k / lattice.n_steps)) / lattice.dt ** 2
    return w2, w2 * w2


def frequency_precision(params: ModelParams, lattice: Lattice) -> np.ndarray:
    """``m [R^T diag(kappa w4 + mu w2) R + diag(gamma)]`` per frequency, shape (T, N, N)."""
    w2, w4 = lattice_symbols(lattice)
    rot = params.rotation
    chan = params.kinetic_accel[None, :] * w4[:, None] + params.kinetic_vel[None, :] * w2[:, None]
    kin = np.einsum("ji,fj,jk->fik", rot, chan, rot)
    return params.m * (kin + np.diag(gamma_coefficients(params))[None])


def full_lattice_propagator(params: ModelParams, lattice: Lattice) -> np.ndarray:
    """``G[n, i, j]`` for every lag ``n = 0..T-1`` on a periodic lattice."""
    if not lattice.periodic:
        raise DomainError("the Fourier propagator needs a periodic lattice")
    inv = np.linalg.inv(frequency_precision(params, lattice))
    return np.fft.ifft(inv, axis=0).real / lattice.dt


def _lag_indices(lattice: Lattice, lags) -> np.ndarray:
    if lags is None:
        return np.arange(lattice.n_steps // 2 + 1)
    lags = np.atleast_1d(np.asarray(lags))
    if lags.dtype.kind not in "iu":
        if not np.allclose(lags, np.round(lags)):
            raise DomainError("lattice lags must be integers (multiples of dt)")
        lags = np.round(lags).astype(int)
    if np.any(np.abs(lags) >= lattice.n_steps):
        raise LagRangeError("lag exceeds the lattice extent")
    return lags


def matrix_propagator(params: ModelParams, lattice: Lattice, lags=None) -> PropagatorTable:
    """Lattice propagator at integer lag offsets ``lags`` (default ``0..T/2``)."""
    n_lags = _lag_indices(lattice, lags)
    full = full_lattice_propagator(params, lattice)
    g = np.transpose(full[n_lags % lattice.n_steps], (1, 2, 0))
    return PropagatorTable(lags=n_lags * lattice.dt, g=g, method="lattice-fourier")


def dense_propagator(params: ModelParams, lattice: Lattice) -> np.ndarray:
    """Covariance ``E[y_i(t) y_j(t')]`` as a dense ``(N, T, N, T)`` array, any boundary.

    Solves the dense precision system directly; slow but independent of the
    Fourier route.
    """
    n, t = params.n, lattice.n_steps
    cov = np.linalg.solve(dense_precision(params, lattice), np.eye(n * t))
    return cov.reshape(n, t, n, t)


def continuum_propagator(params: ModelParams, lags, method: str = "continuum-residue",
                         epsabs: float = 1e-13) -> PropagatorTable:
    """Continuum-time propagator at lag times ``lags``.

    ``continuum-residue`` needs the identity rotation (channels decouple);
    ``continuum-quadrature`` integrates the matrix inverse over frequency.
    """
    lags = np.atleast_1d(np.asarray(lags, dtype=float))
    n = params.n
    gamma = gamma_coefficients(params)
    g = np.zeros((n, n, lags.size))
    if method == "continuum-residue":
        if not np.allclose(params.rotation, np.eye(n), atol=1e-14):
            raise DomainError("residue propagator needs the identity rotation")
        for i in range(n):
            g[i, i] = channel_propagator(params.kinetic_accel[i], params.kinetic_vel[i],
                                         gamma[i], params.m, lags)
    elif method == "continuum-quadrature":
        rot = params.rotation

        def integrand(w):
            chan = params.kinetic_accel * w ** 4 + params.kinetic_vel * w ** 2
            inv = np.linalg.inv(rot.T @ np.diag(chan) @ rot + np.diag(gamma))
            return np.cos(w * lags)[None, None, :] * inv[:, :, None]

        val, _ = integrate.quad_vec(integrand, 0, np.inf, epsabs=epsabs, epsrel=1e-11,
                                    limit=2000)
        g = val / (np.pi * params.m)
    else:
        raise DomainError(f"unknown continuum method '{method}'")
    return PropagatorTable(lags=lags, g=g, method=method)


def mean_price(params: ModelParams, g0, exact_gaussian: bool = False) -> np.ndarray:
    """Leading-order expected price from the equal-time propagator diagonal.

    By default returns ``p0 exp(G_ii(0))``.  With ``exact_gaussian=True``
    returns the lognormal mean ``p0 exp(G_ii(0) / 2)``, the exact expectation
    of ``p0 e^y`` for Gaussian ``y``; both agree to ``p0 + O(1/m)``.
    """
    g0 = np.asarray(g0, dtype=float)
    if g0.ndim == 2:
        g0 = np.diag(g0)
    factor = 0.5 if exact_gaussian else 1.0
    return stationary_prices(params) * np.exp(factor * g0)


def log_price_correlator(params: ModelParams, lattice: Lattice, i: int, j: int,
                         tau: float) -> float:
    """Predicted ``E[ln(p_i(t)/p0_i) ln(p_j(t+tau)/p0_j)]`` to leading order."""
    steps = tau / lattice.dt
    n = int(round(steps))
    if abs(steps - n) > 1e-9 * max(1.0, abs(steps)) or abs(n) >= lattice.n_steps:
        raise LagRangeError(f"lag {tau} is not on the lattice table")
    if not (0 <= i < params.n and 0 <= j < params.n):
        raise LagRangeError("commodity index out of range")
    full = full_lattice_propagator(params, lattice)
    return float(full[n % lattice.n_steps, i, j])


def generating_exponent(params: ModelParams, lattice: Lattice, source) -> float:
    """``sum_ij sum_tt' h_i(t) G_ij(t' - t) h_j(t') dt^2``."""
    h = np.asarray(source, dtype=float)
    if h.shape != (params.n, lattice.n_steps):
        raise DomainError("source must have shape (N, T)")
    full = full_lattice_propagator(params, lattice)   # (T, N, N)
    hf = np.fft.fft(h, axis=1)
    # cross[i, j, n] = sum_t h_i(t) h_j(t + n)
    cross = np.fft.ifft(np.conj(hf)[:, None, :] * hf[None, :, :], axis=2).real
    return float(np.einsum("nij,ijn->", full, cross)) * lattice.dt ** 2


def gaussian_generating_functional(params: ModelParams, lattice: Lattice, source) -> float:
    """Normalized Gaussian expectation of ``exp(dt * sum h.y)``."""
    return float(np.exp(0.5 * generating_exponent(params, lattice, source)))
