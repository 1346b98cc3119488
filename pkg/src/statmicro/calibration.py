"""Fit the quadratic action to observed log-price autocovariances.

Only the products ``m*kappa``, ``m*mu`` and ``m*gamma`` are identified by
correlators, because every term of the action carries the budget.  The
budget is therefore a user input and the fitted values are reported at it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime

import numpy as np
from scipy import optimize

from .duality import CostParams
from .errors import DomainError, FitError, IdentifiabilityError, LengthError, ValidationError
from .lattice import Lattice
from .model import ModelParams, stationary_prices
from .propagator import PropagatorTable, channel_branch, channel_propagator
from .sampler import SamplerConfig, sample_path

SPACING_RTOL = 1e-9
KAPPA_STARTS = (0.01, 0.5, 2.0, 8.0)


@dataclass(frozen=True, eq=False)
class PriceSeries:
    timestamps: np.ndarray   # seconds (ISO input) or raw numbers
    prices: np.ndarray       # (N, T_obs), strictly positive
    labels: tuple = ()

    def __post_init__(self):
        t = np.asarray(self.timestamps, dtype=float)
        p = np.asarray(self.prices, dtype=float)
        if p.ndim == 1:
            p = p[None, :]
        if p.ndim != 2 or p.shape[1] != t.size:
            raise DomainError("prices must be (N, T) with one timestamp per column")
        if t.size < 2:
            raise DomainError("need at least two observations")
        if not np.all(np.isfinite(p)) or np.any(p <= 0):
            raise DomainError("prices must be finite and strictly positive")
        steps = np.diff(t)
        if np.any(steps <= 0):
            raise DomainError("timestamps must be strictly increasing")
        if np.any(np.abs(steps - steps[0]) > SPACING_RTOL * steps[0]):
            raise DomainError("timestamps must be uniformly spaced")
        labels = tuple(self.labels) if self.labels else tuple(
            f"p{i + 1}" for i in range(p.shape[0]))
        if len(labels) != p.shape[0]:
            raise DomainError("one label per commodity required")
        object.__setattr__(self, "timestamps", t)
        object.__setattr__(self, "prices", p)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.prices.shape[0]

    @property
    def n_obs(self) -> int:
        return self.prices.shape[1]

    @property
    def dt(self) -> float:
        return float(self.timestamps[1] - self.timestamps[0])

    def log_prices(self) -> np.ndarray:
        return np.log(self.prices)


def _parse_time(text: str):
    try:
        return float(text), "numeric"
    except ValueError:
        pass
    stamp = text.strip()
    if stamp.endswith("Z"):
        stamp = stamp[:-1] + "+00:00"
    return datetime.fromisoformat(stamp).timestamp(), "iso"


def read_price_csv(file) -> PriceSeries:
    """Read ``timestamp,label1,...,labelN`` rows; gaps and bad cells are rejected."""
    source = str(file)
    with open(file, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValidationError("empty file", line=1, source=source)
    header = [h.strip() for h in rows[0]]
    if header[0] != "timestamp":
        raise ValidationError("first column must be 'timestamp'", field="timestamp",
                              line=1, source=source)
    labels = header[1:]
    if not labels or any(not lab for lab in labels):
        raise ValidationError("need at least one named price column", line=1, source=source)
    times, data, kind = [], [], None
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < len(header):
            missing = header[len(row)]
            raise ValidationError(f"missing column '{missing}'", field=missing,
                                  line=lineno, source=source)
        if len(row) > len(header):
            raise ValidationError(f"{len(row)} fields but the header has {len(header)}",
                                  line=lineno, source=source)
        try:
            stamp, this_kind = _parse_time(row[0])
        except ValueError:
            raise ValidationError(f"unreadable timestamp '{row[0]}'", field="timestamp",
                                  line=lineno, source=source) from None
        if kind is not None and this_kind != kind:
            raise ValidationError("mixed timestamp formats", field="timestamp",
                                  line=lineno, source=source)
        kind = this_kind
        values = []
        for lab, cell in zip(labels, row[1:]):
            try:
                v = float(cell)
            except ValueError:
                raise ValidationError(f"column '{lab}': not a number: '{cell}'", field=lab,
                                      line=lineno, source=source) from None
            if not np.isfinite(v) or v <= 0:
                raise ValidationError(f"column '{lab}': price must be positive", field=lab,
                                      line=lineno, source=source)
            values.append(v)
        if times:
            step = stamp - times[-1]
            first = times[1] - times[0] if len(times) > 1 else step
            if step <= 0:
                raise ValidationError("timestamps must be strictly increasing",
                                      field="timestamp", line=lineno, source=source)
            if abs(step - first) > SPACING_RTOL * first:
                raise ValidationError("irregular spacing (gap or jitter) in timestamps",
                                      field="timestamp", line=lineno, source=source)
        times.append(stamp)
        data.append(values)
    if len(times) < 2:
        raise ValidationError("need at least two data rows", source=source)
    return PriceSeries(np.array(times), np.array(data).T, tuple(labels))


def write_price_csv(series: PriceSeries, file) -> None:
    with open(file, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp", *series.labels])
        for k in range(series.n_obs):
            w.writerow([repr(float(series.timestamps[k]))]
                       + [repr(float(v)) for v in series.prices[:, k]])


def empirical_autocovariance(series: PriceSeries, max_lag: int) -> PropagatorTable:
    """Demeaned log-price cross-covariance ``C_ij(k dt)``, ``k = 0..max_lag``.

    Uses the biased ``1/T`` normalization, so the lag-0 block is positive
    semidefinite.
    """
    max_lag = int(max_lag)
    if max_lag < 0:
        raise DomainError("max_lag must be non-negative")
    t_obs = series.n_obs
    if t_obs < 10 * max(max_lag, 1):
        raise LengthError(f"{t_obs} observations are too few for max_lag={max_lag}"
                          " (need at least 10 per lag)")
    x = series.log_prices()
    # anchoring at the first value first makes a constant series exactly zero
    x = x - x[:, :1]
    x = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(x, 2 * t_obs, axis=1)
    cross = np.fft.irfft(np.conj(f)[:, None, :] * f[None, :, :], 2 * t_obs, axis=2)
    g = cross[:, :, : max_lag + 1] / t_obs
    return PropagatorTable(lags=np.arange(max_lag + 1) * series.dt, g=g, method="empirical")


def bartlett_cutoff(acov: np.ndarray, n_obs: int) -> int:
    """First lag whose autocovariance is within two Bartlett standard errors of zero.

    Returns ``len(acov) - 1`` when no lag qualifies.
    """
    acov = np.asarray(acov, dtype=float)
    if acov[0] <= 0:
        return 0
    rho = acov / acov[0]
    # Bartlett: Var[rho_k] = (1 + 2 sum_{j<k} rho_j^2) / T
    var = (1 + 2 * np.concatenate([[0.0, 0.0], np.cumsum(rho[1:-1] ** 2)])) / n_obs
    below = np.abs(rho) < 2 * np.sqrt(var)
    below[0] = False
    return int(np.argmax(below)) if below.any() else acov.size - 1


@dataclass
class ChannelFit:
    kappa: float
    mu: float
    gamma: float
    m: float
    residual_norm: float
    branch: str
    n_lags: int
    optimality: float
    trace: list = field(default_factory=list, repr=False)

    def scaled(self) -> dict:
        """The identified products ``m*kappa``, ``m*mu``, ``m*gamma``."""
        return {"m_kappa": self.m * self.kappa, "m_mu": self.m * self.mu,
                "m_gamma": self.m * self.gamma}


def _ou_guess(lags, chat, m):
    c0 = chat[0]
    pos = np.flatnonzero(chat[1:] > 0.05 * c0)
    k = int(pos[-1]) + 1 if pos.size else 1
    k = max(1, min(k, lags.size - 1))
    rate = np.log(c0 / max(chat[k], 1e-3 * c0)) / lags[k]
    rate = max(rate, 1e-6 / max(lags[-1], 1e-300))
    return rate / (2 * m * c0), 1 / (2 * m * c0 * rate)


def fit_channel(lags, chat, m: float, tau_max: float | None = None,
                n_obs: int | None = None) -> ChannelFit:
    """Least-squares fit of the channel propagator to one autocovariance curve.

    Parameters are fitted as logarithms, which keeps them positive.  The
    fitted lags run up to ``tau_max``; the default is the Bartlett cutoff
    when ``n_obs`` is given, and all lags otherwise.  Several starting
    values of ``kappa`` cover both the real-root and the oscillating branch;
    the best converged fit is returned.
    """
    lags = np.asarray(lags, dtype=float)
    chat = np.asarray(chat, dtype=float)
    if lags.shape != chat.shape or lags.ndim != 1:
        raise DomainError("lags and autocovariance must be matching 1-d arrays")
    if not m > 0:
        raise DomainError("budget m must be positive")
    if not chat[0] > 0:
        raise IdentifiabilityError("zero-lag autocovariance is not positive (flat series)")
    if tau_max is None:
        k_max = bartlett_cutoff(chat, n_obs) if n_obs else lags.size - 1
    else:
        k_max = int(np.searchsorted(lags, tau_max * (1 + 1e-12), side="right")) - 1
    k_max = max(k_max, min(3, lags.size - 1))
    lags, chat = lags[: k_max + 1], chat[: k_max + 1]
    if lags.size < 4:
        raise IdentifiabilityError("fewer than four lags available for a three-parameter fit")
    if np.ptp(chat) <= 1e-12 * abs(chat[0]):
        raise IdentifiabilityError("autocovariance is flat over the fitted lags")

    scale = chat[0]

    def resid(x):
        kappa, mu, gamma = np.exp(x)
        return (channel_propagator(kappa, mu, gamma, m, lags) - chat) / scale

    gamma0, mu0 = _ou_guess(lags, chat, m)
    trace, best = [], None
    for f in KAPPA_STARTS:
        x0 = np.log([f * mu0 ** 2 / (4 * gamma0), mu0, gamma0])
        try:
            res = optimize.least_squares(resid, x0, method="trf", x_scale="jac",
                                         gtol=1e-10, xtol=1e-14, ftol=1e-14, max_nfev=5000)
        except (ValueError, FloatingPointError) as exc:
            trace.append({"start": f, "error": str(exc)})
            continue
        trace.append({"start": f, "status": int(res.status), "cost": float(res.cost),
                      "optimality": float(res.optimality), "x": np.exp(res.x).tolist()})
        if res.status > 0 and (best is None or res.cost < best.cost):
            best = res
    if best is None:
        raise FitError("no start converged", last=None, trace=trace)
    kappa, mu, gamma = np.exp(best.x)
    return ChannelFit(kappa=float(kappa), mu=float(mu), gamma=float(gamma), m=float(m),
                      residual_norm=float(np.sqrt(2 * best.cost)),
                      branch=channel_branch(kappa, mu, gamma), n_lags=int(lags.size),
                      optimality=float(best.optimality), trace=trace)


def recover_supply_demand(p0_hat, gamma_hat, a, b) -> tuple[np.ndarray, np.ndarray]:
    """Demand and supply coefficients reproducing ``p0_hat`` and ``gamma_hat``.

    The minimum condition fixes ``d/s = (b/a) p0^(a+b)`` and the curvature
    fixes the overall scale; with both imposed,
    ``d = 2 gamma p0^a / (a (a+b))`` and ``s = 2 gamma p0^-b / (b (a+b))``.
    """
    p0, gamma, a, b = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=float))
                                            for v in (p0_hat, gamma_hat, a, b)))
    for name, v in (("p0_hat", p0), ("gamma_hat", gamma), ("a", a), ("b", b)):
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise DomainError(f"inconsistent inputs: '{name}' must be positive")
    d = 2 * gamma * p0 ** a / (a * (a + b))
    s = 2 * gamma * p0 ** (-b) / (b * (a + b))
    if np.any(d <= 0) or np.any(s <= 0) or not np.all(np.isfinite(d * s)):
        raise DomainError("inconsistent inputs: no positive solution")
    return d, s


def cost_from_market(params: ModelParams, q0) -> CostParams:
    """Producer cost parameters making supply at ``p0`` equal the observed ``q0``."""
    q0 = np.broadcast_to(np.asarray(q0, dtype=float), (params.n,))
    if np.any(q0 <= 0):
        raise DomainError("observed quantities must be positive")
    beta = stationary_prices(params) / q0 ** (1 / params.b)
    return CostParams.linked(params, beta)


@dataclass
class CalibrationResult:
    labels: tuple
    m: float
    kappa: np.ndarray
    mu: np.ndarray
    gamma: np.ndarray
    p0_hat: np.ndarray
    d_hat: np.ndarray
    s_hat: np.ndarray
    a: np.ndarray
    b: np.ndarray
    residual_norm: float
    covariance: np.ndarray        # bootstrap covariance of (log kappa, log mu, log gamma) per channel
    branch: tuple
    tau_max: np.ndarray
    fits: list = field(default_factory=list, repr=False)
    cost: dict | None = None

    def to_dict(self) -> dict:
        out = {}
        for key, value in asdict(self).items():
            if key == "fits":
                continue
            out[key] = value.tolist() if isinstance(value, np.ndarray) else value
        out["labels"] = list(self.labels)
        out["branch"] = list(self.branch)
        return out

    def to_json(self, file, extra: dict | None = None) -> None:
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        with open(file, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)

    def params(self) -> ModelParams:
        """Model parameters implied by the fit (identity rotation)."""
        return ModelParams(a=self.a, b=self.b, d=self.d_hat, s=self.s_hat, m=self.m,
                           kinetic_accel=self.kappa, kinetic_vel=self.mu)


def _block_bootstrap(x: np.ndarray, lags, m, k_max, block, n_boot, rng):
    """Covariance of log-parameters from moving-block resamples of one series."""
    n_obs = x.size
    n_blocks = -(-n_obs // block)
    draws = []
    for _ in range(n_boot):
        starts = rng.integers(0, n_obs - block + 1, n_blocks)
        xb = np.concatenate([x[s:s + block] for s in starts])[:n_obs]
        xb = xb - xb.mean()
        f = np.fft.rfft(xb, 2 * n_obs)
        c = np.fft.irfft(f * np.conj(f), 2 * n_obs)[: k_max + 1] / n_obs
        try:
            fit = fit_channel(lags[: k_max + 1], c, m, tau_max=lags[k_max])
        except (FitError, IdentifiabilityError):
            continue
        draws.append(np.log([fit.kappa, fit.mu, fit.gamma]))
    if len(draws) < 2:
        return np.full((3, 3), np.nan)
    return np.cov(np.array(draws).T)


def calibrate(series: PriceSeries, m: float, a, b, max_lag: int | None = None,
              tau_max: float | None = None, q0=None, n_boot: int = 0,
              seed: int = 0) -> CalibrationResult:
    """Fit every commodity channel and recover demand and supply coefficients.

    Assumes the identity rotation, so each commodity is fitted on its own
    autocovariance.  ``p0_hat`` is the geometric mean of the observed prices.
    ``n_boot > 0`` adds a moving-block bootstrap covariance of the fitted
    log-parameters.
    """
    n = series.n
    a = np.broadcast_to(np.asarray(a, dtype=float), (n,))
    b = np.broadcast_to(np.asarray(b, dtype=float), (n,))
    if max_lag is None:
        max_lag = max(4, min(series.n_obs // 10, 1000))
    table = empirical_autocovariance(series, max_lag)
    fits, k_used = [], []
    for i in range(n):
        fit = fit_channel(table.lags, table.g[i, i], m, tau_max=tau_max, n_obs=series.n_obs)
        fits.append(fit)
        k_used.append(fit.n_lags - 1)
    kappa = np.array([f.kappa for f in fits])
    mu = np.array([f.mu for f in fits])
    gamma = np.array([f.gamma for f in fits])
    p0_hat = np.exp(series.log_prices().mean(axis=1))
    d_hat, s_hat = recover_supply_demand(p0_hat, gamma, a, b)
    cov = np.full((n, 3, 3), np.nan)
    if n_boot > 0:
        rng = np.random.default_rng(seed)
        x = series.log_prices()
        for i in range(n):
            block = max(10, 5 * k_used[i])
            cov[i] = _block_bootstrap(x[i], table.lags, m, k_used[i], block, n_boot, rng)
    result = CalibrationResult(
        labels=series.labels, m=float(m), kappa=kappa, mu=mu, gamma=gamma, p0_hat=p0_hat,
        d_hat=d_hat, s_hat=s_hat, a=np.array(a), b=np.array(b),
        residual_norm=float(np.sqrt(sum(f.residual_norm ** 2 for f in fits))),
        covariance=cov, branch=tuple(f.branch for f in fits),
        tau_max=np.array(k_used) * series.dt, fits=fits)
    if q0 is not None:
        cost = cost_from_market(result.params(), q0)
        result.cost = {"beta": cost.beta.tolist(), "alpha": cost.alpha.tolist(),
                       "b": cost.b.tolist()}
    return result


def fitted_curves(series: PriceSeries, result: CalibrationResult, max_lag: int):
    """Rows ``(tau, label, empirical, fitted)`` for external plotting."""
    table = empirical_autocovariance(series, max_lag)
    for i, lab in enumerate(series.labels):
        model = channel_propagator(result.kappa[i], result.mu[i], result.gamma[i], result.m,
                                   table.lags)
        for k, tau in enumerate(table.lags):
            yield float(tau), lab, float(table.g[i, i, k]), float(model[k])


def synthesize_series(params: ModelParams, n_obs: int, dt: float, seed: int = 0,
                      n_sweeps: int = 200, n_burnin: int = 100,
                      labels=None) -> PriceSeries:
    """Price series from one sampled path of a periodic lattice with ``n_obs`` slices.

    The chain starts from an exact draw of the truncated measure and then
    relaxes under the full action.
    """
    lattice = Lattice(n_obs, dt, "periodic")
    cfg = SamplerConfig(n_sweeps=n_sweeps, n_burnin=n_burnin, seed=seed)
    path = sample_path(params, lattice, cfg, initial="gaussian")
    return PriceSeries(lattice.times, path.prices(params),
                       tuple(labels) if labels else ())
