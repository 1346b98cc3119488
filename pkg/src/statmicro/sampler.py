"""Metropolis sampling of lattice price paths weighted by ``exp(-action)``.

Sampling is done in the log-price fluctuation ``y`` with a flat measure.
Each chain draws its random numbers from its own ``numpy`` PCG64 stream; the
stream of chain ``c`` is ``SeedSequence(seed).spawn(n_chains)[c]``, so results
depend only on ``(seed, n_chains)`` and not on scheduling.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _kernel
from .errors import DomainError, TuningError
from .lattice import Lattice, PricePath
from .model import ModelParams, gamma_coefficients, stationary_prices
from .stats import block_means, effective_sample_size, integrated_autocorr_time, jackknife

N_BLOCKS = 50
TUNE_INTERVAL = 50
TARGET_ACCEPTANCE = 0.5
ACCEPTANCE_RANGE = (0.1, 0.9)
CHUNK_SWEEPS = 256


@dataclass(frozen=True)
class SamplerConfig:
    n_sweeps: int = 100_000
    n_burnin: int = 2_000
    n_thin: int = 10
    step_size: float | None = None   # initial proposal width; None picks one from the action
    seed: int = 0
    n_chains: int = 1
    max_lag: int | None = None       # correlator lags 0..max_lag (default T // 4)

    def __post_init__(self):
        for name in ("n_sweeps", "n_thin", "n_chains"):
            if int(getattr(self, name)) < 1:
                raise DomainError(f"'{name}' must be a positive integer")
        if self.n_burnin < 0 or self.n_burnin >= self.n_sweeps:
            raise DomainError("'n_burnin' must be non-negative and below 'n_sweeps'")
        if self.step_size is not None and not self.step_size > 0:
            raise DomainError("'step_size' must be positive")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise DomainError("'seed' must fit in 64 unsigned bits")


@dataclass
class CorrelatorEstimate:
    lags: np.ndarray                 # tau values
    corr: np.ndarray                 # connected G_ij(tau), shape (N, N, L)
    corr_err: np.ndarray
    mean_logprice: np.ndarray        # E[y_i]
    mean_logprice_err: np.ndarray
    mean_price: np.ndarray           # E[p_i]
    mean_price_err: np.ndarray
    acceptance_rate: float
    acceptance_by_commodity: np.ndarray
    ess: dict = field(default_factory=dict)
    tau_int: dict = field(default_factory=dict)
    steps: np.ndarray | None = None
    n_samples: int = 0
    quadratic: bool = False
    config: dict = field(default_factory=dict)

    def equal_time(self):
        return self.corr[:, :, 0], self.corr_err[:, :, 0]

    def to_dict(self) -> dict:
        out = {}
        for key, value in asdict(self).items():
            if isinstance(value, np.ndarray):
                value = value.tolist()
            elif isinstance(value, dict):
                value = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                         for k, v in value.items()}
            out[key] = value
        return out

    def to_json(self, file, extra: dict | None = None) -> None:
        doc = self.to_dict()
        if extra:
            doc.update(extra)
        with open(file, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)

    def rows(self):
        """``(tau, i, j, G, err)`` in propagator-table order."""
        n = self.corr.shape[0]
        for i in range(n):
            for j in range(n):
                for k, tau in enumerate(self.lags):
                    yield float(tau), i, j, float(self.corr[i, j, k]), float(self.corr_err[i, j, k])


@dataclass
class _Chain:
    samples: np.ndarray     # (n_meas, N, T)
    accepted: np.ndarray
    proposals: int
    steps: np.ndarray
    final: np.ndarray


def _action_arrays(params: ModelParams):
    p0 = stationary_prices(params)
    return dict(
        rot=np.ascontiguousarray(params.rotation),
        kacc=np.ascontiguousarray(params.kinetic_accel),
        kvel=np.ascontiguousarray(params.kinetic_vel),
        dem=params.d * p0 ** (-params.a),
        sup=params.s * p0 ** params.b,
        aexp=np.ascontiguousarray(params.a),
        bexp=np.ascontiguousarray(params.b),
        gamma=gamma_coefficients(params),
        half_m=0.5 * params.m,
    )


def default_steps(params: ModelParams, lattice: Lattice) -> np.ndarray:
    """Proposal widths of twice the single-site conditional standard deviation."""
    eps = lattice.dt
    rot2 = params.rotation ** 2
    local = (6 * params.kinetic_accel / eps ** 4 + 2 * params.kinetic_vel / eps ** 2) @ rot2
    prec = eps * params.m * (local + gamma_coefficients(params))
    return 2.0 / np.sqrt(prec)


def site_action_delta(params: ModelParams, lattice: Lattice, y, i: int, t: int,
                      delta: float, quadratic: bool = False) -> float:
    """Action change used by the sampler for moving ``y[i, t]`` by ``delta``."""
    y = np.ascontiguousarray(np.asarray(y, dtype=float).reshape(params.n, lattice.n_steps))
    arr = _action_arrays(params)
    a = arr["rot"] @ y
    return float(_kernel.delta_action(
        y, a, arr["rot"], arr["kacc"], arr["kvel"], arr["dem"], arr["sup"], arr["aexp"],
        arr["bexp"], arr["gamma"], lattice.dt, arr["half_m"], lattice.periodic, quadratic,
        i, t, float(delta)))


def _run_one(params: ModelParams, lattice: Lattice, cfg: SamplerConfig,
             seed_seq: np.random.SeedSequence, quadratic: bool,
             steps: np.ndarray | None, tune: bool, y0: np.ndarray | None = None,
             record: bool = True) -> _Chain:
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    arr = _action_arrays(params)
    n, t_len = params.n, lattice.n_steps
    y = np.zeros((n, t_len)) if y0 is None else np.array(y0, dtype=float)
    a = arr["rot"] @ y
    if steps is None:
        steps = (np.full(n, cfg.step_size) if cfg.step_size is not None
                 else default_steps(params, lattice))
    steps = np.array(steps, dtype=float)
    n_meas = (cfg.n_sweeps - cfg.n_burnin) // cfg.n_thin if record else 0
    samples = np.empty((n_meas, n, t_len))
    accepted = np.zeros(n, dtype=np.int64)
    args = (arr["rot"], arr["kacc"], arr["kvel"], arr["dem"], arr["sup"], arr["aexp"],
            arr["bexp"], arr["gamma"], lattice.dt, arr["half_m"], lattice.periodic,
            quadratic)

    def run(n_sweeps, counter):
        nonlocal a
        normals = rng.standard_normal((n_sweeps, n, t_len))
        uniforms = rng.random((n_sweeps, n, t_len))
        _kernel.metropolis_sweeps(y, a, *args, steps, normals, uniforms, counter)

    # burn-in, tuning the widths toward the target acceptance
    done = 0
    while done < cfg.n_burnin:
        chunk = min(TUNE_INTERVAL, cfg.n_burnin - done)
        counter = np.zeros(n, dtype=np.int64)
        run(chunk, counter)
        if tune:
            rate = counter / (chunk * t_len)
            steps *= np.exp(2.0 * (rate - TARGET_ACCEPTANCE))
        done += chunk
        a = arr["rot"] @ y   # drop accumulated rounding in the channel image
    k = 0
    remaining = cfg.n_sweeps - cfg.n_burnin
    since = 0
    while remaining > 0:
        chunk = min(CHUNK_SWEEPS, remaining) if not record else min(cfg.n_thin, remaining)
        run(chunk, accepted)
        remaining -= chunk
        since += chunk
        if record and since >= cfg.n_thin and k < n_meas:
            samples[k] = y
            k += 1
            since = 0
        if since == 0 or not record:
            a = arr["rot"] @ y
    proposals = (cfg.n_sweeps - cfg.n_burnin) * t_len
    return _Chain(samples=samples[:k], accepted=accepted, proposals=proposals,
                  steps=steps, final=y.copy())


def _workers(n_chains: int) -> int:
    cap = os.environ.get("STATMICRO_THREADS")
    limit = int(cap) if cap and cap.isdigit() and int(cap) > 0 else (os.cpu_count() or 1)
    return max(1, min(n_chains, limit))


def _run_chains(params, lattice, cfg, quadratic, steps=None, tune=True):
    seqs = np.random.SeedSequence(int(cfg.seed)).spawn(cfg.n_chains)
    jobs = [(params, lattice, cfg, s, quadratic, None if steps is None else steps[c], tune)
            for c, s in enumerate(seqs)]
    workers = _workers(cfg.n_chains)
    if workers == 1:
        return [_run_one(*job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: _run_one(*job), jobs))


def _observables(samples: np.ndarray, p0: np.ndarray, max_lag: int, periodic: bool):
    """Per-sample site averages: y, p, and y_i(t) y_j(t+n) for n = 0..max_lag."""
    n_meas, n, t_len = samples.shape
    ybar = samples.mean(axis=2)
    pbar = p0[None, :] * np.exp(samples).mean(axis=2)
    if periodic:
        f = np.fft.rfft(samples, axis=2)
        cross = np.fft.irfft(np.conj(f)[:, :, None, :] * f[:, None, :, :], t_len, axis=3)
        cross = cross[..., : max_lag + 1] / t_len
    else:
        f = np.fft.rfft(samples, 2 * t_len, axis=2)
        cross = np.fft.irfft(np.conj(f)[:, :, None, :] * f[:, None, :, :], 2 * t_len, axis=3)
        cross = cross[..., : max_lag + 1] / (t_len - np.arange(max_lag + 1))
    return ybar, pbar, cross


def _connected(ybar, pbar, cross):
    return cross - ybar[:, None, None] * ybar[None, :, None]


def estimate(chains: list[_Chain], params: ModelParams, lattice: Lattice,
             cfg: SamplerConfig, quadratic: bool) -> CorrelatorEstimate:
    max_lag = cfg.max_lag if cfg.max_lag is not None else lattice.n_steps // 4
    if not 0 <= max_lag < lattice.n_steps:
        raise DomainError("max_lag must lie in [0, T)")
    p0 = stationary_prices(params)
    per_chain = max(2, -(-N_BLOCKS // len(chains)))
    short = min(len(ch.samples) for ch in chains)
    if short < per_chain:
        raise DomainError(f"{short} measurements per chain cannot fill {per_chain} "
                          "jackknife blocks; raise n_sweeps or lower n_thin")
    blocks_y, blocks_p, blocks_c = [], [], []
    ess_mean = np.zeros(params.n)
    ess_var = np.zeros(params.n)
    tau_mean = np.zeros(params.n)
    tau_var = np.zeros(params.n)
    for ch in chains:
        ybar, pbar, cross = _observables(ch.samples, p0, max_lag, lattice.periodic)
        blocks_y.append(block_means(ybar, per_chain))
        blocks_p.append(block_means(pbar, per_chain))
        blocks_c.append(block_means(cross, per_chain))
        for i in range(params.n):
            ess_mean[i] += effective_sample_size(ybar[:, i])
            ess_var[i] += effective_sample_size(cross[:, i, i, 0])
            tau_mean[i] += integrated_autocorr_time(ybar[:, i]) / len(chains)
            tau_var[i] += integrated_autocorr_time(cross[:, i, i, 0]) / len(chains)
    by, bp, bc = (np.concatenate(b) for b in (blocks_y, blocks_p, blocks_c))
    y_est, y_err = jackknife(by, lambda y: y)
    p_est, p_err = jackknife(bp, lambda p: p)
    c_est, c_err = jackknife((by, bp, bc), _connected)
    accepted = sum(ch.accepted for ch in chains)
    proposals = sum(ch.proposals for ch in chains)
    by_comm = accepted / proposals
    return CorrelatorEstimate(
        lags=np.arange(max_lag + 1) * lattice.dt,
        corr=c_est, corr_err=c_err,
        mean_logprice=y_est, mean_logprice_err=y_err,
        mean_price=p_est, mean_price_err=p_err,
        acceptance_rate=float(by_comm.mean()),
        acceptance_by_commodity=by_comm,
        ess={"mean_logprice": ess_mean, "equal_time_var": ess_var},
        tau_int={"mean_logprice": tau_mean, "equal_time_var": tau_var},
        steps=np.array([ch.steps for ch in chains]),
        n_samples=int(sum(len(ch.samples) for ch in chains)),
        quadratic=quadratic,
        config=asdict(cfg),
    )


def _check_acceptance(est: CorrelatorEstimate) -> None:
    lo, hi = ACCEPTANCE_RANGE
    rates = est.acceptance_by_commodity
    if np.any(rates < lo) or np.any(rates > hi):
        raise TuningError(
            f"acceptance {rates.tolist()} outside [{lo}, {hi}] after tuning",
            diagnostics={"acceptance": rates.tolist(), "steps": est.steps.tolist()})


def run_chain(params: ModelParams, lattice: Lattice, cfg: SamplerConfig,
              quadratic: bool = False) -> CorrelatorEstimate:
    """Sample paths with weight ``exp(-action)`` and estimate price correlators.

    ``quadratic=True`` samples the Gaussian truncation of the action instead.
    Step widths are tuned toward 50% acceptance during burn-in and frozen
    afterwards.  Raises :class:`TuningError` when the post-burn-in acceptance
    of any commodity leaves ``[0.1, 0.9]``.
    """
    chains = _run_chains(params, lattice, cfg, quadratic)
    est = estimate(chains, params, lattice, cfg, quadratic)
    _check_acceptance(est)
    return est


def gaussian_path(params: ModelParams, lattice: Lattice, rng: np.random.Generator) -> np.ndarray:
    """Exact draw from the truncated (Gaussian) path measure on a periodic lattice.

    White noise is coloured per frequency by the square root of the inverse
    precision block, which is real symmetric because the stencil symbols are
    real and even in frequency.
    """
    if not lattice.periodic:
        raise DomainError("exact Gaussian paths need a periodic lattice")
    from .propagator import frequency_precision
    w, v = np.linalg.eigh(lattice.dt * frequency_precision(params, lattice))
    root = np.einsum("fik,fk,fjk->fij", v, 1 / np.sqrt(w), v)
    noise = np.fft.fft(rng.standard_normal((params.n, lattice.n_steps)), axis=1)
    return np.fft.ifft(np.einsum("fij,jf->if", root, noise), axis=1).real


def sample_path(params: ModelParams, lattice: Lattice, cfg: SamplerConfig,
                quadratic: bool = False, initial=None) -> PricePath:
    """Final path of one chain after ``cfg.n_sweeps`` sweeps (no measurements kept).

    ``initial="gaussian"`` starts from an exact draw of the truncated measure,
    which shortens the burn-in needed for long lattices; an array starts
    from that path; ``None`` starts from the potential minimum.
    """
    seq = np.random.SeedSequence(int(cfg.seed)).spawn(1)[0]
    if isinstance(initial, str):
        if initial != "gaussian":
            raise DomainError(f"unknown initial path '{initial}'")
        start_seq = np.random.SeedSequence(int(cfg.seed), spawn_key=(2 ** 31,))
        initial = gaussian_path(params, lattice, np.random.default_rng(start_seq))
    chain = _run_one(params, lattice, cfg, seq, quadratic, None, True, y0=initial,
                     record=False)
    rate = chain.accepted / chain.proposals
    lo, hi = ACCEPTANCE_RANGE
    if np.any(rate < lo) or np.any(rate > hi):
        raise TuningError(f"acceptance {rate.tolist()} outside [{lo}, {hi}]",
                          diagnostics={"acceptance": rate.tolist()})
    return PricePath(chain.final)


@dataclass
class BudgetScan:
    m: np.ndarray
    variance: np.ndarray        # (len(m), N) equal-time Var[y]
    variance_err: np.ndarray
    estimates: list = field(repr=False, default_factory=list)

    def slope(self, commodity: int = 0) -> float:
        """Least-squares slope of log Var against log m."""
        return float(np.polyfit(np.log(self.m), np.log(self.variance[:, commodity]), 1)[0])


def variance_vs_budget(params: ModelParams, m_list, lattice: Lattice, cfg: SamplerConfig,
                       quadratic: bool = False) -> BudgetScan:
    """Equal-time log-price variance for each budget in ``m_list``."""
    m_list = np.asarray(m_list, dtype=float)
    if m_list.size < 2 or np.any(m_list < 10):
        raise DomainError("need at least two budgets, each >= 10")
    ests = [run_chain(params.with_budget(m), lattice, cfg, quadratic) for m in m_list]
    var = np.array([np.diag(e.corr[:, :, 0]) for e in ests])
    err = np.array([np.diag(e.corr_err[:, :, 0]) for e in ests])
    return BudgetScan(m=m_list, variance=var, variance_err=err, estimates=ests)


@dataclass
class AnharmonicityResult:
    m: float
    deviation: float             # |G_full(0)/G_quad(0) - 1| for the most affected commodity
    deviation_err: float
    relative: np.ndarray         # signed G_full(0)/G_quad(0) - 1 per commodity
    relative_err: np.ndarray
    method: str = "reweight"


def interaction_action(params: ModelParams, lattice: Lattice, samples: np.ndarray) -> np.ndarray:
    """Full minus truncated action for each stored path, shape ``(n_samples,)``."""
    arr = _action_arrays(params)
    y = samples
    a, b = params.a[None, :, None], params.b[None, :, None]
    dem, sup = arr["dem"][None, :, None], arr["sup"][None, :, None]
    gamma = arr["gamma"][None, :, None]
    # expm1 keeps the subtraction of the constant and quadratic parts accurate
    v = dem * (np.expm1(-a * y) + a * y) + sup * (np.expm1(b * y) - b * y) - gamma * y * y
    return lattice.dt * arr["half_m"] * v.sum(axis=(1, 2))


def anharmonicity_probe(params: ModelParams, lattice: Lattice, cfg: SamplerConfig,
                        m: float | None = None, method: str = "reweight",
                        control: bool = False) -> AnharmonicityResult:
    """Relative change of ``G_ii(0)`` caused by the beyond-quadratic part of the action.

    ``method="reweight"`` samples the truncated action once and obtains the
    full-action expectation exactly by weighting each path with
    ``exp(-(A - A_quad))``; the noise of the ratio then shrinks like the
    signal, roughly as ``1/m``.  ``method="paired"`` runs separate chains for
    both actions from the same seeds and frozen widths.  ``control=True``
    replaces the full action by the truncated one in either method, so the
    result must vanish.
    """
    if method not in ("reweight", "paired"):
        raise DomainError(f"unknown method '{method}'")
    if m is not None:
        params = params.with_budget(m)
    n = params.n
    diag = np.arange(n)
    p0 = stationary_prices(params)
    per_chain = max(2, -(-N_BLOCKS // cfg.n_chains))

    # tune once on the truncated action, then run with frozen widths
    tuned = _run_chains(params, lattice, replace(cfg, n_sweeps=cfg.n_burnin + 1),
                        quadratic=True)
    steps = [ch.steps for ch in tuned]
    quad = _run_chains(params, lattice, cfg, quadratic=True, steps=steps, tune=False)
    _check_acceptance(estimate(quad, params, lattice, cfg, True))

    def blocks(chains, weights=None):
        out = [[], [], []]
        for c, ch in enumerate(chains):
            ybar, _, cross = _observables(ch.samples, p0, 0, lattice.periodic)
            w = np.ones(len(ybar)) if weights is None else weights[c]
            for k, obs in enumerate((w, w[:, None] * ybar, w[:, None] * cross[:, diag, diag, 0])):
                out[k].append(block_means(obs, per_chain))
        return tuple(np.concatenate(b) for b in out)

    def variance(w, wy, wyy):
        return wyy / w - (wy / w) ** 2

    if method == "reweight":
        logw = [np.zeros(len(ch.samples)) if control
                else -interaction_action(params, lattice, ch.samples) for ch in quad]
        shift = max(lw.max() for lw in logw)
        weights = [np.exp(lw - shift) for lw in logw]
        data = blocks(quad) + blocks(quad, weights)
    else:
        full = _run_chains(params, lattice, cfg, quadratic=control, steps=steps, tune=False)
        _check_acceptance(estimate(full, params, lattice, cfg, control))
        data = blocks(quad) + blocks(full)
    rel, rel_err = jackknife(data, lambda w0, y0, c0, w1, y1, c1:
                             variance(w1, y1, c1) / variance(w0, y0, c0) - 1)
    k = int(np.argmax(np.abs(rel)))
    return AnharmonicityResult(m=params.m, deviation=float(abs(rel[k])),
                               deviation_err=float(rel_err[k]), relative=rel,
                               relative_err=rel_err, method=method)
