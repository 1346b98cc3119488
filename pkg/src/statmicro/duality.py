"""Constrained-optimization bridges: utility <-> demand, cost -> supply, market clearing.

The quadratic utility ``U = q.M.q/2 + h_lin.q`` of the closing model is kept
here too, along with a probe showing that its demand function does not give a
potential with a unique interior minimum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg, optimize

from .errors import ConvergenceError, DomainError, UnsupportedConfigurationError
from .model import ModelParams, demand


@dataclass(frozen=True)
class CostParams:
    """Producer cost ``C(q) = sum b/(1+b) beta q^(1+1/b)`` and supply weights ``alpha``."""

    beta: np.ndarray
    b: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        for name in ("beta", "b", "alpha"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=float))
            if not np.all(v > 0):
                raise DomainError(f"cost parameter '{name}' must be strictly positive")
            object.__setattr__(self, name, v)
        if not (self.beta.shape == self.b.shape == self.alpha.shape):
            raise DomainError("cost parameter vectors must have equal length")

    @classmethod
    def linked(cls, params: ModelParams, beta) -> "CostParams":
        """Cost model whose profit-maximizing supply reproduces ``params``' supply.

        Sets ``alpha_i = m s_i beta_i^b_i`` and takes ``b`` from ``params``.
        """
        beta = np.broadcast_to(np.asarray(beta, dtype=float), (params.n,))
        return cls(beta=beta, b=params.b, alpha=params.m * params.s * beta ** params.b)

    def linkage_residual(self, params: ModelParams) -> np.ndarray:
        """``alpha/beta^b - m s``; zero when linked to ``params``."""
        return self.alpha / self.beta ** self.b - params.m * params.s


@dataclass(frozen=True)
class MarketClearing:
    q_star: np.ndarray
    p_star: np.ndarray
    budget: float
    residual: float
    iterations: int
    trace: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "q_star": self.q_star.tolist(),
            "p_star": self.p_star.tolist(),
            "budget": self.budget,
            "residual": self.residual,
            "iterations": self.iterations,
        }


# --- utility -> demand -------------------------------------------------------

def _fd_gradient(func, q, rel_step=1e-5):
    g = np.empty_like(q)
    for i in range(q.size):
        h = rel_step * q[i]
        up = q.copy()
        dn = q.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (func(up) - func(dn)) / (2 * h)
    return g


def demand_from_utility(utility: Callable[[np.ndarray], float], p, m: float,
                        gradient: Callable[[np.ndarray], np.ndarray] | None = None,
                        max_iter: int = 2000) -> tuple[np.ndarray, float]:
    """Solve the budget-constrained first-order conditions of ``utility``.

    Finds ``q`` with ``grad U(q) = lambda p`` and ``p.q = m`` (unknowns are
    ``log q`` and ``lambda``, so ``q`` stays positive).  For a concave or
    quasi-concave utility this is the constrained maximum.  The gradient is
    taken by central differences unless ``gradient`` is given.

    Returns ``(q_bar, utility(q_bar))``.
    """
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if not np.all(p > 0) or m <= 0:
        raise DomainError("prices and budget must be strictly positive")
    n = p.size
    if n == 1:
        q = np.array([m / p[0]])
        return q, float(utility(q))
    grad = gradient if gradient is not None else (lambda q: _fd_gradient(utility, q))

    def residual(x):
        q = np.exp(x[:n])
        g = grad(q)
        return np.concatenate([g / p - x[n], [(p @ q - m) / m]])

    q0 = m / (n * p)
    lam0 = float(np.mean(grad(q0) / p))
    x0 = np.concatenate([np.log(q0), [lam0]])
    sol = optimize.root(residual, x0, method="hybr",
                        options={"xtol": 1e-14, "maxfev": max_iter * (n + 2)})
    q = np.exp(sol.x[:n])
    budget_gap = abs(p @ q - m)
    # hybr may report stalled progress once it reaches the gradient noise floor
    stationarity = np.max(np.abs(sol.fun[:n])) / max(abs(sol.x[n]), np.finfo(float).tiny)
    if not (sol.success or stationarity < 1e-9) or budget_gap >= 1e-8 * m:
        raise ConvergenceError(f"constrained utility solve failed: {sol.message}",
                               last=q, trace=[float(np.max(np.abs(sol.fun)))])
    # remove the last rounding-level budget drift
    q *= m / (p @ q)
    return q, float(utility(q))


# --- demand -> utility -------------------------------------------------------

def dual_prices(params: ModelParams, q) -> np.ndarray:
    """Closed-form prices minimizing demand on the budget plane (uniform exponent)."""
    if not params.uniform_a:
        raise UnsupportedConfigurationError(
            "closed-form dual prices need a uniform demand exponent")
    q = _as_quantities(params, q)
    a = params.a[0]
    c = params.m / np.sum(params.d ** (1 / (a + 1)) * q ** (a / (a + 1)))
    return c * (params.d / q) ** (1 / (a + 1))


def demand_minimizing_prices(params: ModelParams, q) -> np.ndarray:
    """Prices minimizing demand subject to ``p.q = m``, by a Lagrange-multiplier solve.

    Stationarity gives ``p_i = (a_i d_i / (lambda q_i))^(1/(a_i+1))`` for any
    exponents; the multiplier is the root of the budget equation, found by a
    bracketed solve in ``log lambda``.  Heterogeneous exponents are accepted.
    """
    q = _as_quantities(params, q)
    a, d, m = params.a, params.d, params.m

    def prices(log_lam):
        return np.exp((np.log(a * d / q) - log_lam) / (a + 1))

    def gap(log_lam):
        return np.log(prices(log_lam) @ q) - np.log(m)

    lo, hi = -1.0, 1.0
    while gap(lo) < 0:
        lo -= 2 * abs(lo)
    while gap(hi) > 0:
        hi += 2 * abs(hi)
    log_lam = optimize.brentq(gap, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                              maxiter=500)
    return prices(log_lam)


def utility_from_demand(params: ModelParams, q) -> float:
    """Indirect route to the utility: the demand at its budget-constrained optimum.

    The model demand is convex and decreasing in each price, so the optimum on
    the budget plane is a minimum; its value equals :func:`model.model_utility`.
    """
    return demand(params, demand_minimizing_prices(params, q))


def _as_quantities(params, q):
    q = np.atleast_1d(np.asarray(q, dtype=float))
    if q.shape != (params.n,):
        raise DomainError(f"expected {params.n} quantities, got shape {q.shape}")
    if not np.all(q > 0):
        raise DomainError("quantities must be strictly positive")
    return q


# --- cost -> supply ----------------------------------------------------------

def supply_from_profit(cost: CostParams, p) -> np.ndarray:
    """Profit-maximizing output ``(p/beta)^b``."""
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if not np.all(p > 0):
        raise DomainError("prices must be strictly positive")
    return (p / cost.beta) ** cost.b


def production_cost(cost: CostParams, q) -> float:
    q = np.atleast_1d(np.asarray(q, dtype=float))
    b = cost.b
    return float(np.sum(b / (1 + b) * cost.beta * q ** (1 + 1 / b)))


def profit(cost: CostParams, p, q) -> float:
    p = np.atleast_1d(np.asarray(p, dtype=float))
    q = np.atleast_1d(np.asarray(q, dtype=float))
    if np.any(q < 0):
        raise DomainError("quantities must be non-negative")
    return float(p @ q) - production_cost(cost, q)


def profit_curvature(cost: CostParams, q) -> np.ndarray:
    """Diagonal second derivative of profit; negative for positive output."""
    q = np.atleast_1d(np.asarray(q, dtype=float))
    return -cost.beta / cost.b * q ** (1 / cost.b - 1)


def aggregate_supply(cost: CostParams, q) -> float:
    """Total supply ``sum alpha q / 2`` in quantity space."""
    return 0.5 * float(cost.alpha @ np.atleast_1d(q))


# --- market clearing ---------------------------------------------------------

def demand_price(params: ModelParams, q) -> np.ndarray:
    """Price the aggregate consumer pays for quantities ``q`` (uniform exponent)."""
    return dual_prices(params, q)


def supply_price(cost: CostParams, q) -> np.ndarray:
    return cost.beta * np.asarray(q, dtype=float) ** (1 / cost.b)


def market_clearing(params: ModelParams, cost: CostParams, damping: float = 0.5,
                    max_iter: int = 10_000, tol: float = 1e-10) -> MarketClearing:
    """Quantities and prices where demand price equals supply price for every commodity.

    Damped fixed-point iteration in ``log q``: each step solves the
    per-commodity equation with the budget normalization held at its current
    value.  The residual is the infinity-norm of ``log(demand/supply price)``.
    """
    if not params.uniform_a:
        raise UnsupportedConfigurationError("market clearing needs a uniform demand exponent")
    if cost.beta.shape != (params.n,):
        raise DomainError("cost parameters do not match the number of commodities")
    a = params.a[0]
    d, beta, b, m = params.d, cost.beta, cost.b, params.m
    inv = 1.0 / (a + 1)
    z = np.log(m / (params.n * beta)) * b / (1 + b)  # spend m/N per commodity
    trace = []
    for it in range(1, max_iter + 1):
        q = np.exp(z)
        log_c = np.log(m) - np.log(np.sum(d ** inv * q ** (a * inv)))
        resid = log_c + inv * (np.log(d) - z) - np.log(beta) - z / b
        r = float(np.max(np.abs(resid)))
        trace.append(r)
        if not np.isfinite(r):
            break
        if r < tol:
            p = beta * q ** (1 / b)
            return MarketClearing(q_star=q, p_star=p, budget=float(p @ q), residual=r,
                                  iterations=it, trace=trace)
        z_target = (log_c + inv * np.log(d) - np.log(beta)) / (1 / b + inv)
        z = z + damping * (z_target - z)
    raise ConvergenceError("market clearing iteration did not converge",
                           last=np.exp(z), trace=trace)


# --- quadratic utility -------------------------------------------------------

def quadratic_utility(M, h_lin, q) -> float:
    M = np.asarray(M, dtype=float)
    q = np.asarray(q, dtype=float)
    return float(0.5 * q @ M @ q + np.asarray(h_lin, dtype=float) @ q)


def _quadratic_parts(M, h_lin, p):
    M = np.asarray(M, dtype=float)
    h_lin = np.asarray(h_lin, dtype=float)
    p = np.asarray(p, dtype=float)
    try:
        factor = linalg.cho_factor(M)
    except linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"utility matrix is not positive definite: {exc}") from None
    return factor, h_lin, p, linalg.cho_solve(factor, h_lin), linalg.cho_solve(factor, p)


def quadratic_demand_quantities(M, h_lin, p, m: float) -> np.ndarray:
    """Stationary quantities ``M^-1 (zeta p - h_lin)`` of the quadratic utility on the budget."""
    _, h_lin, p, minv_h, minv_p = _quadratic_parts(M, h_lin, p)
    zeta = (m + p @ minv_h) / (p @ minv_p)
    return zeta * minv_p - minv_h


def quadratic_demand(M, h_lin, p, m: float) -> float:
    """Demand derived from the quadratic utility."""
    _, h_lin, p, minv_h, minv_p = _quadratic_parts(M, h_lin, p)
    return float(0.5 * (m + p @ minv_h) ** 2 / (p @ minv_p) - 0.5 * h_lin @ minv_h)


def quadratic_potential(M, h_lin, s, b, m: float, p) -> float:
    """Quadratic-utility demand plus the power-law model supply."""
    p = np.asarray(p, dtype=float)
    return quadratic_demand(M, h_lin, p, m) + 0.5 * m * float(
        np.sum(np.asarray(s) * p ** np.asarray(b)))


@dataclass
class MinimaProbe:
    endpoints: np.ndarray           # final prices of each start
    boundary: np.ndarray            # bool, start ran to the edge of the box
    distinct_interior: np.ndarray   # distinct interior minimizers found
    values: np.ndarray

    @property
    def n_boundary(self) -> int:
        return int(self.boundary.sum())

    @property
    def unique_interior_minimum(self) -> bool:
        return self.n_boundary == 0 and len(self.distinct_interior) == 1


def probe_quadratic_minima(M, h_lin, s, b, m: float, n_starts: int = 50,
                           seed: int = 0, log_bound: float = 25.0,
                           escape_ratio: float = 1e-5,
                           cluster_tol: float = 1e-4) -> MinimaProbe:
    """Minimize :func:`quadratic_potential` from random starts in log-price.

    Starts are uniform in ``[-2, 2]`` per log price.  An endpoint counts as a
    boundary escape when some price fell below ``escape_ratio`` times the
    largest price, or a log price reached ``+-log_bound``: the quadratic-utility
    demand stays finite as a single price goes to zero, so runs slide toward
    that face and stall there.  Interior endpoints are clustered with relative
    tolerance ``cluster_tol``.
    """
    rng = np.random.default_rng(seed)
    n = np.asarray(h_lin).size

    def f(x):
        return quadratic_potential(M, h_lin, s, b, m, np.exp(x))

    ends, values, boundary = [], [], []
    bounds = [(-log_bound, log_bound)] * n
    for _ in range(n_starts):
        x0 = rng.uniform(-2, 2, size=n)
        res = optimize.minimize(f, x0, method="L-BFGS-B", bounds=bounds,
                                options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 5000})
        ends.append(np.exp(res.x))
        values.append(res.fun)
        p_end = np.exp(res.x)
        boundary.append(bool(np.any(np.abs(res.x) > log_bound - 1)
                             or np.min(p_end) < escape_ratio * np.max(p_end)))
    ends = np.array(ends)
    boundary = np.array(boundary)
    distinct: list[np.ndarray] = []
    for p, on_edge in zip(ends, boundary):
        if on_edge:
            continue
        if not any(np.allclose(p, q, rtol=cluster_tol, atol=0) for q in distinct):
            distinct.append(p)
    return MinimaProbe(endpoints=ends, boundary=boundary,
                       distinct_interior=np.array(distinct).reshape(-1, n),
                       values=np.array(values))
