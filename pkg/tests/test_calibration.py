import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from statmicro.calibration import (
    KAPPA_STARTS,
    PriceSeries,
    _ou_guess,
    bartlett_cutoff,
    calibrate,
    cost_from_market,
    empirical_autocovariance,
    fit_channel,
    fitted_curves,
    read_price_csv,
    recover_supply_demand,
    synthesize_series,
    write_price_csv,
)
from statmicro.duality import supply_from_profit
from statmicro.errors import DomainError, IdentifiabilityError, LengthError, ValidationError
from statmicro.lattice import Lattice
from statmicro.model import ModelParams, gamma_coefficients, stationary_prices
from statmicro.propagator import channel_propagator, matrix_propagator


def one(m=100.0, kappa=1e-3, mu=1.0, d=1.0, s=1.0, a=1.0, b=1.0):
    return ModelParams(a=[a], b=[b], d=[d], s=[s], m=m, kinetic_accel=[kappa],
                       kinetic_vel=[mu])


def write(tmp_path, text, name="p.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


# ---------------------------------------------------------------- CSV input

def test_csv_round_trip(tmp_path, rng):
    series = PriceSeries(np.arange(20) * 0.5, np.exp(rng.normal(size=(2, 20))), ("oil", "gas"))
    write_price_csv(series, tmp_path / "s.csv")
    back = read_price_csv(tmp_path / "s.csv")
    assert back.labels == ("oil", "gas")
    np.testing.assert_array_equal(back.prices, series.prices)
    assert back.dt == 0.5


def test_iso_timestamps(tmp_path):
    path = write(tmp_path, "timestamp,x\n2024-01-01T00:00:00Z,1.0\n"
                           "2024-01-01T01:00:00Z,2.0\n2024-01-01T02:00:00Z,1.5\n")
    series = read_price_csv(path)
    assert series.dt == 3600.0 and series.n_obs == 3


@pytest.mark.parametrize("body, field, line", [
    ("timestamp,x,y\n0,1,1\n1,1\n", "y", 3),
    ("timestamp,x\n0,1\n1,abc\n", "x", 3),
    ("timestamp,x\n0,1\n1,-2\n", "x", 3),
    ("timestamp,x\n0,1\n1,1\n3,1\n", "timestamp", 4),
    ("timestamp,x\n0,1\n1,1\n1,1\n", "timestamp", 4),
    ("timestamp,x\n0,1\n2024-01-01,1\n", "timestamp", 3),
    ("timestamp,x\n0,1\nyesterday,1\n", "timestamp", 3),
])
def test_csv_errors_name_row_and_column(tmp_path, body, field, line):
    path = write(tmp_path, body)
    with pytest.raises(ValidationError) as info:
        read_price_csv(path)
    assert info.value.field == field and info.value.line == line
    assert f":{line}" in str(info.value)


def test_csv_header_required(tmp_path):
    with pytest.raises(ValidationError):
        read_price_csv(write(tmp_path, "time,x\n0,1\n1,1\n"))


def test_series_invariants():
    with pytest.raises(DomainError):
        PriceSeries(np.arange(3.0), np.array([[1.0, 0.0, 1.0]]))
    with pytest.raises(DomainError):
        PriceSeries(np.array([0.0, 1.0, 2.5]), np.ones((1, 3)))
    # jitter far below the relative spacing tolerance is accepted
    PriceSeries(np.array([0.0, 1.0, 2.0 + 1e-12]), np.ones((1, 3)))


# ------------------------------------------------------- autocovariance

def test_constant_series_gives_zero():
    series = PriceSeries(np.arange(100.0), np.full((2, 100), 3.7))
    table = empirical_autocovariance(series, 5)
    assert np.all(table.g == 0.0)
    with pytest.raises(IdentifiabilityError):
        calibrate(series, 10, 1, 1, max_lag=5)


def test_white_noise_autocovariance(rng):
    sigma, n = 0.3, 100_000
    series = PriceSeries(np.arange(n, dtype=float), np.exp(rng.normal(scale=sigma, size=(1, n))))
    g = empirical_autocovariance(series, 10).g[0, 0]
    tol = 4 * sigma ** 2 * np.sqrt(2 / n)
    assert abs(g[0] - sigma ** 2) < tol
    assert np.all(np.abs(g[1:]) < 4 * sigma ** 2 / np.sqrt(n))


def test_length_error():
    series = PriceSeries(np.arange(99.0), np.ones((1, 99)))
    with pytest.raises(LengthError):
        empirical_autocovariance(series, 10)


def test_lag0_block_is_psd(rng):
    x = rng.normal(size=(3, 500)).cumsum(axis=1) * 0.01
    x[2] = x[0] + x[1]                      # rank-deficient on purpose
    series = PriceSeries(np.arange(500.0), np.exp(x))
    g0 = empirical_autocovariance(series, 20).g[:, :, 0]
    np.testing.assert_allclose(g0, g0.T, atol=1e-15)
    assert np.linalg.eigvalsh(g0).min() > -1e-12 * np.abs(g0).max()


@settings(max_examples=25, deadline=None)
@given(shift=st.floats(-20, 20), seed=st.integers(0, 2 ** 32 - 1))
def test_shift_invariance(shift, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 200))
    base = empirical_autocovariance(PriceSeries(np.arange(200.0), np.exp(x)), 10).g
    moved = empirical_autocovariance(PriceSeries(np.arange(200.0), np.exp(x + shift)), 10).g
    np.testing.assert_allclose(moved, base, atol=1e-12 * max(1.0, abs(shift)) ** 2)


def test_synthetic_series_matches_lattice_propagator():
    params = one(m=100.0)
    n_obs, dt = 50_000, 0.1
    series = synthesize_series(params, n_obs, dt, seed=4)
    g = empirical_autocovariance(series, 30).g[0, 0]
    ref = matrix_propagator(params, Lattice(n_obs, dt), np.arange(31)).g[0, 0]
    # integrated correlation time of the lag products is about sqrt(mu/gamma) = 1
    err = ref[0] * np.sqrt(2 * 2.0 / (n_obs * dt))
    assert np.all(np.abs(g - ref) < 4 * err)


def test_bartlett_cutoff():
    tau = np.arange(50) * 0.1
    acov = np.exp(-tau)
    n_obs = 10_000
    expected = next(k for k in range(1, 50)
                    if acov[k] < 2 * np.sqrt((1 + 2 * sum(acov[j] ** 2 for j in range(1, k)))
                                             / n_obs))
    assert bartlett_cutoff(acov, n_obs) == expected
    assert bartlett_cutoff(np.exp(-tau), 10 ** 12) == 49
    assert bartlett_cutoff(np.zeros(5), 100) == 0


# ------------------------------------------------------------ channel fit

def test_fit_exact_curve():
    lags = np.arange(60) * 0.1
    for kappa, mu, gamma in [(0.05, 1.0, 1.0), (1.0, 0.5, 1.0), (0.3, 2.0, 0.5)]:
        chat = channel_propagator(kappa, mu, gamma, 50.0, lags)
        fit = fit_channel(lags, chat, 50.0)
        np.testing.assert_allclose([fit.kappa, fit.mu, fit.gamma], [kappa, mu, gamma],
                                   rtol=1e-5)
        assert fit.residual_norm < 1e-8
        assert fit.optimality < 1e-10 * 10


def test_fit_scaling_gauge():
    lags = np.arange(40) * 0.1
    chat = channel_propagator(0.2, 1.0, 1.5, 200.0, lags)   # data generated at 2m
    at_m = fit_channel(lags, chat, 100.0)
    at_2m = fit_channel(lags, chat, 200.0)
    np.testing.assert_allclose([at_m.kappa, at_m.mu, at_m.gamma],
                               2 * np.array([at_2m.kappa, at_2m.mu, at_2m.gamma]), rtol=1e-5)
    assert at_m.scaled()["m_mu"] == pytest.approx(at_2m.scaled()["m_mu"], rel=1e-5)


def test_fit_objective_never_increases():
    lags = np.arange(40) * 0.1
    rng = np.random.default_rng(1)
    chat = channel_propagator(0.2, 1.0, 1.5, 100.0, lags) * (1 + 0.02 * rng.normal(size=40))

    def cost(kappa, mu, gamma):
        r = (channel_propagator(kappa, mu, gamma, 100.0, lags) - chat) / chat[0]
        return 0.5 * np.sum(r ** 2)

    fit = fit_channel(lags, chat, 100.0)
    gamma0, mu0 = _ou_guess(lags, chat, 100.0)
    for f, entry in zip(KAPPA_STARTS, fit.trace):
        assert entry["start"] == f
        assert entry["cost"] == pytest.approx(cost(*entry["x"]), rel=1e-9)
        assert entry["cost"] <= cost(f * mu0 ** 2 / (4 * gamma0), mu0, gamma0)


def test_fit_rejects_degenerate_input():
    lags = np.arange(10.0)
    with pytest.raises(IdentifiabilityError):
        fit_channel(lags, np.zeros(10), 1.0)
    with pytest.raises(IdentifiabilityError):
        fit_channel(lags, np.full(10, 2.0), 1.0)
    with pytest.raises(IdentifiabilityError):
        fit_channel(lags[:3], np.array([1.0, 0.5, 0.2]), 1.0)


def test_ou_round_trip():
    params = one(kappa=1e-6)
    series = synthesize_series(params, 100_000, 0.1, seed=1)
    res = calibrate(series, 100.0, 1, 1)
    assert res.mu[0] == pytest.approx(1.0, rel=0.1)
    assert res.gamma[0] == pytest.approx(1.0, rel=0.1)
    assert res.branch == ("real",)


def test_quartic_branch_round_trip():
    params = one(kappa=1.0, mu=0.5)
    assert 0.5 ** 2 < 4 * 1.0 * gamma_coefficients(params)[0]
    series = synthesize_series(params, 100_000, 0.1, seed=1)
    res = calibrate(series, 100.0, 1, 1)
    assert res.branch == ("complex",)
    # the oscillating signature: the fitted and the empirical curves both dip below zero
    rows = list(fitted_curves(series, res, 80))
    assert min(r[2] for r in rows) < 0 and min(r[3] for r in rows) < 0


# ------------------------------------------------- demand/supply recovery

def test_recover_examples():
    d, s = recover_supply_demand(1, 1, 1, 1)
    np.testing.assert_allclose([d[0], s[0]], [1, 1], rtol=1e-14)
    d, s = recover_supply_demand(2, 2, 1, 1)
    np.testing.assert_allclose([d[0], s[0]], [4, 1], rtol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0.2, 5), min_size=4, max_size=4))
def test_recover_round_trip(v):
    a, b, d, s = v
    params = ModelParams(a=[a], b=[b], d=[d], s=[s], m=1)
    d_hat, s_hat = recover_supply_demand(stationary_prices(params), gamma_coefficients(params),
                                         a, b)
    np.testing.assert_allclose([d_hat[0], s_hat[0]], [d, s], rtol=1e-10)
    back = ModelParams(a=[a], b=[b], d=d_hat, s=s_hat, m=1)
    np.testing.assert_allclose(stationary_prices(back), stationary_prices(params), rtol=1e-10)
    np.testing.assert_allclose(gamma_coefficients(back), gamma_coefficients(params), rtol=1e-10)


def test_recover_rejects_bad_inputs():
    for args in [(-1, 1, 1, 1), (1, 0, 1, 1), (1, 1, np.nan, 1)]:
        with pytest.raises(DomainError, match="inconsistent"):
            recover_supply_demand(*args)


def test_cost_from_market():
    params = one(d=4.0, s=1.0)
    q0 = 3.0
    cost = cost_from_market(params, q0)
    p0 = stationary_prices(params)
    # profit-maximising supply at p0 sells exactly q0
    q = np.atleast_1d(supply_from_profit(cost, p0))
    np.testing.assert_allclose(q, q0, rtol=1e-12)
    with pytest.raises(DomainError):
        cost_from_market(params, 0.0)


def test_calibration_result_export(tmp_path):
    params = one()
    series = synthesize_series(params, 4000, 0.1, seed=2)
    res = calibrate(series, 100.0, 1, 1, max_lag=40, q0=2.0, n_boot=5, seed=1)
    res.to_json(tmp_path / "c.json", extra={"seed": 1})
    doc = json.loads((tmp_path / "c.json").read_text())
    assert doc["seed"] == 1 and len(doc["d_hat"]) == 1 and doc["cost"] is not None
    assert np.isfinite(res.residual_norm)
    assert np.all(np.isfinite(res.covariance))
    assert res.params().n == 1
