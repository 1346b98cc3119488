import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from conftest import random_params
from statmicro.errors import DomainError, LagRangeError
from statmicro.lattice import Lattice, apply_precision
from statmicro.model import ModelParams, stationary_prices
from statmicro.propagator import (
    channel_branch,
    channel_propagator,
    continuum_propagator,
    dense_propagator,
    full_lattice_propagator,
    gaussian_generating_functional,
    generating_exponent,
    log_price_correlator,
    matrix_propagator,
    mean_price,
)


def quad_oracle(kappa, mu, gamma, m, tau):
    """Fourier cosine integral by QUADPACK's oscillatory rule."""
    f = lambda w: 1.0 / (kappa * w ** 4 + mu * w ** 2 + gamma)
    with warnings.catch_warnings():
        # QAWF flags slow cycles in the far tail, which carry no weight here
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        if tau == 0:
            val, _ = integrate.quad(f, 0, np.inf, epsabs=1e-14, epsrel=1e-12, limit=500)
        else:
            val, _ = integrate.quad(f, 0, np.inf, weight="cos", wvar=abs(tau), epsabs=1e-14,
                                    limlst=200)
    return val / (np.pi * m)


def ou_params(m=100.0, kappa=1e-12, mu=1.0, n=1):
    return ModelParams(a=np.ones(n), b=np.ones(n), d=np.ones(n), s=np.ones(n), m=m,
                       kinetic_accel=np.full(n, kappa), kinetic_vel=np.full(n, mu))


def test_channel_examples():
    # the kappa -> 0 limit is approached like sqrt(kappa)
    assert channel_propagator(1e-20, 1, 1, 100, 0.0) == pytest.approx(0.005, rel=1e-9)
    assert quad_oracle(1e-14, 1, 1, 100, 0.0) == pytest.approx(0.005, rel=1e-8)
    assert channel_propagator(1, 0, 1, 1, 0.0) == pytest.approx(1 / (2 * np.sqrt(2)), rel=1e-14)
    assert quad_oracle(1, 0, 1, 1, 0.0) == pytest.approx(0.353553, abs=1e-6)


@pytest.mark.parametrize("kappa, mu, gamma", [(0.1, 2, 1), (1, 1, 1), (0.25, 1, 1), (3, 0.5, 2)])
def test_channel_even_and_matches_quadrature(kappa, mu, gamma):
    for tau in (0.0, 0.3, 1.7, 4.0):
        g = channel_propagator(kappa, mu, gamma, 2.0, tau)
        assert g == pytest.approx(channel_propagator(kappa, mu, gamma, 2.0, -tau), rel=1e-15)
        assert g == pytest.approx(quad_oracle(kappa, mu, gamma, 2.0, tau), abs=1e-10)


def test_branch_selection():
    assert channel_branch(0.1, 2, 1) == "real"
    assert channel_branch(1, 1, 1) == "complex"
    assert channel_branch(0.25, 1, 1) == "degenerate"


def test_degenerate_branch_continuity():
    tau = np.linspace(0, 5, 11)
    mid = channel_propagator(0.25, 1, 1, 1, tau)
    for eps in (1e-7, -1e-7):
        near = channel_propagator(0.25 * (1 + eps), 1, 1, 1, tau)
        np.testing.assert_allclose(near, mid, rtol=1e-5)


def test_small_kappa_is_ou():
    tau = np.linspace(0, 10, 21)
    g = channel_propagator(1e-20, 1.0, 1.0, 100, tau)
    np.testing.assert_allclose(g, np.exp(-tau) / 200, rtol=1e-9)


def test_channel_domain():
    with pytest.raises(DomainError):
        channel_propagator(0, 1, 1, 1, 0)
    with pytest.raises(DomainError):
        channel_propagator(1, -1, 1, 1, 0)


def test_real_branch_envelope_decays():
    tau = np.linspace(0, 20, 400)
    g = channel_propagator(0.05, 1, 1, 1, tau)
    assert np.all(np.diff(g) < 0) and g[0] == g.max()


def test_lattice_ou_converges():
    errs = []
    for eps in (0.1, 0.05, 0.025):
        T = int(round(40 / eps))
        tab = matrix_propagator(ou_params(m=1.0), Lattice(T, eps), [0, int(1 / eps)])
        exact = np.exp(-tab.lags) / 2
        errs.append(np.max(np.abs(tab.g[0, 0] - exact)))
    assert errs[0] > errs[1] > errs[2]
    # symmetric stencils make the error second order in the spacing
    assert errs[0] / errs[1] == pytest.approx(4, rel=0.1)
    assert errs[1] / errs[2] == pytest.approx(4, rel=0.1)
    assert errs[2] < 1e-3


def test_lattice_matches_continuum_at_small_spacing():
    params = ModelParams(a=[1], b=[1], d=[1], s=[1], m=3, kinetic_accel=[0.05],
                         kinetic_vel=[1.0])
    lat = Lattice(4000, 0.01)
    steps = np.arange(0, 1001, 50)   # up to ten correlation times
    tab = matrix_propagator(params, lat, steps)
    cont = continuum_propagator(params, tab.lags)
    assert np.max(np.abs(tab.g - cont.g)) < 0.01 * cont.g[0, 0, 0]


def test_inverse_identity(rng):
    params = random_params(rng, 2)
    lat = Lattice(128, 0.1)
    full = full_lattice_propagator(params, lat)  # (T, N, N)
    for j in range(2):
        for t0 in (0, 37):
            col = np.roll(full[:, :, j].T, t0, axis=1)   # G_ij(t - t0)
            out = lat.dt * apply_precision(params, lat, col)
            expect = np.zeros_like(out)
            expect[j, t0] = 1
            np.testing.assert_allclose(out, expect, atol=1e-8)


def test_dense_and_fourier_agree(rng):
    params = random_params(rng, 2)
    lat = Lattice(16, 0.2)
    dense = dense_propagator(params, lat)
    full = full_lattice_propagator(params, lat)
    for n in range(16):
        np.testing.assert_allclose(dense[:, 3, :, (3 + n) % 16], full[n], atol=1e-13)


def test_rotation_couples_channels():
    rot = np.array([[np.cos(0.4), -np.sin(0.4)], [np.sin(0.4), np.cos(0.4)]])
    params = ModelParams(a=[1, 1], b=[1, 2], d=[1, 3], s=[1, 1], m=2,
                         kinetic_accel=[0.3, 1.0], kinetic_vel=[1.0, 0.2], rotation=rot)
    lat = Lattice(64, 0.1)
    tab = matrix_propagator(params, lat, [0, 5])
    dense = dense_propagator(params, lat)
    np.testing.assert_allclose(tab.g[:, :, 1], dense[:, 10, :, 15], rtol=1e-8)
    assert abs(tab.g[0, 1, 0]) > 1e-3 * tab.g[0, 0, 0]
    # naive per-channel formula ignores the rotation and is wrong here
    ident = ModelParams(a=[1, 1], b=[1, 2], d=[1, 3], s=[1, 1], m=2,
                        kinetic_accel=[0.3, 1.0], kinetic_vel=[1.0, 0.2])
    naive = matrix_propagator(ident, lat, [0, 5])
    assert np.max(np.abs(naive.g - tab.g)) > 1e-3 * tab.g[0, 0, 0]
    quad = continuum_propagator(params, [0.0, 0.5], method="continuum-quadrature")
    np.testing.assert_allclose(quad.g, quad.g.transpose(1, 0, 2), atol=1e-12)


def test_equal_time_positive_definite(rng):
    for _ in range(20):
        params = random_params(rng, 3)
        g0 = matrix_propagator(params, Lattice(32, 0.1), [0]).equal_time()
        np.testing.assert_allclose(g0, g0.T, atol=1e-15)
        assert np.linalg.eigvalsh(g0).min() > 0


def test_symmetry_g_ij_tau_equals_g_ji_minus_tau(rng):
    params = random_params(rng, 2)
    lat = Lattice(32, 0.1)
    for n in (1, 3, 7):
        a = log_price_correlator(params, lat, 0, 1, n * lat.dt)
        b = log_price_correlator(params, lat, 1, 0, -n * lat.dt)
        assert a == pytest.approx(b, rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2 ** 16))
def test_exact_one_over_m_scaling(seed):
    rng = np.random.default_rng(seed)
    params = random_params(rng, 2)
    lat = Lattice(32, 0.1)
    g1 = matrix_propagator(params, lat).g
    g2 = matrix_propagator(params.with_budget(2 * params.m), lat).g
    np.testing.assert_allclose(g2, g1 / 2, rtol=1e-13, atol=1e-17)


def test_decoupled_channels_have_zero_cross_correlation():
    params = ModelParams(a=[1, 2], b=[1, 1], d=[1, 2], s=[2, 1], m=5,
                         kinetic_accel=[1, 2], kinetic_vel=[0.5, 1])
    assert log_price_correlator(params, Lattice(32, 0.1), 0, 1, 0.3) == 0.0


def test_log_price_correlator_errors():
    lat = Lattice(32, 0.1)
    with pytest.raises(LagRangeError):
        log_price_correlator(ou_params(), lat, 0, 0, 0.05)
    with pytest.raises(LagRangeError):
        log_price_correlator(ou_params(), lat, 0, 0, 3.2)
    with pytest.raises(LagRangeError):
        log_price_correlator(ou_params(), lat, 0, 1, 0.0)


def test_mean_price_examples():
    params = ou_params(kappa=1e-20)
    assert mean_price(params, [0.0])[0] == stationary_prices(params)[0]
    g0 = continuum_propagator(params, [0.0]).g[:, :, 0]
    assert mean_price(params, g0)[0] == pytest.approx(np.exp(0.005), rel=1e-10)
    assert mean_price(params, g0, exact_gaussian=True)[0] == pytest.approx(np.exp(0.0025))
    values = [mean_price(params.with_budget(m), continuum_propagator(
        params.with_budget(m), [0.0]).g[:, :, 0])[0] for m in (10, 100, 1000, 10000)]
    assert np.all(np.diff(values) < 0) and values[-1] - 1 < 1e-4


def test_generating_functional(rng):
    params = random_params(rng, 2)
    lat = Lattice(32, 0.1)
    assert gaussian_generating_functional(params, lat, np.zeros((2, 32))) == 1.0
    full = full_lattice_propagator(params, lat)
    h = np.zeros((2, 32))
    h[1, 5] = 2.0
    assert gaussian_generating_functional(params, lat, h) == pytest.approx(
        np.exp(0.5 * 4 * full[0, 1, 1] * lat.dt ** 2), rel=1e-12)
    h[0, 9] = 1.5
    # the cross term isolates G_01 at the separation of the two sources
    cross = (generating_exponent(params, lat, h) - 4 * full[0, 1, 1] * lat.dt ** 2
             - 1.5 ** 2 * full[0, 0, 0] * lat.dt ** 2) / (2 * 2.0 * 1.5 * lat.dt ** 2)
    assert cross == pytest.approx(full[4, 1, 0], rel=1e-12)
    # direct quadratic form with the dense covariance
    dense = dense_propagator(params, lat).reshape(64, 64)
    assert generating_exponent(params, lat, h) == pytest.approx(
        h.ravel() @ dense @ h.ravel() * lat.dt ** 2, rel=1e-12)


def test_table_export(tmp_path):
    params = ModelParams(a=[1, 1], b=[1, 1], d=[1, 2], s=[1, 1], m=3)
    tab = matrix_propagator(params, Lattice(16, 0.5), [2, 0, 1])
    rows = list(tab.rows())
    assert [r[:3] for r in rows[:3]] == [(0.0, 0, 0), (0.5, 0, 0), (1.0, 0, 0)]
    assert [r[1:3] for r in rows[::3]] == [(0, 0), (0, 1), (1, 0), (1, 1)]
    tab.to_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "tau,i,j,G" and len(lines) == 13
    tab.to_json(tmp_path / "t.json")
    doc = json.loads((tmp_path / "t.json").read_text())
    assert doc["lags"] == [0.0, 0.5, 1.0] and doc["method"] == "lattice-fourier"
    assert tab.at(0, 0, 0.5) == tab.g[0, 0, 2]
