import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import renyi_mixture_quadrature
from privfedgcn import privacy as pv
from privfedgcn.errors import AccountingError, CalibrationError, ParameterError


def test_clip_global_cases():
    g = np.array([3.0, 4.0])  # norm 5
    np.testing.assert_array_equal(pv.clip_global(g, 10.0), g)
    np.testing.assert_array_equal(pv.clip_global(g, 2.5), g * 0.5)


def test_clip_global_random_norm():
    g = np.random.default_rng(0).normal(size=1000)
    for c in (0.1, 1.0, 100.0):
        out = pv.clip_global(g, c)
        assert abs(np.linalg.norm(out) - min(np.linalg.norm(g), c)) < 1e-12
        cos = out @ g / (np.linalg.norm(out) * np.linalg.norm(g))
        assert abs(cos - 1) < 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 2000), st.floats(0.01, 100), st.floats(1e-3, 1e3), st.integers(0, 2**31 - 1))
def test_clip_never_exceeds_bound(dim, clip, scale, seed):
    g = np.random.default_rng(seed).normal(size=dim) * scale
    assert np.linalg.norm(pv.clip_global(g, clip)) <= clip * (1 + 1e-12)


def test_add_gaussian_identity_and_seed():
    g = np.ones(5)
    assert pv.add_gaussian(g, 0.0, 1.0, np.random.default_rng(0)) is g
    a = pv.add_gaussian(g, 1.0, 1.0, np.random.default_rng(4))
    b = pv.add_gaussian(g, 1.0, 1.0, np.random.default_rng(4))
    np.testing.assert_array_equal(a, b)


def test_add_gaussian_variance():
    sigma, clip = 1.4216, 1.0
    noise = pv.add_gaussian(np.zeros(100_000), sigma, clip, np.random.default_rng(1))
    assert abs(noise.var() / (sigma * clip) ** 2 - 1) < 0.03


def test_rdp_closed_forms():
    assert pv.rdp_subsampled_gaussian(1.0, 1.0, 2) == 1.0
    assert pv.rdp_subsampled_gaussian(1e-8, 1.0, 8) < 1e-10
    for a in pv.DEFAULT_ORDERS:
        assert abs(pv.rdp_subsampled_gaussian(1.0, 0.7, a) - a / (2 * 0.49)) <= 1e-12
    with pytest.raises(AccountingError):
        pv.rdp_subsampled_gaussian(0.5, 0.0, 2)


def test_rdp_curve_matches_scalar_path():
    curve = pv.rdp_curve(0.01, 1.1)
    scalar = [pv.rdp_subsampled_gaussian(0.01, 1.1, a) for a in pv.DEFAULT_ORDERS]
    np.testing.assert_allclose(curve, scalar, rtol=1e-12)


@pytest.mark.parametrize("sigma", [0.7852, 1.4216])
@pytest.mark.parametrize("alpha", [2, 7, 16, 32])
def test_rdp_against_quadrature(sigma, alpha):
    bound = pv.rdp_subsampled_gaussian(0.01, sigma, alpha)
    oracle = renyi_mixture_quadrature(0.01, sigma, alpha)
    assert bound >= oracle * (1 - 1e-9)
    assert abs(bound - oracle) <= 0.10 * oracle
    assert bound >= renyi_mixture_quadrature(0.01, sigma, alpha, reverse=True)


def test_rdp_monotonicity_grid():
    sigmas = [0.5, 0.8, 1.2, 2.0, 5.0]
    qs = [0.001, 0.01, 0.1, 0.5, 1.0]
    for q in qs:
        for s in sigmas:
            curve = pv.rdp_curve(q, s)
            assert np.all(np.diff(curve) >= -1e-15)
    for q in qs:
        rows = np.array([pv.rdp_curve(q, s) for s in sigmas])
        assert np.all(np.diff(rows, axis=0) <= 1e-15)
    for s in sigmas:
        cols = np.array([pv.rdp_curve(q, s) for q in qs])
        assert np.all(np.diff(cols, axis=0) >= -1e-15)


def _minimize_over_grid(t, delta):
    return min(t * a / 2 + math.log(1 / delta) / (a - 1) for a in range(2, 257))


def test_compose_and_convert_gaussian_case():
    state = pv.AccountantState()
    state.compose(1.0, 1.0)
    eps = pv.compose_and_convert(state, 1, 1e-3)
    assert abs(eps - _minimize_over_grid(1, 1e-3)) < 1e-12
    assert abs(eps - 4.227) < 1e-3
    assert state.epsilon(1e-3)[1] == 5


def test_compose_and_convert_monotone():
    state = pv.AccountantState()
    state.compose(0.01, 1.0)
    e1 = pv.compose_and_convert(state, 10, 1e-3)
    e2 = pv.compose_and_convert(state, 20, 1e-3)
    assert e2 > e1
    assert pv.compose_and_convert(state, 10, 1e-2) <= e1
    with pytest.raises(ParameterError):
        pv.compose_and_convert(pv.AccountantState(orders=[]), 1, 1e-3)


def test_accountant_accumulates():
    state = pv.AccountantState()
    prev = 0.0
    for _ in range(5):
        state.compose(0.01, 1.2)
        eps, _ = state.epsilon(1e-3)
        assert eps >= prev
        prev = eps
    assert state.steps == 5
    assert np.all(state.rdp >= 0)


@pytest.mark.parametrize("eps", [0.1, 0.5, 1.0, 1.5, 2.0, 2.5])
def test_calibrate_round_trip(eps):
    sigma = pv.calibrate_sigma(eps, 1e-3, 0.01, 500)
    spent = pv.epsilon_for(sigma, 0.01, 500, 1e-3)
    assert spent <= eps
    assert spent > 0.95 * eps


def test_calibrate_ordering_and_errors():
    s = [pv.calibrate_sigma(e, 1e-3, 0.01, 200) for e in (0.5, 1.5, 2.0)]
    assert s[0] > s[1] > s[2]
    with pytest.raises(CalibrationError):
        pv.calibrate_sigma(1e-4, 1e-3, 1.0, 10_000)
    with pytest.raises(ParameterError):
        pv.calibrate_sigma(0.0, 1e-3, 0.01, 1)


def test_privacy_spec_invariants():
    assert not pv.PrivacySpec().private
    assert pv.PrivacySpec(epsilon=0.5, sigma=1.4).private
    with pytest.raises(ParameterError):
        pv.PrivacySpec(epsilon=0.5, sigma=0.0)
    with pytest.raises(ParameterError):
        pv.PrivacySpec(delta=1.0)


def test_audit_log(tmp_path):
    path = tmp_path / "acc.csv"
    pv.write_audit_log(path, [(1, 12, 0.25, 0.8)])
    lines = path.read_text().splitlines()
    assert lines[0] == "round,alpha_star,gamma_cum,epsilon_spent"
    assert lines[1] == "1,12,0.25,0.80000000000000004"
