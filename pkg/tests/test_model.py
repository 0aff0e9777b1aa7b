import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import nbinom

from esmc2.errors import DomainError, InvalidStateError
from esmc2.model import (
    E, I, LOG_BETA, R, S, Z, LatentState, ModelConfig, ObsModel, ParamVector, SEIRModel, effective_reproduction,
    negbin_logpmf, obs_conditional_variance, obs_log_density, obs_sample, observation_operator,
    poisson_logpmf, simulate_epidemic, transition,
)
from esmc2.rng import as_generator
from esmc2.scenarios import EXAMPLE1, EXAMPLE2

N = 500_000.0
CFG = ModelConfig(N=N)
TH = ParamVector(alpha=0.5, gamma=0.1, nu_beta=0.0)


def test_disease_free_is_absorbing():
    x = LatentState(N, 0, 0, 0, 0, math.log(0.3))
    out = transition(x, TH, CFG, 0)
    assert out.S == N and out.Z == 0 and out.E == out.I == out.R == 0


def test_single_euler_step_arithmetic():
    x = LatentState(N - 100, 100, 0, 0, 0, math.log(0.3))
    out = transition(x, ParamVector(alpha=0.5, gamma=0.1), CFG, 0)
    assert out.Z == pytest.approx(50)
    assert out.E == pytest.approx(50)
    assert out.I == pytest.approx(50)


def test_zero_volatility_keeps_log_beta():
    x = LatentState(N - 10, 5, 5, 0, 0, math.log(0.4))
    for seed in range(5):
        assert transition(x, TH, CFG, seed).log_beta == x.log_beta


def test_log_beta_increment_variance_independent_of_substeps():
    th = ParamVector(alpha=0.5, gamma=0.1, nu_beta=0.3)
    x = np.tile(LatentState(N - 10, 0, 10, 0).as_array(), (40_000, 1))
    for sub in (1, 4):
        cfg = ModelConfig(N=N, dt=2.0, n_substeps=sub)
        out = transition(x, th, cfg, 1)
        var = np.var(out[:, LOG_BETA] - x[:, LOG_BETA])
        assert var == pytest.approx(0.09 * 2.0, rel=0.03)


def test_transition_rejects_bad_state():
    with pytest.raises(InvalidStateError):
        transition(np.array([np.nan, 0, 0, 0, 0, 0.0]), TH, CFG, 0)
    with pytest.raises(InvalidStateError):
        transition(np.array([-1.0, 0, 0, 0, 0, 0.0]), TH, CFG, 0)


@settings(max_examples=80, deadline=None)
@given(
    st.floats(0, 1), st.floats(0, 1), st.floats(0, 1),
    st.floats(0.01, 5), st.floats(0.01, 5), st.floats(0, 2), st.floats(-3, 3), st.integers(1, 4),
)
def test_conservation_and_non_negativity(fe, fi, fr, alpha, gamma, nu, lb, sub):
    # stiff settings (rates up to 5/day, beta up to e^3) exercise the caps
    e, i, r = fe * N / 3, fi * N / 3, fr * N / 3
    x = np.array([N - e - i - r, e, i, r, 0.0, lb])
    cfg = ModelConfig(N=N, n_substeps=sub)
    out = transition(x, ParamVector(alpha=alpha, gamma=gamma, nu_beta=nu), cfg, 0)
    assert abs(out[:4].sum() - N) <= 1e-6 * N
    assert np.all(out[:5] >= 0)


def test_recoveries_monotone_along_simulated_path():
    path, _ = EXAMPLE1.simulate(3)
    assert np.all(np.diff(path[:, R]) >= 0)
    assert np.all(np.abs(path[:, :4].sum(axis=1) - N) <= 1e-6 * N)


def test_observation_operator():
    H = observation_operator(ModelConfig(N=N, rho=0.4))
    x = np.array([1.0, 2, 3, 4, 5, 6])
    assert H @ x == pytest.approx(0.4 * 5)
    assert np.count_nonzero(H) == 1


def test_poisson_log_density_examples():
    th = ParamVector(0.5, 0.1)
    assert obs_log_density(0, LatentState(N, 0, 0, 0, 1.0), th, CFG) == pytest.approx(-1)
    assert obs_log_density(3, LatentState(N, 0, 0, 0, 2.0), th, CFG) == pytest.approx(
        3 * math.log(2) - 2 - math.log(6))
    with pytest.raises(DomainError):
        obs_log_density(-1, LatentState(N, 0, 0, 0, 2.0), th, CFG)


def test_zero_incidence_uses_floor():
    th = ParamVector(0.5, 0.1)
    assert obs_log_density(0, LatentState(N, 0, 0, 0, 0.0), th, CFG) == pytest.approx(0, abs=1e-9)
    assert obs_log_density(5, LatentState(N, 0, 0, 0, 0.0), th, CFG) < -50


def test_negbin_parameterisation():
    mu, phi = 10.0, 0.02
    r = 1 / phi
    p = r / (r + mu)
    assert r == pytest.approx(50) and p == pytest.approx(5 / 6)
    assert mu + phi * mu**2 == pytest.approx(12)
    ys = np.arange(60)
    assert np.allclose(negbin_logpmf(ys, mu, phi), nbinom.logpmf(ys, r, p))


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 1000), st.floats(1e-3, 1e4))
def test_negbin_tends_to_poisson(y, mu):
    # log NB - log Poisson = (phi / 2) ((y - mu)^2 - y) + O(phi^2); at mu = 1e4
    # this is ~5e-5, so agreement is checked against the expansion, and the
    # plain 1e-6 agreement wherever the expansion itself is below 1e-6
    phi = 1e-12
    gap = negbin_logpmf(y, mu, phi) - poisson_logpmf(y, mu)
    lead = 0.5 * phi * ((y - mu) ** 2 - y)
    assert gap == pytest.approx(lead, abs=1e-8)
    if abs(lead) < 5e-7:
        assert abs(gap) <= 1e-6


def test_negbin_small_phi_against_high_precision():
    mpmath.mp.dps = 50
    for y, mu, phi in [(0, 1e4, 1e-12), (1000, 10.0, 1e-12), (37, 40.5, 1e-6), (3, 2.0, 0.5)]:
        r = mpmath.mpf(1) / phi
        exact = (mpmath.loggamma(y + r) - mpmath.loggamma(r) - mpmath.loggamma(y + 1)
                 + r * mpmath.log(r / (r + mu)) + y * mpmath.log(mu / (r + mu)))
        assert negbin_logpmf(y, mu, phi) == pytest.approx(float(exact), rel=1e-12, abs=1e-9)


def test_conditional_variance_examples():
    th = ParamVector(0.5, 0.1, phi=0.02)
    assert obs_conditional_variance(LatentState(N, 0, 0, 0, 100.0), th, CFG) == 100
    nb = ModelConfig(N=N, rho=0.5, obs_model=ObsModel.NEGBIN)
    assert obs_conditional_variance(LatentState(N, 0, 0, 0, 200.0), th, nb) == pytest.approx(300)
    assert obs_conditional_variance(LatentState(N, 0, 0, 0, 0.0), th, CFG) == 0


def test_obs_sample_moments():
    gen = as_generator(0)
    x = np.tile(LatentState(N, 0, 0, 0, 1000.0).as_array(), (100_000, 1))
    y = obs_sample(x, ParamVector(0.5, 0.1), CFG, gen)
    assert abs(y.mean() - 1000) < 5 * math.sqrt(1000 / 1e5)
    nb = ModelConfig(N=N, obs_model="negbin")
    x[:, Z] = 50
    y = obs_sample(x, ParamVector(0.5, 0.1, phi=0.05), nb, gen)
    assert y.var() == pytest.approx(175, rel=0.1)
    x[:, Z] = 0
    assert np.all(obs_sample(x[:100], ParamVector(0.5, 0.1), CFG, gen) == 0)


def test_effective_reproduction_examples():
    assert effective_reproduction(LatentState(N, 0, 0, 0, 0, math.log(0.3)), ParamVector(0.5, 1 / 7), N) == \
        pytest.approx(2.1)
    assert effective_reproduction(LatentState(0, 0, N, 0, 0, 0.0), ParamVector(0.5, 0.1), N) == 0
    assert effective_reproduction(LatentState(N, 0, 0, 0, 0, math.log(0.2)), ParamVector(0.5, 0.2), N) == \
        pytest.approx(1)


def test_simulator_is_deterministic():
    a = EXAMPLE1.simulate(7)
    b = EXAMPLE1.simulate(7)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_simulator_scenarios():
    path, y = EXAMPLE1.simulate(0)
    assert path.shape == (61, 6) and y.shape == (60,)
    assert path[0, S] == N - 10 and path[0, I] == 10 and path[0, E] == 0
    assert np.exp(path[30, LOG_BETA]) == pytest.approx(EXAMPLE1.beta_schedule(30))
    path2, y2 = EXAMPLE2.simulate(0)
    assert y2.shape == (100,)
    assert EXAMPLE2.beta_schedule(15) == pytest.approx(0.565)


def test_zero_schedule_means_no_cases():
    path, y = simulate_epidemic(CFG, TH, lambda t: 0.0, 20, 0,
                                initial=LatentState(N, 0, 0, 0, 0, 0.0))
    assert np.all(y == 0) and np.all(path[:, S] == N)


def test_negative_schedule_rejected():
    with pytest.raises(DomainError):
        simulate_epidemic(CFG, TH, lambda t: -0.1, 5, 0)


def test_model_object_batches():
    m = SEIRModel(CFG)
    th = ParamVector(np.full((3, 1), 0.5), np.full((3, 1), 0.1), np.full((3, 1), 0.1), 0.0, np.full((3, 1), 0.3))
    x = m.initial_states(th, (3, 7), 0)
    assert x.shape == (3, 7, 6)
    assert np.all(x[..., S] >= 0) and np.allclose(x[..., LOG_BETA], math.log(0.3))
    out = m.propagate(x, th, as_generator(1).standard_normal((3, 7, 1)))
    assert out.shape == x.shape
    d = m.derived(out, th)
    assert set(d) >= {"incidence", "Reff", "beta"}
