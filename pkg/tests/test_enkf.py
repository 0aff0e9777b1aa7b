import math

import numpy as np
import pytest

from esmc2.bpf import bpf_filter
from esmc2.enkf import (
    EnKFEngine, analysis_update, enkf_filter, enkf_step, forecast_ensemble, kalman_gain, observation_variance,
)
from esmc2.errors import DomainError, PreconditionError
from esmc2.model import I, S, Z, LatentState, ModelConfig, ObsModel, ParamVector, SEIRModel, observation_operator
from esmc2.rng import as_generator
from esmc2.scenarios import EXAMPLE1

from oracles import LinearGaussianModel, kalman_loglik

N = 500_000.0
CFG = ModelConfig(N=N)
TH = ParamVector(alpha=0.5, gamma=1 / 7, nu_beta=0.2, beta0=0.3)


def _ensemble(n, Zs=None, state=None):
    base = (state or LatentState(N - 100, 50, 50, 0, 0.0, math.log(0.3))).as_array()
    x = np.tile(base, (n, 1))
    if Zs is not None:
        x[:, Z] = Zs
    return x


def test_identical_members_stay_identical_without_volatility():
    x = _ensemble(8)
    out = forecast_ensemble(x, TH.replace(nu_beta=0.0), CFG, 0)
    assert np.all(out == out[0])


def test_disease_free_forecast():
    x = _ensemble(6, state=LatentState(N, 0, 0, 0, 0, math.log(0.3)))
    out = forecast_ensemble(x, TH, CFG, 0)
    assert np.all(out[:, S] == N) and np.all(out[:, Z] == 0)


def test_forecast_incidence_positive():
    out = forecast_ensemble(_ensemble(10), TH, CFG, 0)
    assert out[:, Z].mean() > 0


def test_observation_variance_examples():
    assert observation_variance(_ensemble(5, Zs=0.0), TH, CFG) == pytest.approx(0.1)
    assert observation_variance(_ensemble(5, Zs=100.0), TH, CFG) == pytest.approx(100)
    nb = ModelConfig(N=N, obs_model=ObsModel.NEGBIN)
    x = _ensemble(2, Zs=[100.0, 200.0])
    assert observation_variance(x, TH.replace(phi=0.02), nb) == pytest.approx(650)


def test_kalman_gain_examples():
    H = observation_operator(CFG)
    x = _ensemble(10)
    assert np.allclose(kalman_gain(x, H, 1.0), 0)
    # Var(Z) = 4 with unbiased divisor
    z = np.array([-1.0, 1.0] * 5) * math.sqrt(4 * 9 / 10)
    x = _ensemble(10, Zs=100 + z)
    K = kalman_gain(x, H, 1.0)
    assert K[Z] == pytest.approx(0.8)
    assert np.all(np.abs(kalman_gain(x, H, 1e12)) < 1e-10)
    with pytest.raises(DomainError):
        kalman_gain(x, H, 0.0)


def test_analysis_update_examples():
    H = observation_operator(CFG)
    x = _ensemble(6, Zs=np.linspace(90, 110, 6))
    assert np.array_equal(analysis_update(x, 120.0, np.zeros(6), 5.0, H, 0), x)
    one = _ensemble(1, Zs=50.0)
    K = np.zeros(6)
    K[Z] = 0.5
    out = analysis_update(one, 50.0, K, 5.0, H, 0, noise=np.zeros(1))
    assert np.array_equal(out, one)
    # contraction of the ensemble mean toward y
    K = kalman_gain(x, H, 10.0)
    out = analysis_update(x, 150.0, K, 10.0, H, 0, noise=np.zeros(6))
    assert abs(out[:, Z].mean() - 150) < abs(x[:, Z].mean() - 150)


def test_analysis_clamps_compartments():
    H = observation_operator(CFG)
    x = _ensemble(6, Zs=np.linspace(0, 5, 6))
    K = kalman_gain(x, H, 0.1)
    out = analysis_update(x, 0.0, K * 50, 0.1, H, 1)
    assert np.all(out[:, :5] >= 0)


def test_step_disease_free_zero_count():
    x = _ensemble(10, state=LatentState(N, 0, 0, 0, 0, math.log(0.3)))
    st = enkf_step(x, 0.0, TH, CFG, 0)
    assert np.isfinite(st.incr_loglik)
    assert st.V == pytest.approx(0.1)
    assert np.all(st.analysis[:, I] == 0) and np.all(st.analysis[:, Z] == 0)


def test_step_precondition():
    with pytest.raises(PreconditionError):
        enkf_step(_ensemble(4), 1.0, TH, CFG, 0)
    with pytest.raises(DomainError):
        enkf_step(_ensemble(6), -1.0, TH, CFG, 0)


def test_filter_sum_of_increments_and_single_step():
    _, y = EXAMPLE1.simulate(2)
    steps, total = enkf_filter(y[:15], TH, CFG, 50, 4)
    assert total == sum(s.incr_loglik for s in steps)
    assert all(s.V >= 0.1 for s in steps)
    steps1, total1 = enkf_filter(y[:1], TH, CFG, 50, 4)
    assert len(steps1) == 1 and total1 == steps1[0].incr_loglik
    last, total_last = enkf_filter(y[:15], TH, CFG, 50, 4, trace="last")
    assert len(last) == 1 and total_last == total


def test_linear_gaussian_close_to_kalman():
    m = LinearGaussianModel()
    gen = np.random.default_rng(0)
    ys = m.simulate(30, gen)
    exact = kalman_loglik(m, ys)
    _, est = enkf_filter(ys, None, m, 2000, 1)
    assert est == pytest.approx(exact, rel=0.03)


def test_unbiased_vs_plugin_gap_shrinks():
    m = LinearGaussianModel()
    ys = m.simulate(20, np.random.default_rng(1))
    gaps = {}
    for n in (10, 10_000):
        g = []
        for seed in range(20):
            _, a = enkf_filter(ys, None, m, n, seed, unbiased=True, trace="last")
            _, b = enkf_filter(ys, None, m, n, seed, unbiased=False, trace="last")
            g.append(abs(a - b))
        gaps[n] = np.median(g)
    assert gaps[10_000] < gaps[10]


def test_example1_close_to_bpf():
    path, y = EXAMPLE1.simulate(1)
    model = SEIRModel(EXAMPLE1.cfg)
    th = ParamVector(alpha=0.5, gamma=1 / 7, nu_beta=0.2, beta0=0.3)
    e = np.mean([enkf_filter(y, th, model, 200, s, trace="last")[1] for s in range(20)])
    b = np.mean([bpf_filter(y, th, model, 2000, 100 + s, trace="last")[1] for s in range(20)])
    assert abs(e - b) <= 0.05 * abs(b)


def test_engine_matches_functional_step_and_workers():
    model = SEIRModel(CFG)
    B = 5
    th = ParamVector(np.full((B, 1), 0.5), np.linspace(0.1, 0.2, B)[:, None], np.full((B, 1), 0.2), 0.0,
                     np.full((B, 1), 0.3))
    eng1 = EnKFEngine(model, 20)
    eng3 = EnKFEngine(model, 20, workers=3)
    s1 = eng1.initialize(th, B, 0)
    assert s1.shape == (B, 20, 6)
    a, ia = eng1.step(s1, 30.0, th, as_generator(4))
    b, ib = eng3.step(s1, 30.0, th, as_generator(4))
    assert np.array_equal(a, b) and np.array_equal(ia, ib)
    _, la = eng1.filter([3.0, 5.0, 9.0], th, B, 7)
    _, lb = eng3.filter([3.0, 5.0, 9.0], th, B, 7)
    assert np.array_equal(la, lb)


def test_engine_nonfinite_row_gets_log_zero():
    model = SEIRModel(CFG)
    eng = EnKFEngine(model, 10)
    th = ParamVector(np.full((2, 1), 0.5), np.full((2, 1), 0.1), np.full((2, 1), 0.1), 0.0, np.full((2, 1), 0.3))
    st = eng.initialize(th, 2, 0)
    st[1, 0, S] = np.nan
    _, incr = eng.step(st, 0.0, th, 1)
    assert np.isfinite(incr[0]) and incr[1] == -np.inf


def test_count_outside_estimator_support_is_log_zero():
    # members start with E = 0, so the first forecast incidence is exactly 0 and
    # the predictive variance is the floor; y = 2 lies outside the support
    model = SEIRModel(CFG)
    eng = EnKFEngine(model, 10)
    th = ParamVector(np.full((1, 1), 0.5), np.full((1, 1), 0.1), np.full((1, 1), 0.1), 0.0, np.full((1, 1), 0.3))
    _, incr = eng.step(eng.initialize(th, 1, 0), 2.0, th, 1)
    assert incr[0] == -np.inf
    _, incr = EnKFEngine(model, 10, unbiased=False).step(eng.initialize(th, 1, 0), 2.0, th, 1)
    assert np.isfinite(incr[0])
