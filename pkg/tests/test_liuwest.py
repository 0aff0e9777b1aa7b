import math

import numpy as np
import pytest

from esmc2.errors import DomainError
from esmc2.liuwest import kernel_mixture_sample, liu_west_filter, shrink, shrinkage_constants
from esmc2.model import SEIRModel
from esmc2.scenarios import EXAMPLE1
from esmc2.stochastic import PriorSpec, TruncNormal, Uniform

MODEL = SEIRModel(EXAMPLE1.cfg)
_, Y = EXAMPLE1.simulate(1000)


def test_shrinkage_constants():
    h2, lam = shrinkage_constants(0.99)
    assert h2 == pytest.approx(0.010075, abs=1e-6)
    assert lam == pytest.approx(0.994950, abs=1e-6)
    assert shrinkage_constants(1.0) == (0.0, 1.0)
    h2, lam = shrinkage_constants(1 / 3)
    assert h2 == pytest.approx(1.0) and lam == pytest.approx(0.0, abs=1e-7)
    for bad in (0.0, -0.5, 1.01):
        with pytest.raises(DomainError):
            shrinkage_constants(bad)


def test_shrink_toward_weighted_mean():
    th = np.array([[0.0], [1.0]])
    assert np.allclose(shrink(th, [0.5, 0.5], 0.5), [[0.25], [0.75]])
    assert np.allclose(shrink(th, [1.0, 0.0], 0.0), [[0.0], [0.0]])


def test_mixture_preserves_mean_and_variance():
    gen = np.random.default_rng(0)
    theta = gen.gamma(3.0, 0.1, size=(400, 1))
    w = gen.random(400)
    wn = w / w.sum()
    m = float(wn @ theta[:, 0])
    v = float(wn @ (theta[:, 0] - m) ** 2)
    reps = 300
    means, variances = [], []
    for r in range(reps):
        # draw a kernel index from the weights, then jitter: one mixture draw per particle
        idx = gen.choice(400, size=400, p=wn)
        centers = shrink(theta, wn, shrinkage_constants(0.9)[1])[idx]
        out = kernel_mixture_sample(theta, wn, 0.9, gen, centers=centers)[:, 0]
        means.append(out.mean())
        variances.append(out.var(ddof=1))
    means, variances = np.array(means), np.array(variances)
    assert abs(means.mean() - m) < 3 * means.std(ddof=1) / math.sqrt(reps)
    assert abs(variances.mean() - v) < 3 * variances.std(ddof=1) / math.sqrt(reps)


def test_jitter_respects_prior_support():
    prior = PriorSpec({"alpha": Uniform(0.0, 0.1)}, fixed={"gamma": 0.1, "nu_beta": 0.0, "phi": 0.0,
                                                            "beta0": 0.3})
    gen = np.random.default_rng(1)
    theta = np.concatenate([np.full(50, 0.0999), gen.uniform(0, 0.1, 50)])[:, None]
    out = kernel_mixture_sample(theta, np.ones(100), 0.5, gen, prior=prior)
    assert np.all((out >= 0) & (out <= 0.1))


def test_delta_one_keeps_parameters_fixed():
    prior = EXAMPLE1.prior
    theta = np.tile(prior.from_params(EXAMPLE1.truth.replace(nu_beta=0.1)), (200, 1))
    res = liu_west_filter(Y[:15], prior, MODEL, 200, delta=1.0, rng=0, init_theta=theta, record_states=False)
    assert np.array_equal(res.theta, theta)
    for name in ("alpha", "gamma"):
        assert np.all(res.param_trace(name, "sd") == 0.0)


def test_runs_and_records_intervals():
    res = liu_west_filter(Y[:20], EXAMPLE1.prior, MODEL, 2000, delta=0.99, rng=3)
    assert len(res.history) == 20
    for name in ("alpha", "gamma", "nu_beta"):
        lo, hi = res.param_trace(name, "q2.5"), res.param_trace(name, "q97.5")
        assert np.all(lo <= hi)
    assert res.history[-1].states is not None
    assert np.all(np.isfinite(prior_ld := EXAMPLE1.prior.log_density(res.theta)))
    assert prior_ld.shape == (2000,)


def test_truncated_prior_stays_in_support():
    prior = PriorSpec({"alpha": TruncNormal(0.5, 0.05, 0.45, 0.55), "gamma": Uniform(0.1, 0.2)},
                      fixed={"nu_beta": 0.1, "phi": 0.0, "beta0": 0.3})
    res = liu_west_filter(Y[:10], prior, MODEL, 500, delta=0.9, rng=2, record_states=False)
    assert np.all(np.isfinite(prior.log_density(res.theta)))


def test_deterministic_given_seed():
    a = liu_west_filter(Y[:8], EXAMPLE1.prior, MODEL, 300, rng=5, record_states=False)
    b = liu_west_filter(Y[:8], EXAMPLE1.prior, MODEL, 300, rng=5, record_states=False)
    assert np.array_equal(a.theta, b.theta)
