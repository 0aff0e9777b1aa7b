"""Liu-West filter: particle filter on the state augmented with parameters.

Parameters are kept alive by a shrinkage kernel.  Each step draws every
particle's parameter from N(lambda * theta_i + (1 - lambda) * theta_bar, h^2 V),
which preserves the weighted mean and covariance of the parameter cloud.
The step follows the auxiliary ordering: shrink, weight by the likelihood
at a deterministic look-ahead, resample, jitter, propagate, reweight.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .enkf import as_model
from .errors import DomainError, ParticleCollapseError
from .rng import RngLike, as_generator, as_stream
from .smc2 import STATE_QUANTILES, posterior_summary
from .stochastic import LOG_ZERO, PriorSpec, ess, normalize_log_weights, stratified_resample

MAX_REDRAWS = 100


def shrinkage_constants(delta: float):
    """(h^2, lambda) for discount factor ``delta`` in (0, 1].

    h^2 = 1 - ((3 delta - 1) / (2 delta))^2 and lambda = sqrt(1 - h^2).
    """
    if not 0 < delta <= 1:
        raise DomainError("delta must lie in (0, 1]")
    a = (3 * delta - 1) / (2 * delta)
    h2 = 1.0 - a * a
    # clamp tiny negative rounding at delta = 1
    h2 = min(max(h2, 0.0), 1.0)
    return h2, math.sqrt(1.0 - h2)


def _weighted_moments(theta, w):
    mean = w @ theta
    diff = theta - mean
    return mean, (diff.T * w) @ diff


def _sqrt_psd(cov):
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def shrink(theta, weights, lam: float):
    """Kernel locations lambda * theta_i + (1 - lambda) * weighted mean."""
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(weights, dtype=float) / np.sum(weights)
    mean, _ = _weighted_moments(theta, w)
    return lam * theta + (1.0 - lam) * mean


def kernel_mixture_sample(theta, weights, delta: float, rng: RngLike, prior: PriorSpec | None = None,
                          centers=None):
    """Jitter shrunk locations with covariance h^2 V.

    ``centers`` are the kernel locations of the particles to jitter (defaults
    to the shrunk versions of ``theta`` itself); V is the weighted covariance
    of ``theta``.  With a ``prior``, draws off its support are redrawn up to
    100 times and then clipped to the support bounds.
    """
    gen = as_generator(rng)
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        theta = theta[:, None]
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    h2, lam = shrinkage_constants(delta)
    _, cov = _weighted_moments(theta, w)
    if centers is None:
        centers = shrink(theta, w, lam)
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    root = math.sqrt(h2) * _sqrt_psd(cov)
    out = centers + gen.standard_normal(centers.shape) @ root.T
    if prior is None or h2 == 0:
        return out
    bad = ~np.isfinite(prior.log_density(out))
    for _ in range(MAX_REDRAWS):
        if not bad.any():
            break
        out[bad] = centers[bad] + gen.standard_normal((int(bad.sum()), centers.shape[1])) @ root.T
        bad = ~np.isfinite(prior.log_density(out))
    if bad.any():
        out[bad] = prior.clip(out[bad])
        still = ~np.isfinite(prior.log_density(out))
        out[still] = centers[still]
    return out


@dataclass
class LiuWestRecord:
    t: int
    ess: float
    params: dict
    states: dict | None = None


@dataclass
class LiuWestResult:
    history: list
    theta: np.ndarray
    states: np.ndarray
    log_weights: np.ndarray
    prior: PriorSpec

    @property
    def weights(self):
        return normalize_log_weights(self.log_weights)

    def param_trace(self, name: str, stat: str = "mean") -> np.ndarray:
        return np.array([rec.params[name][stat] for rec in self.history])


def liu_west_filter(obs, prior: PriorSpec, model, n_x: int, delta: float = 0.99, rng: RngLike = None,
                    record_states: bool = True, init_theta=None) -> LiuWestResult:
    """Joint state-parameter filtering with kernel shrinkage.

    Returns
    -------
    LiuWestResult
        Per-step weighted parameter (and optionally state) summaries.

    Raises
    ------
    ParticleCollapseError
        When every particle gets zero weight at some step.
    """
    model = as_model(model)
    obs = np.asarray(obs, dtype=float)
    if n_x < 2:
        raise DomainError("n_x must be at least 2")
    if np.any(obs < 0):
        raise DomainError("observations must be non-negative")
    h2, lam = shrinkage_constants(delta)
    stream = as_stream(rng)
    if init_theta is None:
        theta = prior.sample(stream.child("prior").generator(), n_x)
    else:
        theta = np.array(init_theta, dtype=float).reshape(n_x, prior.dim)
    x = model.initial_states(prior.to_params(theta), (n_x,), stream.child("init").generator())
    logw = np.zeros(n_x)
    history = []
    names = list(prior.names)
    for t, y in enumerate(obs, start=1):
        gen = stream.child("step", t).generator()
        w = normalize_log_weights(logw)
        centers = shrink(theta, w, lam)
        p_centers = prior.to_params(centers)
        look = model.propagate(x, p_centers, None, freeze_beta=True)
        g = model.obs_log_density(y, look, p_centers)
        g = np.where(np.isnan(g), LOG_ZERO, g)
        with np.errstate(divide="ignore"):
            first = np.log(w) + g
        if not np.any(np.isfinite(first)):
            raise ParticleCollapseError(t, "first-stage weights vanished", {"y": float(y)})
        idx = stratified_resample(normalize_log_weights(first), gen)
        new_theta = kernel_mixture_sample(theta, w, delta, gen, prior, centers=centers[idx])
        p_new = prior.to_params(new_theta)
        noise = gen.standard_normal((n_x, model.noise_dim))
        x = model.propagate(x[idx], p_new, noise)
        lw = model.obs_log_density(y, x, p_new)
        with np.errstate(invalid="ignore"):
            logw = np.where(np.isnan(lw), LOG_ZERO, lw) - g[idx]
        logw = np.where(np.isnan(logw), LOG_ZERO, logw)
        if not np.any(np.isfinite(logw)):
            raise ParticleCollapseError(t, "second-stage weights vanished", {"y": float(y)})
        theta = new_theta
        w = normalize_log_weights(logw)
        states = None
        if record_states and hasattr(model, "derived"):
            states = {}
            for name, v in model.derived(x, p_new).items():
                v = np.broadcast_to(v, w.shape)
                ok = np.isfinite(v)
                states[name] = posterior_summary(v[ok], w[ok], [name], STATE_QUANTILES)[name]
        history.append(LiuWestRecord(t, ess(w), posterior_summary(theta, w, names), states))
    return LiuWestResult(history, theta, x, logw, prior)


__all__ = [
    "shrinkage_constants", "shrink", "kernel_mixture_sample", "liu_west_filter",
    "LiuWestRecord", "LiuWestResult",
]
