"""Bootstrap particle filter with stratified resampling at every step."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .enkf import as_model, map_rows
from .errors import DomainError, ParticleCollapseError
from .params import ParamVector
from .rng import RngLike, as_generator
from .stochastic import LOG_ZERO, stratified_resample


@dataclass
class ParticleCloud:
    """Particles (..., N_x, d) with log-weights (..., N_x).

    ``ancestors`` holds the 0-based indices chosen by the last resampling
    (``None`` before the first step).
    """

    particles: np.ndarray
    log_weights: np.ndarray
    ancestors: np.ndarray | None = None

    @property
    def weights(self) -> np.ndarray:
        lw = self.log_weights
        top = np.max(lw, axis=-1, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        w = np.exp(lw - top)
        s = w.sum(axis=-1, keepdims=True)
        n = lw.shape[-1]
        return np.where(s > 0, w / np.where(s > 0, s, 1.0), 1.0 / n)


def _log_mean_exp_rows(lw):
    top = np.max(lw, axis=-1)
    safe = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        out = safe + np.log(np.mean(np.exp(lw - safe[..., None]), axis=-1))
    return np.where(np.isfinite(top), out, LOG_ZERO)


def _bpf_update(model, x, lw, y, theta, noise, uniforms):
    """Resample (rows of) ``x`` by ``lw``, propagate, reweight."""
    lead = x.shape[:-2]
    n = x.shape[-2]
    x2 = x.reshape((-1, n, x.shape[-1]))
    w = ParticleCloud(x2, lw.reshape(-1, n)).weights
    anc = stratified_resample(w, None, uniforms=uniforms.reshape(-1, n))
    flat = (anc + (np.arange(anc.shape[0]) * n)[:, None]).ravel()
    x2 = x2.reshape(-1, x.shape[-1])[flat].reshape(x.shape)
    xp = model.propagate(x2, theta, noise)
    new_lw = model.obs_log_density(y, xp, theta)
    new_lw = np.where(np.isnan(new_lw), LOG_ZERO, new_lw)
    incr = _log_mean_exp_rows(new_lw)
    return xp, new_lw, anc.reshape(lead + (n,)), incr


def bpf_step(cloud: ParticleCloud, y, theta: ParamVector, model, rng: RngLike):
    """Resample, propagate and weight one step.

    Returns
    -------
    (ParticleCloud, incr_loglik)
        ``incr_loglik = log(mean_i w_i)`` of the new unnormalised weights.

    Raises
    ------
    ParticleCollapseError
        If every new weight is zero (``t`` is reported as ``None``; the
        filter loop fills in the step index).
    """
    model = as_model(model)
    if y < 0:
        raise DomainError("observations must be non-negative")
    gen = as_generator(rng)
    x = np.asarray(cloud.particles, dtype=float)
    noise = gen.standard_normal(x.shape[:-1] + (model.noise_dim,))
    uniforms = gen.random(x.shape[:-1])
    xp, lw, anc, incr = _bpf_update(model, x, np.asarray(cloud.log_weights, dtype=float), float(y), theta,
                                    noise, uniforms)
    if np.any(~np.isfinite(incr)):
        raise ParticleCollapseError(None, diagnostics={"y": float(y)})
    incr = float(incr) if np.ndim(incr) == 0 else incr
    return ParticleCloud(xp, lw, anc), incr


def bpf_filter(obs, theta: ParamVector, model, n_x: int, rng: RngLike, init_sampler=None, trace: str = "full"):
    """Run the bootstrap filter over a series.

    Returns
    -------
    (list of (ParticleCloud, incr_loglik), total log-likelihood)

    Raises
    ------
    ParticleCollapseError
        Carrying the 1-based step ``t`` at which all weights vanished.
    """
    model = as_model(model)
    obs = np.asarray(obs, dtype=float)
    if obs.ndim != 1 or obs.size < 1:
        raise DomainError("need a non-empty 1-D observation series")
    if n_x < 1:
        raise DomainError("n_x must be positive")
    gen = as_generator(rng)
    x = init_sampler(theta, n_x, gen) if init_sampler else model.initial_states(theta, (n_x,), gen)
    cloud = ParticleCloud(x, np.zeros(x.shape[:-1]))
    out = []
    total = 0.0
    for t, y in enumerate(obs, start=1):
        try:
            cloud, incr = bpf_step(cloud, y, theta, model, gen)
        except ParticleCollapseError as exc:
            raise ParticleCollapseError(t, diagnostics={"y": float(y), "partial_loglik": total,
                                                        "trace": out}) from exc
        total = total + incr
        out = [(cloud, incr)] if trace == "last" else out + [(cloud, incr)]
    return out, total


class BPFEngine:
    """Batched bootstrap-filter likelihood engine for the SMC^2 driver.

    The filter state is a pair ``(particles (B, N_x, d), log_weights (B, N_x))``.
    A row whose weights all vanish returns a log-zero increment and keeps
    uniform weights afterwards, so the outer sampler can discard it.
    """

    name = "bpf"

    def __init__(self, model, n_x: int, workers: int = 1):
        self.model = as_model(model)
        if n_x < 1:
            raise DomainError("n_x must be positive")
        self.n_x = int(n_x)
        self.workers = int(workers)

    def initialize(self, theta: ParamVector, n_batch: int, rng: RngLike):
        x = self.model.initial_states(theta, (n_batch, self.n_x), as_generator(rng))
        return x, np.zeros((n_batch, self.n_x))

    def step(self, state, y: float, theta: ParamVector, rng: RngLike):
        gen = as_generator(rng)
        x, lw = state
        B = x.shape[0]
        noise = gen.standard_normal((B, self.n_x, self.model.noise_dim))
        uniforms = gen.random((B, self.n_x))
        y = float(y)

        def work(s):
            xp, nlw, _, incr = _bpf_update(self.model, x[s], lw[s], y, theta.take(s), noise[s], uniforms[s])
            return xp, nlw, incr

        parts = map_rows(work, B, self.workers)
        xp = np.concatenate([p[0] for p in parts])
        nlw = np.concatenate([p[1] for p in parts])
        incr = np.concatenate([p[2] for p in parts])
        return (xp, nlw), incr

    def filter(self, obs, theta: ParamVector, n_batch: int, rng: RngLike):
        gen = as_generator(rng)
        state = self.initialize(theta, n_batch, gen)
        total = np.zeros(n_batch)
        for y in obs:
            state, incr = self.step(state, y, theta, gen)
            total += incr
        return state, total

    @staticmethod
    def take(state, index):
        return state[0][index], state[1][index]

    @staticmethod
    def where(mask, new, old):
        mask = np.asarray(mask)
        return (np.where(mask[:, None, None], new[0], old[0]), np.where(mask[:, None], new[1], old[1]))

    @staticmethod
    def members(state):
        x, lw = state
        return x, ParticleCloud(x, lw).weights


__all__ = ["ParticleCloud", "bpf_step", "bpf_filter", "BPFEngine"]
