"""SMC^2 over static parameters with a pluggable likelihood engine.

With :class:`~esmc2.bpf.BPFEngine` as the inner filter this is the standard
particle SMC^2; with :class:`~esmc2.enkf.EnKFEngine` it is the ensemble
variant.  The driver only sees the engine through ``initialize``, ``step``,
``filter``, ``take``, ``where`` and ``members``.

Random numbers come from child streams of one root stream keyed by purpose
and time index, so a run is reproducible from its seed alone.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import DegeneratePopulationError, DomainError, SingularProposalError
from .params import ParamVector
from .rng import RngLike, as_generator, as_stream
from .stochastic import LOG_ZERO, PriorSpec, ess, normalize_log_weights, stratified_resample, weighted_quantile

PARAM_QUANTILES = (0.025, 0.25, 0.5, 0.75, 0.975)
STATE_QUANTILES = (0.025, 0.05, 0.125, 0.25, 0.5, 0.75, 0.875, 0.95, 0.975)


@dataclass
class ParticleSet:
    """Weighted parameter particles and their attached inner filters.

    Attributes
    ----------
    theta : (N_theta, dim) array of free parameters (columns follow ``prior.names``)
    log_weights : (N_theta,) unnormalised log-weights
    cum_loglik : (N_theta,) log-likelihood estimate of the data assimilated so far
    filter_state : engine-specific state, batched over particles
    prior : PriorSpec
    """

    theta: np.ndarray
    log_weights: np.ndarray
    cum_loglik: np.ndarray
    filter_state: Any
    prior: PriorSpec

    @property
    def n(self) -> int:
        return self.theta.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return normalize_log_weights(self.log_weights)

    @property
    def ess(self) -> float:
        return ess(self.weights)

    def params(self) -> ParamVector:
        """Batched :class:`ParamVector` with fields of shape (N_theta, 1)."""
        return self.prior.to_params(self.theta, trailing=1)


@dataclass(frozen=True)
class ProposalSpec:
    """Independent multivariate normal proposal N(mean, c * cov)."""

    mean: np.ndarray
    cov: np.ndarray
    c: float
    chol: np.ndarray

    def sample(self, rng, n: int) -> np.ndarray:
        z = rng.standard_normal((n, self.mean.size))
        return self.mean + z @ self.chol.T

    def logpdf(self, theta) -> np.ndarray:
        d = self.mean.size
        diff = np.asarray(theta, dtype=float) - self.mean
        sol = np.linalg.solve(self.chol, diff.T).T
        logdet = 2.0 * np.sum(np.log(np.diag(self.chol)))
        return -0.5 * (d * np.log(2 * np.pi) + logdet + np.sum(sol * sol, axis=-1))


@dataclass
class RunDiagnostics:
    ess: list = field(default_factory=list)
    rejuvenation_times: list = field(default_factory=list)
    acceptance_rates: list = field(default_factory=list)
    step_seconds: list = field(default_factory=list)
    total_seconds: float = 0.0

    def as_dict(self) -> dict:
        return {
            "ess": [float(v) for v in self.ess],
            "rejuvenation_times": [int(v) for v in self.rejuvenation_times],
            "acceptance_rates": [float(v) for v in self.acceptance_rates],
            "step_seconds": [float(v) for v in self.step_seconds],
            "total_seconds": float(self.total_seconds),
        }

    @property
    def mean_acceptance(self) -> float:
        return float(np.mean(self.acceptance_rates)) if self.acceptance_rates else float("nan")


@dataclass
class StepRecord:
    """Posterior summaries after assimilating observation ``t`` (1-based)."""

    t: int
    ess: float
    resampled: bool
    acceptance: float | None
    params: dict
    states: dict | None = None


@dataclass
class RunResult:
    particles: ParticleSet
    history: list
    diagnostics: RunDiagnostics
    engine: Any
    obs: np.ndarray
    seed: Any = None

    def param_trace(self, name: str, stat: str = "mean") -> np.ndarray:
        return np.array([rec.params[name][stat] for rec in self.history])

    def state_trace(self, name: str, stat: str = "mean") -> np.ndarray:
        return np.array([rec.states[name][stat] for rec in self.history])


# ---------------------------------------------------------------------------
# summaries


def posterior_summary(values, weights, names=None, quantiles=PARAM_QUANTILES) -> dict:
    """Weighted mean, sd and quantiles of each column of ``values``.

    Quantiles invert the weighted empirical CDF (see
    :func:`~esmc2.stochastic.weighted_quantile`).
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    names = names or [str(j) for j in range(values.shape[1])]
    out = {}
    for j, name in enumerate(names):
        col = values[:, j]
        live = col[w > 0]
        # rounding can push the mean outside the support (constant columns)
        mean = float(np.clip(np.sum(w * col), live.min(), live.max()))
        sd = float(np.sqrt(max(np.sum(w * (col - mean) ** 2), 0.0)))
        qs = weighted_quantile(col, w, list(quantiles))
        entry = {"mean": mean, "sd": sd}
        entry.update({_qkey(q): float(v) for q, v in zip(quantiles, qs)})
        out[name] = entry
    return out


def _qkey(q: float) -> str:
    return "q" + f"{100 * q:g}"


def _state_summary(engine, state, theta: ParamVector, theta_w) -> dict | None:
    derived = getattr(engine.model, "derived", None)
    if derived is None:
        return None
    x, member_w = engine.members(state)
    w = (theta_w[:, None] * member_w).ravel()
    out = {}
    for name, v in derived(x, theta).items():
        v = np.broadcast_to(v, member_w.shape).ravel()
        ok = np.isfinite(v)
        if not ok.any():
            continue
        out[name] = posterior_summary(v[ok], w[ok], [name], STATE_QUANTILES)[name]
    return out


# ---------------------------------------------------------------------------
# building blocks


def assimilate(t: int, y: float, particles: ParticleSet, engine, rng: RngLike) -> np.ndarray:
    """Run one inner step per particle and update weights in place.

    Returns the incremental log-likelihoods.

    Raises
    ------
    DegeneratePopulationError
        If every particle ends with zero weight.
    """
    state, incr = engine.step(particles.filter_state, y, particles.params(), as_generator(rng))
    incr = np.where(np.isnan(incr), LOG_ZERO, incr)
    particles.filter_state = state
    particles.log_weights = particles.log_weights + incr
    particles.cum_loglik = particles.cum_loglik + incr
    if not np.any(np.isfinite(particles.log_weights)):
        raise DegeneratePopulationError(t)
    top = np.max(particles.log_weights)
    particles.log_weights = particles.log_weights - top
    return incr


def build_proposal(theta, weights=None, c: float = 1.0) -> ProposalSpec:
    """Independent normal proposal from weighted particle moments.

    The covariance uses the divide-by-sum-of-weights convention, is scaled by
    ``c`` and receives a diagonal jitter of 1e-10 times its trace.

    Raises
    ------
    SingularProposalError
        If the particles carry no spread (a larger N_theta usually helps).
    """
    theta = np.asarray(theta, dtype=float)
    if theta.ndim == 1:
        theta = theta[:, None]
    if not c > 0:
        raise DomainError("proposal scale must be positive")
    w = np.full(theta.shape[0], 1.0 / theta.shape[0]) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    live = theta[w > 0]
    if live.shape[0] < 2 or np.all(live == live[0]):
        raise SingularProposalError("parameter particles have zero spread; increase N_theta")
    mean = w @ theta
    diff = theta - mean
    cov = c * (diff.T * w) @ diff
    cov = 0.5 * (cov + cov.T)
    tr = np.trace(cov)
    if not (np.isfinite(tr) and tr > 0):
        raise SingularProposalError("parameter particles have zero spread; increase N_theta")
    cov_j = cov + 1e-10 * tr * np.eye(cov.shape[0])
    try:
        chol = np.linalg.cholesky(cov_j)
    except np.linalg.LinAlgError as exc:
        raise SingularProposalError("proposal covariance is not positive definite; increase N_theta") from exc
    return ProposalSpec(mean, cov_j, float(c), chol)


def pmmh_rejuvenate(particles: ParticleSet, obs, proposal: ProposalSpec, R: int, engine, rng: RngLike):
    """Apply ``R`` independent-proposal PMMH moves to every particle.

    Each move reruns a fresh inner filter over ``obs`` (the data seen so
    far) for every proposed parameter; the incumbent keeps its stored
    likelihood estimate.  Returns the acceptance rate over all moves.
    """
    stream = as_stream(rng)
    prior = particles.prior
    n = particles.n
    accepted = 0
    lp = prior.log_density(particles.theta)
    lq = proposal.logpdf(particles.theta)
    for r in range(R):
        gen = stream.child("move", r).generator()
        prop = proposal.sample(gen, n)
        u = gen.random(n)
        lp_new = prior.log_density(prop)
        valid = np.isfinite(lp_new)
        # proposals off the prior support are rejected; run the filter on the
        # incumbent there so no invalid parameter reaches the model
        run_theta = np.where(valid[:, None], prop, particles.theta)
        state, ll_new = engine.filter(obs, prior.to_params(run_theta, trailing=1), n, gen)
        lq_new = proposal.logpdf(prop)
        with np.errstate(invalid="ignore"):
            log_ratio = (ll_new + lp_new + lq) - (particles.cum_loglik + lp + lq_new)
        accept = valid & np.isfinite(ll_new) & (np.log(u) < np.where(np.isnan(log_ratio), LOG_ZERO, log_ratio))
        particles.theta = np.where(accept[:, None], prop, particles.theta)
        particles.cum_loglik = np.where(accept, ll_new, particles.cum_loglik)
        particles.filter_state = engine.where(accept, state, particles.filter_state)
        lp = np.where(accept, lp_new, lp)
        lq = np.where(accept, lq_new, lq)
        accepted += int(accept.sum())
    return accepted / (R * n) if R > 0 else float("nan")


def resample_particles(particles: ParticleSet, engine, rng: RngLike) -> np.ndarray:
    """Stratified resampling of parameter particles, copying filter states."""
    idx = stratified_resample(particles.weights, rng)
    particles.theta = particles.theta[idx]
    particles.cum_loglik = particles.cum_loglik[idx]
    particles.filter_state = engine.take(particles.filter_state, idx)
    particles.log_weights = np.zeros(particles.n)
    return idx


def init_particles(prior: PriorSpec, engine, n_theta: int, rng: RngLike, init_theta=None) -> ParticleSet:
    stream = as_stream(rng)
    if init_theta is None:
        theta = prior.sample(stream.child("prior").generator(), n_theta)
    else:
        theta = np.array(init_theta, dtype=float).reshape(n_theta, prior.dim)
    state = engine.initialize(prior.to_params(theta, trailing=1), n_theta, stream.child("init").generator())
    return ParticleSet(theta, np.zeros(n_theta), np.zeros(n_theta), state, prior)


def run(obs, prior: PriorSpec, engine, n_theta: int, R: int = 5, ess_threshold: float | None = None,
        rng: RngLike = None, proposal_scale: float = 1.0, init_theta=None, record_states: bool = True,
        callback=None) -> RunResult:
    """Sequential parameter posterior over ``obs``.

    Parameters
    ----------
    obs : 1-D array of counts
    prior : PriorSpec
    engine : EnKFEngine or BPFEngine (or anything with the same methods)
    n_theta : int
        Number of parameter particles, >= 2.
    R : int
        PMMH moves per rejuvenation.
    ess_threshold : float, optional
        Rejuvenate when ESS falls below this; default ``n_theta / 2``.
    rng : seed, RngStream or None
    proposal_scale : float
        Multiplier ``c`` of the proposal covariance.
    init_theta : array, optional
        Starting parameter matrix instead of prior draws.
    record_states : bool
        Store pooled latent-state summaries at every step.
    callback : callable, optional
        Called as ``callback(record, particles)`` after every step.

    Returns
    -------
    RunResult

    Raises
    ------
    DegeneratePopulationError
        With the partial history attached.
    """
    obs = np.asarray(obs, dtype=float)
    if obs.ndim != 1:
        raise DomainError("observations must be a 1-D series")
    if np.any(obs < 0) or np.any(~np.isfinite(obs)):
        raise DomainError("observations must be finite and non-negative")
    if n_theta < 2:
        raise DomainError("n_theta must be at least 2")
    if R < 0:
        raise DomainError("R must be non-negative")
    threshold = n_theta / 2 if ess_threshold is None else float(ess_threshold)
    stream = as_stream(rng)
    start = time.perf_counter()
    particles = init_particles(prior, engine, n_theta, stream, init_theta)
    diag = RunDiagnostics()
    history: list[StepRecord] = []
    for t in range(1, obs.size + 1):
        t0 = time.perf_counter()
        try:
            assimilate(t, obs[t - 1], particles, engine, stream.child("assimilate", t).generator())
        except DegeneratePopulationError as exc:
            diag.total_seconds = time.perf_counter() - start
            raise DegeneratePopulationError(t, history, diag) from exc
        w = particles.weights
        cur_ess = ess(w)
        diag.ess.append(cur_ess)
        states = _state_summary(engine, particles.filter_state, particles.params(), w) if record_states else None
        params = posterior_summary(particles.theta, w, list(prior.names))
        resampled = cur_ess < threshold
        acc = None
        if resampled:
            resample_particles(particles, engine, stream.child("resample", t).generator())
            proposal = build_proposal(particles.theta, None, proposal_scale)
            acc = pmmh_rejuvenate(particles, obs[:t], proposal, R, engine, stream.child("pmmh", t))
            diag.rejuvenation_times.append(t)
            diag.acceptance_rates.append(acc)
        rec = StepRecord(t, cur_ess, resampled, acc, params, states)
        history.append(rec)
        diag.step_seconds.append(time.perf_counter() - t0)
        if callback is not None:
            callback(rec, particles)
    diag.total_seconds = time.perf_counter() - start
    return RunResult(particles, history, diag, engine, obs, getattr(stream, "seed", None))


__all__ = [
    "ParticleSet", "ProposalSpec", "RunDiagnostics", "StepRecord", "RunResult",
    "posterior_summary", "assimilate", "build_proposal", "pmmh_rejuvenate",
    "resample_particles", "init_particles", "run", "PARAM_QUANTILES", "STATE_QUANTILES",
]
