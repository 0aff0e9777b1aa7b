"""Stochastic (perturbed-observation) ensemble Kalman filter.

The filter works on arrays of shape ``(..., N_x, d)``: any leading axes are
treated as independent filters sharing a parameter batch, which is how the
SMC^2 driver runs one ensemble per parameter particle in a single numpy pass.
Observations are scalar counts; the observation variance is estimated from
the ensemble as ``max(eta, mean_i Var[y | x_i])``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, PreconditionError
from .gaussdens import unbiased_gaussian_logpdf_1d
from .model import ModelConfig, SEIRModel, observation_operator
from .params import ParamVector
from .rng import RngLike, as_generator
from .stochastic import LOG_ZERO

DEFAULT_ETA = 0.1


def as_model(model_or_cfg):
    """Accept either a model object or a :class:`ModelConfig`."""
    if isinstance(model_or_cfg, ModelConfig):
        return SEIRModel(model_or_cfg)
    return model_or_cfg


@dataclass
class FilterStep:
    """Result of assimilating one observation.

    All scalar fields carry the leading batch shape of the ensemble.
    """

    analysis: np.ndarray
    incr_loglik: np.ndarray | float
    forecast_mean_obs: np.ndarray | float
    forecast_var_obs: np.ndarray | float
    V: np.ndarray | float
    forecast: np.ndarray | None = None


def _scalar(a):
    a = np.asarray(a)
    return float(a) if a.ndim == 0 else a


def _check_ensemble_size(n_x: int):
    if not n_x > 4:
        raise PreconditionError(f"EnKF needs N_x > d_y + 3 = 4 members, got {n_x}")


def forecast_ensemble(ensemble, theta: ParamVector, model, rng: RngLike, noise=None):
    """Propagate every member through the transition with independent noise."""
    model = as_model(model)
    x = np.asarray(ensemble, dtype=float)
    if noise is None:
        noise = as_generator(rng).standard_normal(x.shape[:-1] + (model.noise_dim,))
    return model.propagate(x, theta, noise)


def observation_variance(forecast, theta: ParamVector, model, eta: float = DEFAULT_ETA):
    """V = max(eta, ensemble mean of Var[y | x])."""
    model = as_model(model)
    v = np.mean(model.obs_variance(np.asarray(forecast, dtype=float), theta), axis=-1)
    return _scalar(np.maximum(eta, v))


def _moments(x, hx):
    n = hx.shape[-1]
    hx_mean = hx.mean(axis=-1)
    dh = hx - hx_mean[..., None]
    var_h = np.einsum("...i,...i->...", dh, dh) / (n - 1)
    cross = np.einsum("...i,...ij->...j", dh, x - x.mean(axis=-2, keepdims=True)) / (n - 1)
    return hx_mean, var_h, cross


def kalman_gain(forecast, H, V):
    """K = cov(x, Hx) / (var(Hx) + V) with divisor N_x - 1.

    Only the cross-covariance with the observed coordinate is formed.
    """
    x = np.asarray(forecast, dtype=float)
    if np.any(np.asarray(V) <= 0):
        raise DomainError("observation variance must be positive")
    hx = x @ np.asarray(H, dtype=float)
    _, var_h, cross = _moments(x, hx)
    return cross / (var_h + np.asarray(V))[..., None]


def analysis_update(forecast, y, K, V, H, rng: RngLike, noise=None, model=None):
    """Shift members by K (y + v - Hx) with v ~ N(0, V); clamp compartments.

    ``model`` supplies the clamping rule (defaults to clamping the five SEIR
    compartments); ``noise`` holds the standard normals behind ``v``.
    """
    x = np.asarray(forecast, dtype=float)
    if noise is None:
        noise = as_generator(rng).standard_normal(x.shape[:-1])
    V = np.asarray(V, dtype=float)
    hx = x @ np.asarray(H, dtype=float)
    innov = y + np.sqrt(V)[..., None] * noise - hx
    out = x + np.asarray(K)[..., None, :] * innov[..., None]
    if model is None:
        out[..., :5] = np.maximum(out[..., :5], 0.0)
        return out
    return as_model(model).constrain(out)


def _assimilate(model, x, y, theta, obs_noise, eta, unbiased):
    """Variance, moments, likelihood increment and analysis for forecast ``x``."""
    n = x.shape[-2]
    hx = model.observe(x, theta)
    with np.errstate(invalid="ignore", over="ignore"):
        V = np.maximum(eta, np.mean(model.obs_variance(x, theta), axis=-1))
        hx_mean, var_h, cross = _moments(x, hx)
        pred_var = var_h + V
        if unbiased:
            incr = unbiased_gaussian_logpdf_1d(y, hx_mean, pred_var, n)
        else:
            incr = -0.5 * (np.log(2 * np.pi * pred_var) + (y - hx_mean) ** 2 / pred_var)
        K = cross / pred_var[..., None]
        innov = y + np.sqrt(V)[..., None] * obs_noise - hx
        xa = model.constrain(x + K[..., None, :] * innov[..., None])
    finite = np.all(np.isfinite(xa), axis=(-1, -2)) & np.isfinite(hx_mean) & np.isfinite(pred_var)
    incr = np.where(finite & ~np.isnan(incr), incr, LOG_ZERO)
    return xa, incr, hx_mean, pred_var, V


def enkf_step(ensemble, y, theta: ParamVector, model, rng: RngLike, eta: float = DEFAULT_ETA,
              unbiased: bool = True) -> FilterStep:
    """Forecast, estimate the incremental likelihood and update one step.

    Parameters
    ----------
    ensemble : array (..., N_x, d)
    y : float
        Observed count (must be >= 0).
    theta : ParamVector
    model : model object or ModelConfig
    rng : generator, stream or seed
    eta : float
        Floor of the observation variance.
    unbiased : bool
        Use the unbiased Gaussian density estimator (default) instead of the
        plug-in normal density.

    Returns
    -------
    FilterStep
        A log-zero ``incr_loglik`` is returned as a value, never raised.
    """
    model = as_model(model)
    x = np.asarray(ensemble, dtype=float)
    _check_ensemble_size(x.shape[-2])
    if y < 0:
        raise DomainError("observations must be non-negative")
    gen = as_generator(rng)
    fc = model.propagate(x, theta, gen.standard_normal(x.shape[:-1] + (model.noise_dim,)))
    xa, incr, m, p, V = _assimilate(model, fc, float(y), theta, gen.standard_normal(x.shape[:-1]), eta, unbiased)
    return FilterStep(xa, _scalar(incr), _scalar(m), _scalar(p), _scalar(V), forecast=fc)


def enkf_filter(obs, theta: ParamVector, model, n_x: int, rng: RngLike, init_sampler=None,
                eta: float = DEFAULT_ETA, unbiased: bool = True, trace: str = "full"):
    """Run the EnKF over a whole series.

    ``init_sampler(theta, n_x, gen)`` draws the initial ensemble; by default
    the model's own initial distribution is used.  ``trace`` is ``"full"``
    (keep every :class:`FilterStep`) or ``"last"``.

    Returns
    -------
    (list of FilterStep, total log-likelihood)
        A log-zero increment makes the total log-zero but the run continues.
    """
    model = as_model(model)
    obs = np.asarray(obs, dtype=float)
    if obs.ndim != 1 or obs.size < 1:
        raise DomainError("need a non-empty 1-D observation series")
    if trace not in ("full", "last"):
        raise DomainError("trace must be 'full' or 'last'")
    _check_ensemble_size(n_x)
    gen = as_generator(rng)
    x = init_sampler(theta, n_x, gen) if init_sampler else model.initial_states(theta, (n_x,), gen)
    steps = []
    total = 0.0
    for y in obs:
        st = enkf_step(x, y, theta, model, gen, eta=eta, unbiased=unbiased)
        total = total + st.incr_loglik
        x = st.analysis
        if trace == "last":
            st.forecast = None
            steps = [st]
        else:
            steps.append(st)
    return steps, _scalar(total)


def _chunks(n: int, workers: int):
    bounds = np.linspace(0, n, max(1, min(workers, n)) + 1).astype(int)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def map_rows(fn, n_rows: int, workers: int):
    """Apply ``fn(slice)`` to row chunks, concurrently if ``workers > 1``.

    The outputs are returned in chunk order so reductions stay deterministic.
    """
    parts = _chunks(n_rows, workers)
    if workers <= 1 or len(parts) == 1:
        return [fn(s) for s in parts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, parts))


class EnKFEngine:
    """Batched EnKF likelihood engine for the SMC^2 driver.

    The filter state is an array of shape ``(B, N_x, d)``, one ensemble per
    parameter particle; ``theta`` fields have shape ``(B, 1)``.  All random
    numbers for a step are drawn up front from one generator, so the result
    does not depend on ``workers``.
    """

    name = "enkf"

    def __init__(self, model, n_x: int, eta: float = DEFAULT_ETA, unbiased: bool = True, workers: int = 1):
        self.model = as_model(model)
        _check_ensemble_size(n_x)
        self.n_x = int(n_x)
        self.eta = float(eta)
        self.unbiased = bool(unbiased)
        self.workers = int(workers)

    def initialize(self, theta: ParamVector, n_batch: int, rng: RngLike):
        return self.model.initial_states(theta, (n_batch, self.n_x), as_generator(rng))

    def step(self, state, y: float, theta: ParamVector, rng: RngLike):
        """Assimilate ``y``; returns (new state, incremental log-likelihood (B,))."""
        gen = as_generator(rng)
        B = state.shape[0]
        dyn = gen.standard_normal((B, self.n_x, self.model.noise_dim))
        obs = gen.standard_normal((B, self.n_x))
        y = float(y)

        def work(s):
            th = theta.take(s)
            fc = self.model.propagate(state[s], th, dyn[s])
            xa, incr, *_ = _assimilate(self.model, fc, y, th, obs[s], self.eta, self.unbiased)
            return xa, incr

        parts = map_rows(work, B, self.workers)
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])

    def filter(self, obs, theta: ParamVector, n_batch: int, rng: RngLike):
        """Fresh filters over ``obs``; returns (final state, total log-likelihood (B,))."""
        gen = as_generator(rng)
        state = self.initialize(theta, n_batch, gen)
        total = np.zeros(n_batch)
        for y in obs:
            state, incr = self.step(state, y, theta, gen)
            total += incr
        return state, total

    @staticmethod
    def take(state, index):
        return state[index]

    @staticmethod
    def where(mask, new, old):
        return np.where(np.asarray(mask)[:, None, None], new, old)

    @staticmethod
    def members(state):
        """Member states (B, N_x, d) and their weights (B, N_x)."""
        return state, np.full(state.shape[:2], 1.0 / state.shape[1])


__all__ = [
    "DEFAULT_ETA", "FilterStep", "EnKFEngine", "as_model", "forecast_ensemble",
    "observation_variance", "kalman_gain", "analysis_update", "enkf_step",
    "enkf_filter", "observation_operator", "map_rows",
]
