"""Posterior products: marginal state bands, forecasts and error metrics."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .params import ParamVector
from .rng import RngLike, as_stream
from .stochastic import PriorSpec, stratified_resample, weighted_quantile

BAND_LEVELS = (0.5, 0.75, 0.9, 0.95)


def _band_quantiles(levels=BAND_LEVELS):
    qs = []
    for lv in levels:
        qs += [0.5 - lv / 2, 0.5 + lv / 2]
    return qs


def _pooled_summary(values, weights, levels=BAND_LEVELS):
    """Mean, median and central bands of a pooled weighted sample."""
    v = np.asarray(values, dtype=float).ravel()
    w = np.broadcast_to(np.asarray(weights, dtype=float), np.shape(values)).ravel()
    ok = np.isfinite(v) & (w > 0)
    v, w = v[ok], w[ok]
    qs = weighted_quantile(v, w, [0.5] + _band_quantiles(levels))
    bands = {lv: (float(qs[1 + 2 * k]), float(qs[2 + 2 * k])) for k, lv in enumerate(levels)}
    mean = np.clip(np.sum(w * v) / np.sum(w), v.min(), v.max())
    return float(mean), float(qs[0]), bands


@dataclass
class Bands:
    """Per-time summaries of one quantity.

    ``lower[level]`` and ``upper[level]`` are arrays over time.
    """

    mean: np.ndarray
    median: np.ndarray
    lower: dict
    upper: dict

    def is_nested(self) -> bool:
        levels = sorted(self.lower)
        ok = True
        for a, b in zip(levels[:-1], levels[1:]):
            ok &= bool(np.all(self.lower[b] <= self.lower[a]) and np.all(self.upper[a] <= self.upper[b]))
        ok &= bool(np.all(self.lower[levels[0]] <= self.median) and np.all(self.median <= self.upper[levels[0]]))
        return ok

    def contains(self, values, level: float = 0.95) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        return (self.lower[level] <= values) & (values <= self.upper[level])


def _collect_bands(rows) -> Bands:
    """Turn a list of (mean, median, bands) tuples into :class:`Bands`."""
    levels = sorted(rows[0][2])
    return Bands(
        mean=np.array([r[0] for r in rows]),
        median=np.array([r[1] for r in rows]),
        lower={lv: np.array([r[2][lv][0] for r in rows]) for lv in levels},
        upper={lv: np.array([r[2][lv][1] for r in rows]) for lv in levels},
    )


@dataclass
class StatePosterior:
    """Pooled filtering bands over parameter draws.

    ``quantities`` maps names (S, E, I, R, Z, beta, incidence, Reff) to
    :class:`Bands` over t = 1..T.  ``final_states`` / ``final_weights`` /
    ``theta`` keep the end-of-series ensembles for forecasting.
    """

    times: np.ndarray
    quantities: dict
    n_pooled: int
    theta: np.ndarray
    final_states: np.ndarray
    final_weights: np.ndarray
    prior: PriorSpec
    loglik: np.ndarray = field(default=None)

    def params(self) -> ParamVector:
        return self.prior.to_params(self.theta, trailing=1)


def draw_parameters(theta, weights, n_c: int, rng: RngLike) -> np.ndarray:
    """Stratified draw of ``n_c`` rows of a weighted parameter matrix.

    Warns when ``n_c`` exceeds the number of distinct rows with positive
    weight (draws are then necessarily repeated).
    """
    theta = np.asarray(theta, dtype=float)
    w = np.asarray(weights, dtype=float)
    support = len({tuple(r) for r in theta[w > 0]})
    if n_c > support:
        warnings.warn(f"N_c={n_c} exceeds the {support} distinct weighted particles; draws repeat",
                      RuntimeWarning, stacklevel=2)
    idx = stratified_resample(w, rng, n=n_c)
    return theta[idx]


def marginal_state_posterior(obs, theta, weights, prior: PriorSpec, engine, n_c: int = 100,
                             rng: RngLike = None, levels=BAND_LEVELS) -> StatePosterior:
    """Integrate parameter uncertainty into the filtering distribution.

    ``n_c`` parameter values are drawn from the weighted particle set, a fresh
    inner filter is run for each, and the ``n_c * N_x`` member states are
    pooled at every time into mean and quantile bands.
    """
    obs = np.asarray(obs, dtype=float)
    if n_c < 1:
        raise DomainError("n_c must be positive")
    stream = as_stream(rng)
    draws = draw_parameters(theta, weights, n_c, stream.child("draws").generator())
    params = prior.to_params(draws, trailing=1)
    gen = stream.child("filter").generator()
    state = engine.initialize(params, n_c, gen)
    rows: dict[str, list] = {}
    loglik = np.zeros(n_c)
    n_pooled = 0
    for y in obs:
        state, incr = engine.step(state, y, params, gen)
        loglik += incr
        x, mw = engine.members(state)
        n_pooled = x.shape[0] * x.shape[1]
        w = mw / n_c
        for name, v in engine.model.derived(x, params).items():
            rows.setdefault(name, []).append(_pooled_summary(np.broadcast_to(v, mw.shape), w, levels))
    quantities = {name: _collect_bands(r) for name, r in rows.items()}
    x, mw = engine.members(state)
    return StatePosterior(np.arange(1, obs.size + 1), quantities, n_pooled, draws, x, mw, prior, loglik)


@dataclass
class ForecastFan:
    """Posterior-predictive bands for horizons 1..H.

    ``observations`` holds bands of simulated counts; ``quantities`` holds
    bands of latent summaries (incidence, beta, Reff, ...).
    """

    horizons: np.ndarray
    observations: Bands
    quantities: dict
    n_trajectories: int
    samples: np.ndarray | None = None


def forecast(final_states, theta: ParamVector, model, horizon: int = 14, rng: RngLike = None,
             weights=None, diffusive: bool = False, levels=BAND_LEVELS, keep_samples: bool = False) -> ForecastFan:
    """Propagate end-of-series ensembles forward and sample observations.

    Parameters
    ----------
    final_states : array (B, N_x, d)
        Ensembles at the last observation time, one per parameter draw.
    theta : ParamVector
        Batched parameters with fields of shape (B, 1) (or scalars).
    model : model object
    horizon : int
        Number of reporting intervals ahead.
    weights : array (B, N_x), optional
        Member weights (particle filters); members are resampled first.
    diffusive : bool
        Keep the log-beta random walk.  Off by default, which freezes the
        transmission rate at its last value.
    """
    if horizon < 1:
        raise DomainError("horizon must be >= 1")
    x = np.array(final_states, dtype=float)
    stream = as_stream(rng)
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        idx = stratified_resample(w.reshape(-1, x.shape[-2]), stream.child("members").generator())
        x = np.take_along_axis(x, idx[..., None], axis=-2)
    gen = stream.child("forecast").generator()
    obs_rows, rows = [], {}
    flat_w = np.ones(x.shape[:-1])
    samples = [] if keep_samples else None
    for _ in range(horizon):
        noise = None if not diffusive else gen.standard_normal(x.shape[:-1] + (model.noise_dim,))
        x = model.propagate(x, theta, noise, freeze_beta=not diffusive)
        y = np.asarray(model.sample_obs(x, theta, gen), dtype=float)
        obs_rows.append(_pooled_summary(y, flat_w, levels))
        for name, v in model.derived(x, theta).items():
            rows.setdefault(name, []).append(_pooled_summary(np.broadcast_to(v, flat_w.shape), flat_w, levels))
        if keep_samples:
            samples.append(y.ravel())
    return ForecastFan(
        np.arange(1, horizon + 1),
        _collect_bands(obs_rows),
        {name: _collect_bands(r) for name, r in rows.items()},
        int(flat_w.size),
        np.array(samples) if keep_samples else None,
    )


def metrics(estimate, truth, lower=None, upper=None) -> dict:
    """MAE, RMSE and (when a band is given) coverage of ``truth``."""
    est = np.asarray(estimate, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise DomainError(f"length mismatch: {est.shape} vs {tru.shape}")
    if est.size == 0:
        raise DomainError("empty series")
    err = est - tru
    out = {"MAE": float(np.mean(np.abs(err))), "RMSE": float(np.sqrt(np.mean(err * err)))}
    if lower is not None and upper is not None:
        lo, up = np.asarray(lower, dtype=float), np.asarray(upper, dtype=float)
        if lo.shape != tru.shape or up.shape != tru.shape:
            raise DomainError("band length mismatch")
        out["coverage"] = float(np.mean((lo <= tru) & (tru <= up)))
    return out


__all__ = [
    "BAND_LEVELS", "Bands", "StatePosterior", "ForecastFan", "draw_parameters",
    "marginal_state_posterior", "forecast", "metrics",
]
