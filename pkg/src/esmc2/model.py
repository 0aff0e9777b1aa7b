"""Diffusion-driven SEIR dynamics, count observation models and a simulator.

States are stored as float arrays whose last axis holds
``(S, E, I, R, Z, log_beta)``; leading axes are free (batch of parameter
particles, ensemble members, ...).  :class:`LatentState` is the scalar view
used at API boundaries.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import betaln, gammaln

from .errors import DomainError, InvalidStateError, NumericalError
from .params import PARAM_NAMES, ParamVector
from .rng import RngLike, as_generator
from .stochastic import LOG_ZERO, TruncNormal

__all__ = [
    "S", "E", "I", "R", "Z", "LOG_BETA", "STATE_FIELDS", "MU_MIN",
    "LatentState", "ParamVector", "PARAM_NAMES", "ObsModel", "ModelConfig",
    "InitialCondition", "SEIRModel", "observation_operator",
    "transition", "obs_log_density", "obs_conditional_variance", "obs_sample",
    "effective_reproduction", "simulate_epidemic",
    "poisson_logpmf", "negbin_logpmf",
]

S, E, I, R, Z, LOG_BETA = range(6)
STATE_FIELDS = ("S", "E", "I", "R", "Z", "log_beta")
COMPARTMENTS = slice(0, 5)

# Floor on the observation mean so that Z = 0 still defines a density.
MU_MIN = 1e-10
CONSERVATION_RTOL = 1e-6


@dataclass(frozen=True)
class LatentState:
    S: float
    E: float
    I: float
    R: float
    Z: float = 0.0
    log_beta: float = math.log(0.3)

    @property
    def beta(self) -> float:
        return math.exp(self.log_beta)

    def as_array(self) -> np.ndarray:
        return np.array([self.S, self.E, self.I, self.R, self.Z, self.log_beta], dtype=float)

    @classmethod
    def from_array(cls, x) -> "LatentState":
        x = np.asarray(x, dtype=float)
        if x.shape != (6,):
            raise InvalidStateError(f"expected a 6-vector, got shape {x.shape}")
        return cls(*map(float, x))


class ObsModel(str, enum.Enum):
    POISSON = "poisson"
    NEGBIN = "negbin"


@dataclass(frozen=True)
class ModelConfig:
    """Fixed quantities of the state-space model.

    ``dt`` is the reporting interval in days, split into ``n_substeps``
    Euler steps.
    """

    N: float
    rho: float = 1.0
    obs_model: ObsModel = ObsModel.POISSON
    dt: float = 1.0
    n_substeps: int = 1

    def __post_init__(self):
        object.__setattr__(self, "obs_model", ObsModel(self.obs_model))
        if not (np.isfinite(self.N) and self.N > 0):
            raise DomainError("N must be positive")
        if not 0 < self.rho <= 1:
            raise DomainError("rho must lie in (0, 1]")
        if not self.dt > 0:
            raise DomainError("dt must be positive")
        if int(self.n_substeps) != self.n_substeps or self.n_substeps < 1:
            raise DomainError("n_substeps must be a positive integer")
        object.__setattr__(self, "n_substeps", int(self.n_substeps))


def observation_operator(cfg: ModelConfig) -> np.ndarray:
    """Row vector H with H @ x = rho * Z."""
    H = np.zeros(6)
    H[Z] = cfg.rho
    return H


# ---------------------------------------------------------------------------
# dynamics


def _propagate(x, alpha, gamma, nu_beta, cfg: ModelConfig, noise=None, beta=None):
    """Euler / Euler-Maruyama update over one reporting interval.

    ``noise`` holds standard normals of shape ``x.shape[:-1] + (n_substeps,)``;
    ``None`` freezes log_beta.  ``beta`` overrides exp(log_beta) in the flows
    (used by the simulator to force a prescribed schedule).

    Each outflow is capped at the mass available after the upstream flow, so
    no compartment turns negative; S+E+I+R is then rescaled to N.
    """
    x = np.array(x, dtype=float, copy=True)
    N = cfg.N
    h = cfg.dt / cfg.n_substeps
    s, e, i, r = (np.maximum(x[..., k], 0.0) for k in (S, E, I, R))
    lb = x[..., LOG_BETA]
    z = np.zeros_like(s)
    for k in range(cfg.n_substeps):
        b = np.exp(lb) if beta is None else beta
        new_inf = np.minimum(b * s * i / N * h, s)
        new_sym = np.minimum(alpha * e * h, e + new_inf)
        new_rec = np.minimum(gamma * i * h, i + new_sym)
        s = s - new_inf
        e = e + new_inf - new_sym
        i = i + new_sym - new_rec
        r = r + new_rec
        z = z + new_sym
        s, e, i, r = (np.maximum(c, 0.0) for c in (s, e, i, r))
        total = s + e + i + r
        scale = np.where(total > 0, N / np.where(total > 0, total, 1.0), 1.0)
        s, e, i, r = s * scale, e * scale, i * scale, r * scale
        if noise is not None:
            lb = lb + nu_beta * math.sqrt(h) * noise[..., k]
    x[..., S], x[..., E], x[..., I], x[..., R] = s, e, i, r
    x[..., Z] = z
    x[..., LOG_BETA] = lb
    return x


def _check_states(x, cfg: ModelConfig | None = None):
    if not np.all(np.isfinite(x)):
        raise InvalidStateError("latent state contains non-finite values")
    if np.any(x[..., COMPARTMENTS] < 0):
        raise InvalidStateError("latent state has negative compartments")


def transition(state, theta: ParamVector, cfg: ModelConfig, rng: RngLike):
    """Propagate a state (or array of states) over one reporting interval.

    Returns the same type as ``state``.  ``Z`` of the result is the incidence
    accumulated during the interval.

    Raises
    ------
    InvalidStateError
        Non-finite or negative input.
    NumericalError
        Conservation of S+E+I+R violated after the update.
    """
    scalar = isinstance(state, LatentState)
    x = state.as_array() if scalar else np.asarray(state, dtype=float)
    _check_states(x)
    noise = as_generator(rng).standard_normal(x.shape[:-1] + (cfg.n_substeps,))
    out = _propagate(x, theta.alpha, theta.gamma, theta.nu_beta, cfg, noise)
    total = out[..., S] + out[..., E] + out[..., I] + out[..., R]
    if not np.all(np.isfinite(out)) or np.any(np.abs(total - cfg.N) > CONSERVATION_RTOL * cfg.N):
        raise NumericalError("population not conserved by transition")
    return LatentState.from_array(out) if scalar else out


# ---------------------------------------------------------------------------
# observation model


def poisson_logpmf(y, mu):
    y = np.asarray(y, dtype=float)
    return y * np.log(mu) - mu - gammaln(y + 1.0)


def negbin_logpmf(y, mu, phi):
    """NegBin log-pmf with mean ``mu`` and variance ``mu + phi * mu**2``.

    Uses size r = 1/phi and p = r / (r + mu).  The Gamma-function ratio is
    evaluated through ``betaln`` so the small-phi limit stays accurate.
    """
    y = np.asarray(y, dtype=float)
    r = 1.0 / phi
    y_pos = np.where(y > 0, y, 1.0)
    log_ratio = np.where(y > 0, -np.log(y_pos) - betaln(y_pos, r), 0.0)
    return log_ratio - r * np.log1p(mu / r) + y * (np.log(mu) - np.log(r + mu))


def _count_logpmf(y, mu, phi, obs_model: ObsModel):
    if obs_model is ObsModel.POISSON:
        return poisson_logpmf(y, mu)
    phi = np.asarray(phi, dtype=float)
    safe_phi = np.where(phi > 0, phi, 1.0)
    return np.where(phi > 0, negbin_logpmf(y, mu, safe_phi), poisson_logpmf(y, mu))


def _state_array(state):
    return state.as_array() if isinstance(state, LatentState) else np.asarray(state, dtype=float)


def obs_log_density(y, state, theta: ParamVector, cfg: ModelConfig):
    """log p(y | x, theta) at mean rho * Z (floored at ``MU_MIN``)."""
    if np.any(np.asarray(y) < 0):
        raise DomainError("observations must be non-negative")
    x = _state_array(state)
    mu = np.maximum(cfg.rho * x[..., Z], MU_MIN)
    out = _count_logpmf(y, mu, theta.phi, cfg.obs_model)
    out = np.where(np.isnan(out), LOG_ZERO, out)
    return float(out) if np.ndim(out) == 0 else out


def obs_conditional_variance(state, theta: ParamVector, cfg: ModelConfig):
    """Var[y | x]: rho*Z for Poisson, rho*Z + phi*(rho*Z)**2 for NegBin."""
    x = _state_array(state)
    mu = cfg.rho * x[..., Z]
    if cfg.obs_model is ObsModel.NEGBIN:
        out = mu + theta.phi * mu * mu
    else:
        out = mu
    return float(out) if np.ndim(out) == 0 else out


def obs_sample(state, theta: ParamVector, cfg: ModelConfig, rng: RngLike):
    """Draw counts; NegBin is sampled as a Gamma-Poisson mixture."""
    gen = as_generator(rng)
    x = _state_array(state)
    mu = np.maximum(cfg.rho * x[..., Z], MU_MIN)
    if cfg.obs_model is ObsModel.NEGBIN:
        phi = np.broadcast_to(np.asarray(theta.phi, dtype=float), np.shape(mu))
        shape = np.where(phi > 0, 1.0 / np.where(phi > 0, phi, 1.0), 1.0)
        lam = np.where(phi > 0, gen.gamma(shape, mu / shape), mu)
        out = gen.poisson(lam)
    else:
        out = gen.poisson(mu)
    return int(out) if np.ndim(out) == 0 else out


def effective_reproduction(state, theta: ParamVector, N: float):
    """R_eff = beta * S / (gamma * N)."""
    x = _state_array(state)
    out = np.exp(x[..., LOG_BETA]) * x[..., S] / (theta.gamma * N)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# model object consumed by the filters


@dataclass(frozen=True)
class InitialCondition:
    """Initial-state distribution.

    S0 ~ TN[0, inf)(N - i0 - e0 - r0, s0_sd**2), I0 ~ TN[0, inf)(i0, i0_sd**2),
    E0 = e0, R0 = r0, Z0 = 0, log_beta0 = log(beta0).
    """

    i0: float = 10.0
    i0_sd: float = 0.2
    s0_sd: float = 0.2
    e0: float = 0.0
    r0: float = 0.0

    def mean_state(self, N: float, beta0: float) -> LatentState:
        return LatentState(N - self.i0 - self.e0 - self.r0, self.e0, self.i0, self.r0, 0.0, math.log(beta0))


class SEIRModel:
    """SEIR state-space model bound to a :class:`ModelConfig`.

    This is the interface the filters talk to; any object with the same
    methods (``initial_states``, ``propagate``, ``observe``,
    ``obs_variance``, ``obs_log_density``, ``sample_obs``, ``constrain``,
    ``derived`` and ``noise_dim``) can stand in for it.
    """

    dim = 6
    obs_dim = 1

    def __init__(self, cfg: ModelConfig, init: InitialCondition | None = None):
        self.cfg = cfg
        self.init = init or InitialCondition()

    @property
    def noise_dim(self) -> int:
        return self.cfg.n_substeps

    def initial_states(self, theta: ParamVector, shape, rng: RngLike) -> np.ndarray:
        gen = as_generator(rng)
        shape = tuple(np.atleast_1d(shape))
        ic = self.init
        x = np.zeros(shape + (6,))
        s_mean = self.cfg.N - ic.i0 - ic.e0 - ic.r0
        x[..., S] = TruncNormal(s_mean, ic.s0_sd, 0.0, np.inf).sample(gen, shape)
        x[..., I] = TruncNormal(ic.i0, ic.i0_sd, 0.0, np.inf).sample(gen, shape)
        x[..., E] = ic.e0
        x[..., R] = ic.r0
        with np.errstate(divide="ignore", invalid="ignore"):
            x[..., LOG_BETA] = np.log(np.asarray(theta.beta0, dtype=float))
        return x

    def propagate(self, x, theta: ParamVector, noise=None, freeze_beta: bool = False):
        with np.errstate(over="ignore", invalid="ignore"):
            return _propagate(x, theta.alpha, theta.gamma, theta.nu_beta, self.cfg,
                              None if freeze_beta else noise)

    def observe(self, x, theta: ParamVector | None = None):
        return self.cfg.rho * x[..., Z]

    def obs_variance(self, x, theta: ParamVector):
        return obs_conditional_variance(x, theta, self.cfg)

    def obs_log_density(self, y, x, theta: ParamVector):
        mu = np.maximum(self.cfg.rho * x[..., Z], MU_MIN)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = _count_logpmf(y, mu, theta.phi, self.cfg.obs_model)
        return np.where(np.isnan(out), LOG_ZERO, out)

    def sample_obs(self, x, theta: ParamVector, rng: RngLike):
        return obs_sample(x, theta, self.cfg, rng)

    def constrain(self, x):
        x[..., COMPARTMENTS] = np.maximum(x[..., COMPARTMENTS], 0.0)
        return x

    def derived(self, x, theta: ParamVector) -> dict:
        """Named scalar summaries of each state (same leading shape as ``x``)."""
        beta = np.exp(x[..., LOG_BETA])
        return {
            "S": x[..., S],
            "E": x[..., E],
            "I": x[..., I],
            "R": x[..., R],
            "Z": x[..., Z],
            "beta": beta,
            "incidence": self.cfg.rho * x[..., Z],
            "Reff": beta * x[..., S] / (np.asarray(theta.gamma) * self.cfg.N),
        }


# ---------------------------------------------------------------------------
# simulator


def simulate_epidemic(
    cfg: ModelConfig,
    theta: ParamVector,
    beta_schedule: Callable[[float], float],
    T: int,
    rng: RngLike,
    initial: LatentState | None = None,
):
    """Simulate ground truth with a prescribed transmission-rate schedule.

    The interval (t-1, t] is integrated with beta = beta_schedule(t-1); the
    recorded state at time t carries log(beta_schedule(t)).  A zero schedule
    value is allowed (no transmission); negative or non-finite values are not.

    Returns
    -------
    path : ndarray, shape (T + 1, 6)
        Latent states at t = 0..T.
    y : ndarray of int, shape (T,)
        Observed counts for intervals 1..T.
    """
    T = int(T)
    if T < 1:
        raise DomainError("T must be >= 1")
    gen = as_generator(rng)
    betas = np.array([float(beta_schedule(t * cfg.dt)) for t in range(T + 1)])
    if np.any(~np.isfinite(betas)) or np.any(betas < 0):
        raise DomainError("beta_schedule must be finite and non-negative")
    if initial is None:
        initial = InitialCondition().mean_state(cfg.N, max(betas[0], 1e-300))
    path = np.empty((T + 1, 6))
    path[0] = initial.as_array()
    with np.errstate(divide="ignore"):
        log_betas = np.log(betas)
    path[0, LOG_BETA] = log_betas[0]
    y = np.empty(T, dtype=np.int64)
    for t in range(1, T + 1):
        nxt = _propagate(path[t - 1], theta.alpha, theta.gamma, 0.0, cfg, None, beta=betas[t - 1])
        nxt[LOG_BETA] = log_betas[t]
        path[t] = nxt
        y[t - 1] = obs_sample(nxt, theta, cfg, gen)
    return path, y
