"""Priors, weight utilities and stratified resampling."""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Union

import numpy as np
from scipy import stats
from scipy.special import log_ndtr, logsumexp

from .errors import DegenerateWeightsError, DomainError
from .params import PARAM_NAMES, ParamVector
from .rng import RngLike, RngStream, as_generator

__all__ = [
    "LOG_ZERO",
    "RngStream",
    "Normal",
    "TruncNormal",
    "Uniform",
    "PriorSpec",
    "marginal_from_string",
    "sample_prior",
    "log_prior_density",
    "normalize_log_weights",
    "ess",
    "stratified_resample",
    "weighted_quantile",
]

LOG_ZERO = -np.inf

# Below this truncated mass, rejection from the parent normal is abandoned
# in favour of inverse-CDF sampling.
_REJECTION_MIN_MASS = 0.01


def _logdiffexp(a, b):
    """log(exp(a) - exp(b)) for a >= b."""
    with np.errstate(divide="ignore"):
        return a + np.log1p(-np.exp(b - a))


def _log_normal_mass(a, b):
    """log(Phi(b) - Phi(a)) for standardised bounds, stable in both tails."""
    if a > 0:
        return float(_logdiffexp(log_ndtr(-a), log_ndtr(-b)))
    return float(_logdiffexp(log_ndtr(b), log_ndtr(a)))


@dataclass(frozen=True)
class Normal:
    mean: float
    sd: float

    def __post_init__(self):
        if not self.sd > 0:
            raise DomainError(f"Normal sd must be > 0, got {self.sd}")

    @property
    def lower(self):
        return -np.inf

    @property
    def upper(self):
        return np.inf

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return self.mean + self.sd * rng.standard_normal(size)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.mean) / self.sd
        return -0.5 * z * z - math.log(self.sd) - 0.5 * math.log(2 * math.pi)

    def __str__(self):
        return f"normal({self.mean!r}, {self.sd!r})"


@dataclass(frozen=True)
class TruncNormal:
    """Normal(mean, sd**2) restricted to [lower, upper]."""

    mean: float
    sd: float
    lower: float = -np.inf
    upper: float = np.inf

    def __post_init__(self):
        if not self.sd > 0:
            raise DomainError(f"TruncNormal sd must be > 0, got {self.sd}")
        if not self.lower < self.upper:
            raise DomainError("TruncNormal needs lower < upper")

    @property
    def _std_bounds(self):
        return (self.lower - self.mean) / self.sd, (self.upper - self.mean) / self.sd

    @property
    def log_mass(self) -> float:
        return _log_normal_mass(*self._std_bounds)

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        a, b = self._std_bounds
        n = int(np.prod(size))
        if math.exp(self.log_mass) >= _REJECTION_MIN_MASS:
            out = np.empty(0)
            while out.size < n:
                z = rng.standard_normal(max(2 * (n - out.size), 16))
                out = np.concatenate([out, z[(z >= a) & (z <= b)]])
            z = out[:n]
        else:
            z = stats.truncnorm.ppf(rng.random(n), a, b)
        return (self.mean + self.sd * z).reshape(size)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.mean) / self.sd
        dens = -0.5 * z * z - math.log(self.sd) - 0.5 * math.log(2 * math.pi) - self.log_mass
        inside = (x >= self.lower) & (x <= self.upper)
        return np.where(inside, dens, LOG_ZERO)

    def __str__(self):
        return f"tnormal({self.mean!r}, {self.sd!r}, {self.lower!r}, {self.upper!r})"


@dataclass(frozen=True)
class Uniform:
    lower: float
    upper: float

    def __post_init__(self):
        if not self.lower < self.upper:
            raise DomainError("Uniform needs lower < upper")

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size)

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x >= self.lower) & (x <= self.upper)
        return np.where(inside, -math.log(self.upper - self.lower), LOG_ZERO)

    def __str__(self):
        return f"uniform({self.lower!r}, {self.upper!r})"


Marginal = Union[Normal, TruncNormal, Uniform]

_MARGINAL_RE = re.compile(r"^\s*(normal|tnormal|truncnormal|uniform)\s*\((.*)\)\s*$", re.I)


def marginal_from_string(text: str) -> Marginal:
    """Parse ``normal(m, sd)``, ``tnormal(m, sd, lo, hi)`` or ``uniform(lo, hi)``.

    Bounds accept ``inf`` / ``-inf``.  Scale arguments are standard
    deviations, not variances.
    """
    m = _MARGINAL_RE.match(text)
    if not m:
        raise DomainError(f"cannot parse prior {text!r}")
    kind = m.group(1).lower()
    try:
        args = [float(a) for a in m.group(2).split(",")]
    except ValueError as exc:
        raise DomainError(f"cannot parse prior {text!r}") from exc
    arity = {"normal": (2,), "tnormal": (2, 3, 4), "truncnormal": (2, 3, 4), "uniform": (2,)}[kind]
    if len(args) not in arity:
        raise DomainError(f"wrong number of arguments in prior {text!r}")
    if kind == "normal":
        return Normal(*args)
    if kind == "uniform":
        return Uniform(*args)
    return TruncNormal(*args)


@dataclass(frozen=True)
class PriorSpec:
    """Independent marginal priors over the free parameters.

    ``marginals`` maps free parameter names to their prior (insertion order
    defines the column order of parameter matrices).  Every other model
    parameter must appear in ``fixed``.
    """

    marginals: Mapping[str, Marginal]
    fixed: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "marginals", dict(self.marginals))
        object.__setattr__(self, "fixed", {k: float(v) for k, v in self.fixed.items()})
        both = set(self.marginals) & set(self.fixed)
        if both:
            raise DomainError(f"parameters both free and fixed: {sorted(both)}")
        unknown = (set(self.marginals) | set(self.fixed)) - set(PARAM_NAMES)
        if unknown:
            raise DomainError(f"unknown parameters: {sorted(unknown)}")
        missing = set(PARAM_NAMES) - set(self.marginals) - set(self.fixed)
        if missing:
            raise DomainError(f"parameters neither free nor fixed: {sorted(missing)}")

    @property
    def names(self) -> tuple:
        return tuple(self.marginals)

    @property
    def dim(self) -> int:
        return len(self.marginals)

    @property
    def lower(self) -> np.ndarray:
        return np.array([m.lower for m in self.marginals.values()], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([m.upper for m in self.marginals.values()], dtype=float)

    def sample(self, rng: RngLike, size: int) -> np.ndarray:
        """Draw a ``(size, dim)`` matrix, redrawing rows outside the model domain."""
        gen = as_generator(rng)
        out = np.column_stack([m.sample(gen, size) for m in self.marginals.values()])
        bad = ~np.isfinite(self.log_density(out))
        # e.g. a Normal prior on beta0 crossing zero; vanishingly rare
        for _ in range(100):
            if not bad.any():
                break
            redraw = np.column_stack([m.sample(gen, int(bad.sum())) for m in self.marginals.values()])
            out[bad] = redraw
            bad = ~np.isfinite(self.log_density(out))
        return out.reshape(size, self.dim)

    def log_density(self, theta) -> np.ndarray:
        """Sum of marginal log-densities over the last axis; -inf off support.

        Rows violating the model's sign constraints (alpha, gamma, beta0 > 0;
        nu_beta, phi >= 0) also get -inf.
        """
        theta = np.asarray(theta, dtype=float)
        if theta.shape[-1] != self.dim:
            raise DomainError(f"expected {self.dim} parameters, got {theta.shape[-1]}")
        total = np.zeros(theta.shape[:-1])
        for j, m in enumerate(self.marginals.values()):
            total = total + m.logpdf(theta[..., j])
        ok = self.to_params(theta, trailing=0).in_domain()
        total = np.where(ok & np.isfinite(theta).all(axis=-1), total, LOG_ZERO)
        return total

    def to_params(self, theta, trailing: int = 0) -> ParamVector:
        """Build a :class:`ParamVector` from a parameter matrix.

        ``trailing`` appends that many singleton axes to every free field so
        a ``(B, dim)`` matrix drives ``(B, N_x, ...)`` ensembles.
        """
        theta = np.asarray(theta, dtype=float)
        values = dict(self.fixed)
        for j, name in enumerate(self.names):
            col = theta[..., j]
            values[name] = col.reshape(col.shape + (1,) * trailing) if col.ndim else float(col)
        with np.errstate(invalid="ignore"):
            return _unchecked_params(values, self.names)

    def from_params(self, theta: ParamVector) -> np.ndarray:
        return np.stack([np.asarray(getattr(theta, n), dtype=float) for n in self.names], axis=-1)

    def clip(self, theta) -> np.ndarray:
        return np.clip(theta, self.lower, self.upper)


def _unchecked_params(values: dict, free) -> ParamVector:
    # Proposals may carry non-finite or out-of-domain rows that are later
    # rejected through the prior; skip the constructor's finiteness check.
    pv = object.__new__(ParamVector)
    for name in PARAM_NAMES:
        object.__setattr__(pv, name, values[name])
    object.__setattr__(pv, "free", tuple(free))
    return pv


def sample_prior(spec: PriorSpec, rng: RngLike) -> ParamVector:
    """Draw one parameter vector from the prior."""
    theta = spec.sample(rng, 1)[0]
    values = dict(spec.fixed)
    values.update({n: float(v) for n, v in zip(spec.names, theta)})
    return ParamVector(**values, free=spec.names)


def log_prior_density(theta: ParamVector | np.ndarray, spec: PriorSpec):
    """Log prior density of a :class:`ParamVector` or a parameter matrix."""
    if isinstance(theta, ParamVector):
        theta = spec.from_params(theta)
    out = spec.log_density(theta)
    return float(out) if np.ndim(out) == 0 else out


def normalize_log_weights(log_weights, axis: int = -1) -> np.ndarray:
    """Exponentiate log-weights after subtracting the max and normalise.

    Raises
    ------
    DegenerateWeightsError
        If any slice along ``axis`` has no finite entry.
    """
    lw = np.asarray(log_weights, dtype=float)
    lw = np.where(np.isnan(lw), LOG_ZERO, lw)
    top = np.max(lw, axis=axis, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise DegenerateWeightsError("all log-weights are -inf")
    w = np.exp(lw - top)
    return w / w.sum(axis=axis, keepdims=True)


def ess(weights, axis: int = -1):
    """Effective sample size 1 / sum(w**2) of normalised weights."""
    w = np.asarray(weights, dtype=float)
    out = 1.0 / np.sum(w * w, axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def stratified_resample(weights, rng: RngLike, n: int | None = None, uniforms=None) -> np.ndarray:
    """Stratified resampling.

    One uniform is drawn in each of ``n`` equal strata of [0, 1] and mapped
    through the inverse of the cumulative weights.  A 2-D ``weights`` array
    is resampled row by row.  Indices are 0-based.  ``uniforms`` (shape
    ``(rows, n)``) may supply pre-drawn U(0, 1) variates, in which case
    ``rng`` is ignored.

    Raises
    ------
    DegenerateWeightsError
        If a row of weights sums to zero or contains non-finite values.
    """
    w = np.asarray(weights, dtype=float)
    squeeze = w.ndim == 1
    w = np.atleast_2d(w)
    rows, m = w.shape
    n = m if n is None else int(n)
    total = w.sum(axis=1, keepdims=True)
    if np.any(~np.isfinite(w)) or np.any(w < 0) or np.any(total <= 0):
        raise DegenerateWeightsError("weights must be finite, non-negative and not all zero")
    cum = np.cumsum(w / total, axis=1)
    cum[:, -1] = 1.0
    if uniforms is None:
        uniforms = as_generator(rng).random((rows, n))
    # 1 - U lies in (0, 1], so u > 0 can never land on a leading zero weight
    u = (np.arange(n) + (1.0 - np.reshape(uniforms, (rows, n)))) / n
    offsets = np.arange(rows, dtype=float)[:, None]
    idx = np.searchsorted((cum + offsets).ravel(), (u + offsets).ravel(), side="left")
    idx = idx.reshape(rows, n) - (np.arange(rows) * m)[:, None]
    idx = np.clip(idx, 0, m - 1)
    return idx[0] if squeeze else idx


def weighted_quantile(values, weights, q) -> np.ndarray:
    """Quantiles of a weighted sample.

    Inverse of the weighted empirical CDF: the smallest order statistic whose
    cumulative weight reaches ``q``.  When ``q`` coincides with a cumulative
    weight (to 1e-12) the two adjacent order statistics are averaged, which
    recovers the usual median of an even-sized equally weighted sample.  With
    values (0, 1) and weights (0.25, 0.75) the median is therefore 1.
    """
    x = np.asarray(values, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    keep = w > 0
    x, w = x[keep], w[keep]
    if x.size == 0:
        raise DegenerateWeightsError("no positive weights")
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order]
    cum = np.cumsum(w)
    cum /= cum[-1]
    qs = np.atleast_1d(np.asarray(q, dtype=float))
    k = np.searchsorted(cum, qs - 1e-12, side="left")
    k = np.clip(k, 0, x.size - 1)
    out = x[k]
    tie = (np.abs(cum[k] - qs) <= 1e-12) & (k < x.size - 1)
    out = np.where(tie, 0.5 * (x[k] + x[np.minimum(k + 1, x.size - 1)]), out)
    return out if np.ndim(q) else float(out[0])


def log_mean_exp(log_values, axis: int = -1):
    """log(mean(exp(v))) along ``axis``; all -inf gives -inf."""
    lv = np.asarray(log_values, dtype=float)
    with np.errstate(divide="ignore"):
        return logsumexp(lv, axis=axis) - math.log(lv.shape[axis])
