"""Gaussian predictive densities from finite ensembles.

``unbiased_gaussian_logpdf`` implements the Ghurye-Olkin estimator: given the
sample mean and unbiased sample covariance of ``n`` Gaussian draws, the
exponential of its output has expectation equal to the true density at ``y``.
All functions accept leading batch axes.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import gammaln

from .errors import DomainError, PreconditionError
from .stochastic import LOG_ZERO

_PIVOT_RTOL = 1e-12
_SYMMETRY_RTOL = 1e-12


def log_c(d: int, v: float) -> float:
    """log c(d, v) = -(d v / 2) log 2 - d (d-1)/4 log pi - sum_i logGamma((v-i+1)/2)."""
    if not v > d - 1:
        raise DomainError(f"log_c needs v > d - 1 (d={d}, v={v})")
    i = np.arange(1, d + 1)
    return float(
        -0.5 * d * v * math.log(2.0)
        - 0.25 * d * (d - 1) * math.log(math.pi)
        - np.sum(gammaln(0.5 * (v - i + 1)))
    )


def _ldl_logdet(A):
    """log|A| through an unpivoted LDL^T factorisation, batched over leading axes.

    Returns (logdet, positive_definite).  A pivot counts as non-positive
    when it is below 1e-12 times the largest diagonal entry.
    """
    A = np.asarray(A, dtype=float)
    d = A.shape[-1]
    scale = np.max(np.abs(np.diagonal(A, axis1=-2, axis2=-1)), axis=-1)
    tol = _PIVOT_RTOL * np.where(scale > 0, scale, 1.0)
    L = np.zeros_like(A)
    D = np.zeros(A.shape[:-1])
    pd = np.ones(A.shape[:-2], dtype=bool)
    for j in range(d):
        Dj = A[..., j, j] - np.sum(L[..., j, :j] ** 2 * D[..., :j], axis=-1)
        pd &= Dj > tol
        D[..., j] = Dj
        safe = np.where(Dj > tol, Dj, 1.0)
        for i in range(j + 1, d):
            L[..., i, j] = (A[..., i, j] - np.sum(L[..., i, :j] * L[..., j, :j] * D[..., :j], axis=-1)) / safe
    with np.errstate(divide="ignore", invalid="ignore"):
        logdet = np.sum(np.log(np.where(D > 0, D, 1.0)), axis=-1)
    return logdet, pd


def _as_batch(y, mean, cov):
    y = np.asarray(y, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if cov.ndim < 2 or cov.shape[-1] != cov.shape[-2]:
        raise DomainError("covariance must be a (batch of) square matrix")
    d = cov.shape[-1]
    if mean.shape[-1:] != (d,) or y.shape[-1:] != (d,):
        raise DomainError("y, mean and cov dimensions disagree")
    asym = np.abs(cov - np.swapaxes(cov, -1, -2))
    bound = _SYMMETRY_RTOL * np.maximum(np.max(np.abs(cov), axis=(-1, -2), keepdims=True), 1.0)
    if np.any(asym > bound):
        raise DomainError("covariance is not symmetric")
    return y, mean, cov, d


def unbiased_gaussian_logpdf(y, mean, cov, n: int):
    """Log of the Ghurye-Olkin unbiased estimate of N(y; mu, Sigma).

    Parameters
    ----------
    y : (..., d) array
    mean : (..., d) array
        Sample mean of ``n`` draws.
    cov : (..., d, d) array
        Unbiased sample covariance (divisor ``n - 1``).
    n : int
        Number of draws; must exceed d + 3.

    Returns
    -------
    Log-density estimate, or ``-inf`` where the matrix
    ``M - (y - mean)(y - mean)^T / (1 - 1/n)`` with ``M = (n - 1) cov`` is not
    positive definite.
    """
    y, mean, cov, d = _as_batch(y, mean, cov)
    if not n > d + 3:
        raise PreconditionError(f"unbiased estimator needs n > d + 3 (n={n}, d={d})")
    shrink = 1.0 - 1.0 / n
    M = (n - 1.0) * cov
    diff = y - mean
    A = M - diff[..., :, None] * diff[..., None, :] / shrink
    logdet_M, pd_M = _ldl_logdet(M)
    logdet_A, pd_A = _ldl_logdet(A)
    const = (
        -0.5 * d * math.log(2 * math.pi)
        + log_c(d, n - 2)
        - log_c(d, n - 1)
        - 0.5 * d * math.log(shrink)
    )
    out = const - 0.5 * (n - d - 2) * logdet_M + 0.5 * (n - d - 3) * logdet_A
    ok = pd_M & pd_A & np.isfinite(out)
    out = np.where(ok, out, LOG_ZERO)
    return float(out) if np.ndim(out) == 0 else out


def unbiased_gaussian_logpdf_1d(y, mean, var, n: int):
    """Scalar-observation special case of :func:`unbiased_gaussian_logpdf`.

    ``y``, ``mean`` and ``var`` broadcast against each other.
    """
    if not n > 4:
        raise PreconditionError(f"unbiased estimator needs n > 4 for scalar data (n={n})")
    shrink = 1.0 - 1.0 / n
    M = (n - 1.0) * np.asarray(var, dtype=float)
    A = M - (np.asarray(y, dtype=float) - mean) ** 2 / shrink
    const = -0.5 * math.log(2 * math.pi) + log_c(1, n - 2) - log_c(1, n - 1) - 0.5 * math.log(shrink)
    ok = (M > 0) & (A > _PIVOT_RTOL * np.abs(M))
    with np.errstate(divide="ignore", invalid="ignore"):
        out = const - 0.5 * (n - 3) * np.log(np.where(M > 0, M, 1.0)) + 0.5 * (n - 4) * np.log(
            np.where(ok, A, 1.0)
        )
    out = np.where(ok & np.isfinite(out), out, LOG_ZERO)
    return float(out) if np.ndim(out) == 0 else out


def standard_gaussian_logpdf(y, mean, cov):
    """Exact multivariate normal log-density at plug-in moments.

    Raises
    ------
    DomainError
        If any covariance in the batch is not positive definite.
    """
    y, mean, cov, d = _as_batch(y, mean, cov)
    logdet, pd = _ldl_logdet(cov)
    if not np.all(pd):
        raise DomainError("covariance is singular or indefinite")
    diff = y - mean
    maha = np.einsum("...i,...i->...", diff, np.linalg.solve(cov, diff[..., None])[..., 0])
    out = -0.5 * (d * math.log(2 * math.pi) + logdet + maha)
    return float(out) if np.ndim(out) == 0 else out


def standard_gaussian_logpdf_1d(y, mean, var):
    var = np.asarray(var, dtype=float)
    if np.any(~(var > 0)):
        raise DomainError("variance must be positive")
    out = -0.5 * (np.log(2 * math.pi * var) + (np.asarray(y, dtype=float) - mean) ** 2 / var)
    return float(out) if np.ndim(out) == 0 else out
