"""Static parameter vector of the SEIR state-space model."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Sequence

import numpy as np

PARAM_NAMES = ("alpha", "gamma", "nu_beta", "phi", "beta0")


@dataclass(frozen=True)
class ParamVector:
    """Model parameters.

    Each field is a float or an array.  Arrays carry a batch of parameter
    particles and must broadcast against the ensemble axis of the states they
    drive, e.g. shape ``(B, 1)`` for states of shape ``(B, N_x, 6)``.

    Attributes
    ----------
    alpha : latency rate (1/day), > 0
    gamma : recovery rate (1/day), > 0
    nu_beta : volatility of log transmission rate (1/sqrt(day)), >= 0
    phi : NegBin overdispersion, >= 0 (0 means Poisson)
    beta0 : initial transmission rate (1/day), > 0
    free : names of inferred parameters; the rest are held fixed
    """

    alpha: float | np.ndarray
    gamma: float | np.ndarray
    nu_beta: float | np.ndarray = 0.0
    phi: float | np.ndarray = 0.0
    beta0: float | np.ndarray = 0.3
    free: tuple = ()

    def __post_init__(self):
        for name in PARAM_NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"parameter {name} must be finite")
        unknown = set(self.free) - set(PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown free parameters: {sorted(unknown)}")
        object.__setattr__(self, "free", tuple(self.free))

    def replace(self, **changes) -> "ParamVector":
        return replace(self, **changes)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "free"}

    def in_domain(self) -> np.ndarray:
        """Boolean (broadcast) mask of entries that satisfy the model's sign constraints."""
        return (
            (np.asarray(self.alpha) > 0)
            & (np.asarray(self.gamma) > 0)
            & (np.asarray(self.nu_beta) >= 0)
            & (np.asarray(self.phi) >= 0)
            & (np.asarray(self.beta0) > 0)
        )

    def take(self, index, names: Sequence[str] = PARAM_NAMES) -> "ParamVector":
        """Select batch rows of the array-valued fields; scalars pass through."""
        changes = {}
        for name in names:
            value = getattr(self, name)
            if np.ndim(value) > 0:
                changes[name] = np.asarray(value)[index]
        return replace(self, **changes)
