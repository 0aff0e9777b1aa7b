"""Built-in simulation scenarios and their prior presets."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import InitialCondition, LatentState, ModelConfig, ObsModel, ParamVector, simulate_epidemic
from .rng import RngLike
from .stochastic import Normal, PriorSpec, TruncNormal, Uniform


def example1_beta(t: float) -> float:
    return 0.3 * math.exp(math.sin(2 * math.pi * t / 55) - t / 80)


def example2_beta(t: float) -> float:
    return 0.5 * math.exp(-((t - 15) ** 2) / 20**2) + 0.065


@dataclass(frozen=True)
class Scenario:
    name: str
    T: int
    truth: ParamVector
    beta_schedule: Callable[[float], float]
    prior: PriorSpec
    cfg: ModelConfig = field(default_factory=lambda: ModelConfig(N=500_000, rho=1.0, obs_model=ObsModel.POISSON))
    init: InitialCondition = field(default_factory=InitialCondition)

    def simulate(self, rng: RngLike, T: int | None = None, cfg: ModelConfig | None = None):
        """Ground-truth path (T+1, 6) and counts (T,) for this scenario."""
        cfg = cfg or self.cfg
        beta0 = self.beta_schedule(0.0)
        initial = LatentState(cfg.N - self.init.i0, 0.0, self.init.i0, 0.0, 0.0, math.log(beta0))
        return simulate_epidemic(cfg, self.truth, self.beta_schedule, T or self.T, rng, initial=initial)

    def with_prior(self, prior: PriorSpec) -> "Scenario":
        return Scenario(self.name, self.T, self.truth, self.beta_schedule, prior, self.cfg, self.init)


EXAMPLE1 = Scenario(
    name="example1",
    T=60,
    truth=ParamVector(alpha=0.5, gamma=1 / 7, nu_beta=0.0, phi=0.0, beta0=0.3),
    beta_schedule=example1_beta,
    prior=PriorSpec(
        {
            "alpha": TruncNormal(0.6, 0.3, 0.0, np.inf),
            "gamma": TruncNormal(0.2, 0.1, 0.0, np.inf),
            "nu_beta": Uniform(0.0, 0.5),
            "beta0": Normal(0.3, 0.01),
        },
        fixed={"phi": 0.0},
    ),
)

EXAMPLE2 = Scenario(
    name="example2",
    T=100,
    truth=ParamVector(alpha=1 / 3, gamma=1 / 8, nu_beta=0.0, phi=0.0, beta0=example2_beta(0.0)),
    beta_schedule=example2_beta,
    prior=PriorSpec(
        {
            "alpha": TruncNormal(0.4, 0.2, 0.0, np.inf),
            "gamma": TruncNormal(0.12, 0.2, 0.0, np.inf),
            "nu_beta": Uniform(0.0, 0.3),
            "beta0": Normal(0.35, 0.01),
        },
        fixed={"phi": 0.0},
    ),
)

SCENARIOS = {s.name: s for s in (EXAMPLE1, EXAMPLE2)}


def flat_prior(base: PriorSpec) -> PriorSpec:
    """Replace the alpha, gamma and nu_beta priors by U(0, 1)."""
    marginals = dict(base.marginals)
    for name in ("alpha", "gamma", "nu_beta"):
        if name in marginals:
            marginals[name] = Uniform(0.0, 1.0)
    return PriorSpec(marginals, base.fixed)


PRIOR_PRESETS = {"informative": lambda p: p, "flat": flat_prior}


def mpox_prior() -> PriorSpec:
    """Priors of the 2022 mpox NegBin fit (phi free)."""
    return PriorSpec(
        {
            "beta0": Uniform(0.2, 0.3),
            "alpha": TruncNormal(1 / 7, 0.05, 1 / 21, 1 / 3),
            "gamma": Uniform(1 / 28, 1 / 14),
            "nu_beta": Uniform(0.0, 0.3),
            "phi": Uniform(0.0, 0.05),
        }
    )
