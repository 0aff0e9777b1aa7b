"""Sequential Bayesian inference for stochastic SEIR state-space models.

Ensemble SMC^2 (EnKF likelihood inside an SMC sampler over parameters), the
particle-filter SMC^2 and Liu-West baselines, plus simulation, forecasting
and accuracy metrics.
"""

__version__ = "0.1.0"
