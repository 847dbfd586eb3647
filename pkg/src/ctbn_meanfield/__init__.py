"""Mean-field variational inference for continuous-time Bayesian networks."""

from .ode import (
    IntegratorConfig,
    OdeSolution,
    ScaledSolution,
    integrate,
    integrate_scaled,
    quadrature,
)

__version__ = "0.1.0"
