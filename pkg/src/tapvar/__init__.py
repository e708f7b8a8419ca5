"""Parisi and generalized-TAP variational functionals for mixed p-spin models."""

from .mixtures import (
    ExtendedMeasure,
    MixtureSpec,
    SpinLaw,
    StepCDF,
    StepGamma,
    d1_distance,
    empirical_law,
    load_measure,
    load_mixture,
    load_spin_law,
    project_monotone,
    xi_eval,
)
from .pde import (
    GridConfig,
    NumericalError,
    PdeSolution,
    control_lower_bound,
    scaling_check,
    solve_phi,
    solve_phi_fd,
    solve_theta,
    theta_envelope,
)

__version__ = "0.1.0"
