"""Branching-diffusion Monte Carlo for semi-linear counterparty-risk PDEs."""

from .diffusion import ItoProcessSpec, StatePoint, sample_path_at, sample_transition
from .gwtree import (BranchingConfig, McEstimate, Mode, TreeSample, estimate,
                     simulate_sample_mtm, simulate_sample_nonlinear,
                     simulate_sample_timeweighted)
from .nonlinearity import (CHOICEU, CHOICEU_ABS, PayoffSpec, Polynomial, ProbabilityVector,
                           fit_bounding, fit_positive_part, mtm_transform,
                           optimal_probabilities)

__version__ = "0.1.0"
