"""Covariate-driven diffeomorphic deformations for nonstationary Gaussian processes.

Per-covariate velocity fields are composed through their exponential-map
flows to deform a regular grid; an isotropic Matérn kernel evaluated on the
deformed coordinates gives the nonstationary covariance.
"""

from . import _backend
from .errors import (ConditioningError, ConfigError, CovDeformError, DivergenceError, FitError,
                     IngestionError, InputError)
from .estimation import (FitConfig, FitResult, ModelParams, TrainingSample, fit, loss_and_gradient,
                         loss_gradient, mapping_loss, predict_deformation)
from .flow import (FlowConfig, FoldReport, apply_flow, commutator_loop_defect, compose_covariate_flows,
                   eval_velocity, exp_map, fold_condition_check, jacobian_determinant, lie_bracket)
from .grid import DeformationMap, GridDomain
from .kernel import (CovarianceMatrix, IsotropicKernel, JitterPolicy, Realization, build_nonstationary_cov,
                     calibrate_unit_range, log_likelihood, matern_value, sample_gp)
from .links import LinkFunction
from .prediction import (BaselineModel, PredictionResult, ScoreTable, compare_likelihoods, fit_ard_baseline,
                         fit_stationary_baseline, predict_covariance)
from .simulation import Scenario, analytic_field, generate_dataset
from .spline import VelocityField

__version__ = "0.1.0"

backend = _backend.current
