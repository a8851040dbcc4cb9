"""ICE g-computation as stacked estimating equations with sandwich variance."""

from .data import (LongitudinalDataset, ParseError, TreatmentPlan, ValidationError, followers_mask,
                   load_csv, to_csv, validate)
from .design import DesignSpec, MissingColumn, design_matrix
from .ice import (ContrastResult, DimensionMismatch, EstimateResult, EventNonMonotone, IceConfig,
                  IceTheta, build_stacked_contrast_system, build_stratified_system,
                  build_survival_system, build_unstratified_system, estimate, estimate_contrast,
                  sequential_ice)
from .logistic import expit, logit
from .mest import (ConvergenceFailure, EstimatingSystem, NonFiniteEvaluation, SingularBread,
                   SingularJacobian, SolveConfig, bread, m_estimate, meat, numerical_jacobian,
                   sandwich_variance, solve_estimating_equations, wald_ci)

__version__ = "0.1.0"
