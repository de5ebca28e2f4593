"""Linear-quadratic mean-field control: exact solutions and policy-gradient methods."""

from .analytic import (
    CostBreakdown,
    CovariancePair,
    GradientEstimate,
    RiccatiSolution,
    exact_cost,
    exact_gradient,
    exact_pg_run,
    fd_gradient,
    optimal_gains,
    solve_lyapunov_value,
    state_covariances,
)
from .errors import (
    AdmissibilityError,
    ConfigError,
    LqmfpgError,
    ModelValidationError,
    NumericsError,
    StepError,
)
from .finite_agent import (
    build_stacked,
    eval_social_cost,
    heterogeneity_sweep,
    phi_mkv,
    solve_n_agent_optimal,
)
from .kernels import BACKEND
from .model import (
    ControlParams,
    MfcModel,
    NoiseSpec,
    NoiseSuite,
    augment,
    is_admissible,
    table1_model,
    validate_model,
)
from .simulators import PopulationConfig, draw_q_variations, mkv_rollout, pop_rollout
from .trace import ConvergenceTrace
from .zo_pg import (
    GD,
    Adam,
    ZoConfig,
    estimate_gradient_mkv,
    estimate_gradient_pop,
    pg_run,
    sample_sphere,
    truncation_horizon,
)

__version__ = "0.1.0"
