"""Numerical solver for singular backward stochastic Volterra integral equations."""

__version__ = "0.1.0"

from .condexp import (
    LevelRegression,
    MartingaleRep,
    PolynomialConditionalMean,
    RegressionBasis,
    condexp,
    driver_representation,
    martingale_representation,
    representation_residual,
)
from .config import ConfigError, RunConfig
from .kernel import (
    FractionalOrder,
    ProductRule,
    cell_kernel_average,
    kernel_moment,
    kernel_value,
    product_weight_matrix,
    product_weights,
    squared_kernel_constant,
)
from .linear import (
    BoundAudit,
    LinearBSVIESolver,
    LinearData,
    LinearSolution,
    apriori_bound_audit,
    intermediate_bounds,
    residual_check,
    solve_linear,
)
from .modulus import ModulusRho
from .picard import (
    AssumptionError,
    ConstantsBlock,
    DivergedError,
    PicardConfig,
    PicardSolver,
    PicardTrace,
    audit_contraction,
    audit_iterate_bounds,
    audit_phi_domination,
    check_assumptions,
    compute_constants,
    compute_T0,
    phi_sequences,
    picard_iterate,
    solve_problem,
    uniqueness_distance,
    verify_solution,
)
from .scenarios import SCENARIOS, Scenario, get_scenario, list_scenarios, mittag_leffler_x0
from .stochastic import (
    AdaptedProcess,
    PathEnsemble,
    ProblemSpec,
    TimeGrid,
    TwoParamField,
    WienerSpec,
    deterministic_ensemble,
    empirical_m_norm,
    generate_paths,
)

