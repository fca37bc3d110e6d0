"""Offline personalized pricing from confounded logs.

The package learns a quadratic-revenue pricing policy from logged tuples
(y, x, g, p) where the logged price p was set under latent factors and the
auxiliary rate g may shift revenue directly. Identification goes through an
8-dimensional conditional moment restriction estimated adversarially over
random-feature function classes; baselines, simulators, a loan-pricing
pipeline, and a seeded experiment harness round out the library.
"""

from .errors import (
    ConfigError,
    DataError,
    DegenerateSystem,
    InvalidModel,
    IvpriceError,
    NonFiniteObjective,
    SingularWeighting,
)
from .simulator import (
    Dataset,
    Sample,
    SimParams,
    generate_dataset,
    oracle_beta,
    oracle_policy,
    policy_value,
    read_csv,
    regret,
    write_csv,
)
from .discrete_scm import DiscreteSCM, build_discrete_scm, load_discrete_scm
from .moments import (
    ConstantFunction,
    MomentSystem,
    NuisanceAlpha,
    TabulatedFunction,
    conditional_moment,
    eval_W,
    eval_rho,
    identify_beta,
    moment_system,
    phi_objective,
    sigma_alpha,
    true_nuisances,
)
from .function_spaces import (
    FeatureMap,
    ScalarFunction,
    VectorAdversary,
    critical_radius,
    make_feature_map,
    median_bandwidth,
    rademacher_bound,
)
from .minimax import (
    FeatureLinearAlpha,
    FitResult,
    MinimaxConfig,
    fit,
    grad_alpha,
    init_two_stage,
    inner_max,
    objective,
    psi_n,
)
from .policy import (
    ConstantPolicy,
    LinearPolicy,
    PricingPolicy,
    QuadraticArgmaxPolicy,
    TabulatedPolicy,
    extract_policy,
    load_policy,
    write_price_table,
)
from .baselines import (
    GpsDensityRatio,
    KernelIPSConfig,
    RegressionFit,
    estimate_gps,
    fit_kernel_ips,
    fit_regression_baseline,
    ips_value,
    regression_policy,
)
from .experiment import (
    DEFAULT_PRINT_CONFIG,
    ExperimentConfig,
    fit_print_policy,
    run_experiment,
    summarize_rows,
)
from .loans import (
    DemandModel,
    LoanRecord,
    LoanTable,
    compute_price,
    evaluate_on_demand,
    fit_demand,
    generate_loan_table,
    partial_dependence,
    read_loan_csv,
    write_loan_csv,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "DegenerateSystem", "InvalidModel", "IvpriceError",
    "NonFiniteObjective", "SingularWeighting",
    "Dataset", "Sample", "SimParams", "generate_dataset", "oracle_beta",
    "oracle_policy", "policy_value", "read_csv", "regret", "write_csv",
    "DiscreteSCM", "build_discrete_scm", "load_discrete_scm",
    "ConstantFunction", "MomentSystem", "NuisanceAlpha", "TabulatedFunction",
    "conditional_moment", "eval_W", "eval_rho", "identify_beta", "moment_system",
    "phi_objective", "sigma_alpha", "true_nuisances",
    "FeatureMap", "ScalarFunction", "VectorAdversary", "critical_radius",
    "make_feature_map", "median_bandwidth", "rademacher_bound",
    "FeatureLinearAlpha", "FitResult", "MinimaxConfig", "fit", "grad_alpha",
    "init_two_stage", "inner_max", "objective", "psi_n",
    "ConstantPolicy", "LinearPolicy", "PricingPolicy", "QuadraticArgmaxPolicy",
    "TabulatedPolicy", "extract_policy", "load_policy", "write_price_table",
    "GpsDensityRatio", "KernelIPSConfig", "RegressionFit", "estimate_gps",
    "fit_kernel_ips", "fit_regression_baseline", "ips_value", "regression_policy",
    "DEFAULT_PRINT_CONFIG", "ExperimentConfig", "fit_print_policy",
    "run_experiment", "summarize_rows",
    "DemandModel", "LoanRecord", "LoanTable", "compute_price",
    "evaluate_on_demand", "fit_demand", "generate_loan_table",
    "partial_dependence", "read_loan_csv", "write_loan_csv",
    "__version__",
]
