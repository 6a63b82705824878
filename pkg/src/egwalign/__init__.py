"""Neural estimation of entropic alignment costs between sample clouds.

The estimator couples two point clouds by minimizing a regularized
alignment objective over a correlation matrix, with the inner transport
problem solved in semi-dual form by a small ReLU network.  Ground-truth
oracles (1-D grid search, exact inner solver, closed-form Gaussian plan)
live alongside for validation.
"""
from .net import (
    AdamState,
    MlpGrads,
    MlpParams,
    TrainPlan,
    adam_step,
    backward,
    forward,
    forward_batch,
    init_adam,
    init_params,
    params_from_json,
    params_to_json,
    project_params,
)
from .oracles import (
    FdReport,
    SlopeFit,
    coupling_covariance,
    finite_diff_check,
    fit_loglog_slope,
    gaussian_iegw_plan_1d,
    grid_oracle_1d,
)
from .outer import (
    EgwResult,
    OuterTrace,
    StepSchedule,
    StopRule,
    approx_gradient,
    estimate,
    export_plan,
    marginal_constant_inner,
    marginal_constant_quadratic,
    project_box,
    step_schedule,
)
from .samples import (
    CsvFormatError,
    MomentSummary,
    SampleSet,
    center,
    derive_seed,
    gen_gaussian_iso,
    gen_gaussian_random_cov,
    gen_uniform_cube,
    load_csv,
    make_rng,
    moments,
    random_orthogonal,
    save_csv,
)
from .semidual import (
    ConvergenceError,
    CostSpec,
    CouplingMatrix,
    KIND_INNER,
    KIND_QUADRATIC,
    NumericalFailure,
    PotentialVector,
    SinkhornResult,
    cost_matrix,
    coupling,
    coupling_dense,
    ctransform,
    kl_between,
    potential_plan_stats,
    semidual_grad_fvals,
    semidual_value,
    sinkhorn,
    train_potential,
)

__version__ = "0.1.0"
