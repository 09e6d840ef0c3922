"""Reduced-rank models for partially observed matrices, with generalized
nuclear-norm penalties, side-information metrics, and a warm-started
subspace-iteration SVD at the core of the solver."""

from .errors import (
    BudgetError,
    ConfigError,
    DataError,
    DimensionError,
    DivergenceError,
    MatcompError,
    PredictionError,
    SingularSystemError,
)
from .harness import (
    SyntheticSpec,
    cross_validate,
    default_lambda_grid,
    evaluate,
    generate_functional,
    generate_grouped,
    generate_synthetic,
    lambda_path,
    side_info_ablation,
    split,
)
from .losses import Loss, curvature, loss_gradient_sparse, loss_value, unit_deviance
from .model import (
    BlockGradients,
    Gamma1,
    Margin,
    ModelSpec,
    ModelState,
    block_gradients,
    build_spec,
    dense_theta,
    objective,
    theta_on_omega,
    zero_state,
)
from .operators import (
    ObservedMatrix,
    SymmetricSolvable,
    add,
    compose,
    dense,
    diagonal,
    flops,
    identity,
    low_rank,
    scale,
    sparse,
    transpose,
    woodbury_solve,
)
from .serialize import load_model, save_model
from .sideinfo import (
    ColumnSubspace,
    FeatureMatrix,
    SideMetric,
    column_subspace_model,
    identity_metric,
    natural_spline_basis,
    nested_spline_bases,
    projection_hat,
    ridge_hat,
    smoother_metric,
)
from .solver import (
    FitTrace,
    SolveOptions,
    fit_frank_wolfe,
    fit_null_model,
    fit_proximal,
    lambda_max,
    predict,
)
from .svd import (
    SvdResult,
    WarmBasis,
    orthonormalize,
    soft_threshold_svd,
    subspace_svd,
)

__version__ = "0.1.0"
