"""Task-driven exploration for learning controllers of unknown nonlinear systems.

Library layout: ``dynamics`` (models, rollouts, covariances), ``estimation``
(least squares and task-weighted metrics), ``control`` (policy families and
synthesis), ``hessian`` (model-task curvature), ``oed`` (experiment design and
the regret-oracle loop), ``scenarios`` (the benchmark systems and exploration
methods), ``harness`` (CLI and persistence).
"""

from .dynamics import (
    Covariates,
    FeatureMap,
    LiveSystem,
    SystemModel,
    Trajectory,
    estimate_policy_covariance,
    rollout,
    step,
)
from .estimation import EstimatorConfig, design_score, least_squares, weighted_error
from .control import (
    CostFunction,
    QuadraticCost,
    SynthesisResult,
    evaluate_cost,
    synthesize_bump_matching,
    synthesize_lqr_affine,
    synthesize_random_search,
)
from .hessian import ModelTaskHessian, SynthesisBundle, hessian_fd, hessian_gauss_newton
from .oed import (
    DesignObjective,
    MpcConfig,
    OedOutcome,
    TheoryConstants,
    dynamic_oed,
    learn_exp_policies,
    min_eig,
    reduce_hessian,
    thompson_mpc_oracle,
)
from .scenarios import Scenario, build_scenario, run_trial

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
