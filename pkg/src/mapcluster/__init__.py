"""Global MAP clustering for Gaussian mixtures with known covariance."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    Assignment,
    ContractError,
    Dataset,
    GaussianRidge,
    MapSolution,
    Metrics,
    NotPSDError,
    Params,
    ProblemSpec,
    Uniform,
    conditional_params,
    evaluate_objective,
    optimal_pi,
    solution_for,
    solution_metrics,
)
from .constraints import (  # noqa: E402
    AssignLabel,
    CannotLink,
    Cover,
    EstimatorLink,
    MinSize,
    MustLink,
    OneWay,
    OrderPi,
    Pack,
    Partition,
    propagate,
    validate,
)
from .formulation import build_miqp, pwl_chords, true_bound_correction  # noqa: E402
from .relaxation import Tolerances, solve_relaxation  # noqa: E402
from .bnb import BnbOptions, BnbResult, Status, Strategy, local_polish, round_and_repair, select_branch_var, solve  # noqa: E402
from .heuristics import Schedule, em, em_multistart, kmeans_init, simulated_annealing  # noqa: E402
from .oracle import brute_force  # noqa: E402
