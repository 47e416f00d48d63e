"""Fast Rotne-Prager-Yamakawa mobility products via four Laplace FMM evaluations."""
from .estimator import DirectRPYMobility, RPYMobility
from .evaluator import (
    DIGITS_ORDER,
    DIGITS_THRESHOLD,
    AccuracySetting,
    EvaluationReport,
    LeafSizeError,
    default_radius,
    evaluate,
    relative_error,
)
from .rpy import (
    CoincidentBeadsError,
    RPYParams,
    direct_rpy_matvec,
    rpy_pair,
    rpy_pair_far,
    rpy_pair_near,
    rpy_self,
)
from .tree import BoundingCube, Tree, build_tree, compute_interaction_lists

__version__ = "0.1.0"

__all__ = [
    "AccuracySetting",
    "BoundingCube",
    "CoincidentBeadsError",
    "DIGITS_ORDER",
    "DIGITS_THRESHOLD",
    "DirectRPYMobility",
    "EvaluationReport",
    "LeafSizeError",
    "RPYMobility",
    "RPYParams",
    "Tree",
    "build_tree",
    "compute_interaction_lists",
    "default_radius",
    "direct_rpy_matvec",
    "evaluate",
    "relative_error",
    "rpy_pair",
    "rpy_pair_far",
    "rpy_pair_near",
    "rpy_self",
]
