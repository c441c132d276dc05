"""Compress collections of task vectors into a few convex bases and do task arithmetic on them."""

__version__ = "0.1.0"

from .arithmetic import (
    LnsConfig,
    MaskSet,
    MergedModel,
    MergeSpec,
    merge,
    merge_lns,
    merge_ta,
    merge_ties,
    negate,
    ood_merge,
    reconstruct,
    subsample_plan,
    trim_elect_merge,
)
from .bases import (
    AeConfig,
    BasisModel,
    Method,
    achievability_certificate,
    fit_ae,
    fit_pca,
    fit_rand_proj,
    fit_rand_select,
    load_model,
    save_model,
)
from .online import BufferState, online_step, run_stream
from .testbed import (
    QuadraticTask,
    QuadraticTaskSuite,
    generate_suite,
    measure_constants,
    verify_addition_bound,
    verify_negation_bound,
    verify_ood_bound,
)
from .vecstore import GramMatrix, TaskVectorMatrix, gram, load_collection, save_collection, spectral_bounds

__all__ = [
    "AeConfig", "BasisModel", "BufferState", "GramMatrix", "LnsConfig", "MaskSet", "MergeSpec",
    "MergedModel", "Method", "QuadraticTask", "QuadraticTaskSuite", "TaskVectorMatrix",
    "achievability_certificate", "fit_ae", "fit_pca", "fit_rand_proj", "fit_rand_select",
    "generate_suite", "gram", "load_collection", "load_model", "measure_constants", "merge",
    "merge_lns", "merge_ta", "merge_ties", "negate", "online_step", "ood_merge", "reconstruct",
    "run_stream", "save_collection", "save_model", "spectral_bounds", "subsample_plan",
    "trim_elect_merge", "verify_addition_bound", "verify_negation_bound", "verify_ood_bound",
]
