"""classfool: class-universal targeted perturbations for softmax classifiers.

Estimate a single additive perturbation that makes a victim classifier
predict a chosen target label for any sample of a chosen source class,
while keeping the other classes' predictions intact. Ships two small
builtin victim networks, dataset tooling, evaluation metrics and an
unbounded variant for exploring classification regions.
"""

from .attack import (AttackState, IterationRecord, TargetedPerturbation,
                     accumulate_step, bias_corrected_step, combined_gradient,
                     perturb_and_clip, project, sample_minibatch,
                     scaling_factor, update_moments)
from .data import (PoolSet, SampleBatch, TrainPools, build_pools,
                   build_train_pools, export_perturbation_image, load_idx,
                   load_pools, make_blobs, save_idx, save_pools, split_test)
from .exceptions import (ClassfoolError, ConfigError, DegenerateGradientError,
                         FormatError, NumericError, ShapeError, TrainingError,
                         ValidationError, VersionError)
from .metrics import (AblationResult, DistanceMatrix, FoolingReport,
                      HoppingTrace, ablation_compare, distance_matrix,
                      evaluate_attack, fooling_ratio, hopping_trace, leakage)
from .models import (ConvClassifier, DenseClassifier, cross_entropy,
                     finite_difference, finite_difference_gradient,
                     load_checkpoint, save_checkpoint, softmax, train_victim)
from .reporting import (load_artifact, load_report, parse_machine_summary,
                        save_artifact, save_report, summarize)

__version__ = "0.1.0"

__all__ = [
    "AblationResult", "AttackState", "ClassfoolError", "ConfigError",
    "ConvClassifier", "DegenerateGradientError", "DenseClassifier",
    "DistanceMatrix", "FoolingReport", "FormatError", "HoppingTrace",
    "IterationRecord", "NumericError", "PoolSet", "SampleBatch", "ShapeError",
    "TargetedPerturbation", "TrainPools", "TrainingError", "ValidationError",
    "VersionError", "ablation_compare", "accumulate_step",
    "bias_corrected_step", "build_pools", "build_train_pools",
    "combined_gradient", "cross_entropy", "distance_matrix",
    "evaluate_attack", "export_perturbation_image", "finite_difference",
    "finite_difference_gradient", "fooling_ratio", "hopping_trace",
    "leakage", "load_artifact", "load_checkpoint", "load_idx", "load_pools",
    "load_report", "make_blobs", "parse_machine_summary", "perturb_and_clip",
    "project", "sample_minibatch", "save_artifact", "save_checkpoint",
    "save_idx", "save_pools", "save_report", "scaling_factor", "softmax",
    "split_test", "summarize", "train_victim", "update_moments",
]
