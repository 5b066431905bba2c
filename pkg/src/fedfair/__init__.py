"""Fairness-aware federated learning simulator.

Two-stage pipeline: federated training with loss-based automatic weight
adjusting (plus five baseline aggregation rules), then per-client
fine-tuning with fairness-constrained checkpoint selection. Includes group
fairness metrics, a synthetic imbalanced-client data generator, and a CLI
experiment harness.
"""

from .data import Dataset, SyntheticConfig, generate_synthetic, read_dataset, split_dataset, write_dataset
from .errors import (
    DimensionError,
    ParseError,
    TrainingDivergedError,
    ValidationError,
)
from .estimator import FederatedClassifier
from .federated import (
    AdjusterState,
    FlConfig,
    RoundRecord,
    Strategy,
    aggregate_global,
    compute_aggregation_weights,
    run_in_fl,
    update_scaling_factor,
)
from .harness import (
    ExperimentConfig,
    ExperimentSummary,
    parse_config,
    parse_config_text,
    run_experiment,
)
from .metrics import (
    ClassificationReport,
    FairnessReport,
    GroupedPredictions,
    accuracy_variance,
    classification_report,
    gap_worst_report,
)
from .nn import ModelParams, ModelSpec
from .personalize import (
    CheckpointHistory,
    FinetuneConfig,
    SelectionResult,
    fine_tune_all,
    select_personalized_models,
)

__all__ = [
    "AdjusterState",
    "CheckpointHistory",
    "ClassificationReport",
    "Dataset",
    "DimensionError",
    "ExperimentConfig",
    "ExperimentSummary",
    "FairnessReport",
    "FederatedClassifier",
    "FinetuneConfig",
    "FlConfig",
    "GroupedPredictions",
    "ModelParams",
    "ModelSpec",
    "ParseError",
    "RoundRecord",
    "SelectionResult",
    "Strategy",
    "SyntheticConfig",
    "TrainingDivergedError",
    "ValidationError",
    "accuracy_variance",
    "aggregate_global",
    "classification_report",
    "compute_aggregation_weights",
    "fine_tune_all",
    "gap_worst_report",
    "generate_synthetic",
    "parse_config",
    "parse_config_text",
    "read_dataset",
    "run_experiment",
    "run_in_fl",
    "select_personalized_models",
    "split_dataset",
    "update_scaling_factor",
    "write_dataset",
]

__version__ = "0.1.0"
