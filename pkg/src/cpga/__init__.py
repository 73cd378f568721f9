"""Source-free domain adaptation with generated class prototypes.

A frozen source classifier provides the anchors: a conditional generator
learns one prototype distribution per class against it, then the feature
extractor is adapted to unlabeled target data by confidence-weighted
contrastive alignment to those prototypes, with an early-learning
regularizer and neighborhood clustering on top.
"""

from .datasets import (
    Dataset,
    ShiftConfig,
    inject_label_noise,
    load_dataset,
    make_gaussian_domains,
    make_moons_domains,
    save_dataset,
)
from .errors import ConfigurationError, ContractViolation, DivergenceError
from .estimator import CPGA, SourceClassifier
from .experiments import (
    AblationSpec,
    default_benchmark,
    default_ladder,
    emit_plots,
    run_ablation,
    run_noise_robustness,
    run_sensitivity,
)
from .models import (
    ContrastiveProjector,
    FeatureExtractor,
    PrototypeGenerator,
    WeightNormClassifier,
    content_hash,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    MetricsLog,
    PipelineResult,
    SourceModel,
    TrainConfig,
    accuracy,
    infer,
    pretrain_source,
    prototype_fidelity,
    reverse_validate,
    run_pipeline,
    train_stage1,
    train_stage2,
)

__version__ = "0.1.0"

__all__ = [
    "AblationSpec", "CPGA", "ConfigurationError", "ContractViolation",
    "ContrastiveProjector", "Dataset", "DivergenceError", "FeatureExtractor",
    "MetricsLog", "PipelineResult", "PrototypeGenerator", "ShiftConfig",
    "SourceClassifier", "SourceModel", "TrainConfig", "WeightNormClassifier",
    "accuracy", "content_hash", "default_benchmark", "default_ladder",
    "emit_plots", "infer", "inject_label_noise", "load_checkpoint",
    "load_dataset", "make_gaussian_domains", "make_moons_domains",
    "pretrain_source", "prototype_fidelity", "reverse_validate",
    "run_ablation", "run_noise_robustness", "run_pipeline",
    "run_sensitivity", "save_checkpoint", "save_dataset", "train_stage1",
    "train_stage2",
]
