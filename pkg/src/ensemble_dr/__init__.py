"""Dual-backbone transfer-ensemble pipeline for 5-class diabetic
retinopathy grading: dataset ingestion, frozen-backbone feature fusion,
training, metrics and a repeated-simulation harness."""

from .dataset import (
    DEFAULT_CLASS_NAMES,
    DatasetManifest,
    ImageRecord,
    PreprocessedImage,
    batch_iterator,
    carve_validation,
    load_manifest,
    preprocess_image,
    stratified_split,
)
from .backbones import (
    BackboneSpec,
    FeatureExtractor,
    FreezePolicy,
    apply_freeze,
    extract_features,
    registry_get,
)
from .ensemble import (
    EnsembleConfig,
    EnsembleModel,
    build_ensemble,
    forward,
    global_average_pool,
    load_checkpoint,
    save_checkpoint,
)
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetError,
    EnsembleDRError,
    PreprocessError,
    RegistryError,
    TrainingError,
    WeightsUnavailableError,
)
from .estimator import EnsembleClassifier
from .experiments import (
    ComparisonTable,
    RunAggregate,
    compare_models,
    emit_figures,
    run_repeated,
)
from .metrics import MetricsReport, compute_metrics, confusion_matrix, predict_labels
from .training import TrainConfig, TrainHistory, categorical_cross_entropy, train, train_step

__version__ = "0.1.0"
