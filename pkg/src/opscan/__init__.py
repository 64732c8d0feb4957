"""Static detection of Android malicious apps from Dalvik opcode
occurrence histograms: extraction, prominent-feature selection, tree
classifiers and the evaluation protocol around them."""

from .classifiers import (
    Dataset,
    Prediction,
    SelectionProvenance,
    TrainedModel,
    predict,
    predict_batch,
    train_classifier,
    train_decision_tree,
    train_nbt,
    train_random_forest,
)
from .corpus import (
    CorpusManifest,
    Label,
    LabeledHistogramSet,
    Split,
    build_histogram_set,
    load_histogram_set,
    load_manifest,
    stratified_split,
)
from .dalvik import DEFAULT_TABLE, InstructionFormatTable, build_table
from .evaluation import (
    ClassifierConfig,
    ConfusionMatrix,
    CrossValidationResult,
    MetricSet,
    SweepReport,
    confusion,
    cross_validate,
    feature_sweep,
    generate_synthetic_corpus,
    grid_counts,
    metrics,
)
from .extraction import (
    AppArtifact,
    ArtifactKind,
    Diagnostics,
    OpcodeHistogram,
    detect_artifact_kind,
    extract_artifact,
    extract_from_apk,
    extract_from_dex,
    extract_from_smali,
)
from .features import (
    ClassMeanProfile,
    FeatureRanking,
    NormalizationMode,
    compute_class_means,
    project,
    project_set,
    rank_features,
)
from .model_io import load_model, save_model

__version__ = "0.1.0"

__all__ = [
    "AppArtifact",
    "ArtifactKind",
    "ClassMeanProfile",
    "ClassifierConfig",
    "ConfusionMatrix",
    "CorpusManifest",
    "CrossValidationResult",
    "DEFAULT_TABLE",
    "Dataset",
    "Diagnostics",
    "FeatureRanking",
    "InstructionFormatTable",
    "Label",
    "LabeledHistogramSet",
    "MetricSet",
    "NormalizationMode",
    "OpcodeHistogram",
    "Prediction",
    "SelectionProvenance",
    "Split",
    "SweepReport",
    "TrainedModel",
    "build_histogram_set",
    "build_table",
    "compute_class_means",
    "confusion",
    "cross_validate",
    "detect_artifact_kind",
    "extract_artifact",
    "extract_from_apk",
    "extract_from_dex",
    "extract_from_smali",
    "feature_sweep",
    "generate_synthetic_corpus",
    "grid_counts",
    "load_histogram_set",
    "load_manifest",
    "load_model",
    "metrics",
    "predict",
    "predict_batch",
    "project",
    "project_set",
    "rank_features",
    "save_model",
    "stratified_split",
    "train_classifier",
    "train_decision_tree",
    "train_nbt",
    "train_random_forest",
    "__version__",
]
