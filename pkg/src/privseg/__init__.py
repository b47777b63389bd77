"""Lesion segmentation with a privileged training-only modality.

A diffusion translator learns to synthesize the privileged modality from the
always-available source modality; a segmentation predictor consumes (source,
synthetic) pairs; a bi-level meta phase couples the two so the translator is
optimized for downstream segmentation quality. Inference needs the source
modality only.
"""

__version__ = "0.1.0"

from .data import (
    Sample,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic_dataset,
    load_dataset,
    save_dataset,
    split_train,
)
from .diffusion import Translator, TranslatorConfig
from .metrics import (
    AggregateReport,
    CaseMetrics,
    MetricsConfig,
    connected_components,
    dsc,
    evaluate_dataset,
    hd95,
    lesion_precision,
    lesion_recall,
)
from .predictor import DiceConfig, Predictor, PredictorConfig, binarize, dice_loss
from .trainer import MetaConfig, MetaTrainer
from .errors import ConfigError, DataError, NumericError, ToolkitError

__all__ = [
    "__version__",
    "Sample",
    "SplitSpec",
    "SyntheticSpec",
    "generate_synthetic_dataset",
    "load_dataset",
    "save_dataset",
    "split_train",
    "Translator",
    "TranslatorConfig",
    "AggregateReport",
    "CaseMetrics",
    "MetricsConfig",
    "connected_components",
    "dsc",
    "evaluate_dataset",
    "hd95",
    "lesion_precision",
    "lesion_recall",
    "DiceConfig",
    "Predictor",
    "PredictorConfig",
    "binarize",
    "dice_loss",
    "MetaConfig",
    "MetaTrainer",
    "ConfigError",
    "DataError",
    "NumericError",
    "ToolkitError",
]
