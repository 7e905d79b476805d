"""evadelab: randomized pre-processing defenses, attacks and an evasion-game harness."""

from .data import LabeledDataset, generate_synthetic, load_mnist, load_mnist_idx
from .errors import (ConfigError, EvadeLabError, FormatError, GameClosedError, ParameterError, TrainingError,
                     UsageError)
from .kernels import BACKEND
from .model import (Classifier, ModelSpec, RandomizedClassifier, TrainConfig, accuracy, error, load_model,
                    mlp_spec, predict_label, predict_probs, randomized_error, save_model, small_cnn_spec, train)

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Classifier", "ConfigError", "EvadeLabError", "FormatError", "GameClosedError", "LabeledDataset",
    "ModelSpec", "ParameterError", "RandomizedClassifier", "TrainConfig", "TrainingError", "UsageError",
    "accuracy", "error", "generate_synthetic", "load_mnist", "load_mnist_idx", "load_model", "mlp_spec",
    "predict_label", "predict_probs", "randomized_error", "save_model", "small_cnn_spec", "train",
]
