"""EmoTrack: PHQ-8 item and total prediction from counselling-session dialogue,
clinical feature scores and the previous session of the same client."""

__version__ = "0.1.0"

from .config import ConfigError, ModelConfig, TrainConfig, load_train_config
from .data import Corpus, DataError, SplitManifest, build_split_manifest, load_dataset
from .model import init_params, predict
from .training import NumericError, train

__all__ = [
    "ConfigError", "Corpus", "DataError", "ModelConfig", "NumericError", "SplitManifest",
    "TrainConfig", "build_split_manifest", "init_params", "load_dataset", "load_train_config",
    "predict", "train",
]
