"""Multiscale-fusion spiking decoder for binned intracortical spike counts."""
from .datakit import DriftModel, TrialSet, make_preset
from .encoder import EncoderConfig
from .model import MfannModel, MfsnnModel, MlpModel, ModelConfig, build_model
from .spiking import LifParams
from .training import TrainConfig

__all__ = [
    "DriftModel", "EncoderConfig", "LifParams", "MfannModel", "MfsnnModel", "MlpModel",
    "ModelConfig", "TrainConfig", "TrialSet", "build_model", "make_preset",
]
__version__ = "0.1.0"
