"""Domain-aware sharpness minimization for multi-domain cover/stego classification."""
from .autodiff import Tensor, Parameters
from .model import EncoderClassifier, ModelConfig
from .modulator import DomainCenterBank, adaptive_weights, adgm_loss
from .losses import LabeledBatch, cross_entropy, dscl, total_loss
from .optim import TrainConfig, train, step
from .synthdata import BenchmarkConfig, gen_feature_benchmark

__all__ = [
    "Tensor", "Parameters", "EncoderClassifier", "ModelConfig", "DomainCenterBank",
    "adaptive_weights", "adgm_loss", "LabeledBatch", "cross_entropy", "dscl", "total_loss",
    "TrainConfig", "train", "step", "BenchmarkConfig", "gen_feature_benchmark",
]
__version__ = "0.1.0"
