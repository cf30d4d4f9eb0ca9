"""Hyperspectral target detection with a pyramid selective state space
backbone trained by spectrally contrastive learning."""

from .autodiff import Tensor, grad_check, no_grad
from .data import HsiCube, SyntheticSceneSpec, generate_scene
from .model import ModelConfig, SpectralEncoder
from .training import TrainConfig, train

__all__ = [
    "Tensor",
    "grad_check",
    "no_grad",
    "HsiCube",
    "SyntheticSceneSpec",
    "generate_scene",
    "ModelConfig",
    "SpectralEncoder",
    "TrainConfig",
    "train",
]

__version__ = "0.1.0"
