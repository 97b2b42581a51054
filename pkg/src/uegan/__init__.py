"""Adversarial building-footprint segmentation on a small numpy autodiff core."""
from .errors import ConfigError, ContractError, DimensionError, NumericError, ParseError, UEGANError
from .losses import LossConfig
from .metrics import MetricConfig
from .network import ModelConfig, build_critic, build_generator, critic_forward, generator_forward
from .tensor import Tensor, grad_check, no_grad
from .training import TrainConfig, synth_dataset, train, validate

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "ContractError",
    "DimensionError",
    "LossConfig",
    "MetricConfig",
    "ModelConfig",
    "NumericError",
    "ParseError",
    "Tensor",
    "TrainConfig",
    "UEGANError",
    "build_critic",
    "build_generator",
    "critic_forward",
    "generator_forward",
    "grad_check",
    "no_grad",
    "synth_dataset",
    "train",
    "validate",
]
