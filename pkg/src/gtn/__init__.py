"""Generative teaching networks: meta-learned synthetic training data."""
from .autodiff import DeterminismError, DivergedError
from .data import DataFormatError
from .meta import MetaTrainer, OuterConfig, cifar_config, mnist_config
from .nn import ConfigError

__all__ = ["ConfigError", "DataFormatError", "DeterminismError", "DivergedError", "MetaTrainer",
           "OuterConfig", "cifar_config", "mnist_config"]
__version__ = "0.1.0"
