"""Noisy-semantic guided conditional CycleGAN for biphasic face age translation."""

from .config import TrainConfig, load_config
from .datapipe import (FaceSample, SemanticLayout, generate_synthetic_dataset, load_image_folder,
                       merge_parsing)
from .discriminator import Discriminator
from .generator import ConfigError, Generator, GeneratorConfig
from .losses import LossReport, LossWeights, total_loss

__all__ = ["ConfigError", "Discriminator", "FaceSample", "Generator", "GeneratorConfig", "LossReport",
           "LossWeights", "SemanticLayout", "TrainConfig", "generate_synthetic_dataset", "load_config",
           "load_image_folder", "merge_parsing", "total_loss"]
__version__ = "0.1.0"
