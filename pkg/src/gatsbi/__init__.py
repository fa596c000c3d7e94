"""Object-centric video prediction with an action-conditioned agent/object split."""
from .config import ModelConfig, preset, tiny_config
from .core import (Episode, GaussianLatent, RecurrentState, load_tensor_container,
                   save_tensor_container, seeded_rng)

__version__ = "0.1.0"
