"""Multimodal trajectory forecasting on synthetic driving scenes.

The stack is built from scratch on a numpy-backed reverse-mode autodiff
core: attention and selective state-space blocks, a polyline/agent scene
encoder, a decoupled mode/time query decoder, winner-take-all training
objectives, forecasting metrics, and a k-means forecast ensembler, plus a
CLI that generates data, trains, evaluates, and renders reports.
"""

from .config import RunConfig
from .data import Dataset, generate_dataset
from .model import Forecaster, ModelConfig
from .tensor import Tensor, no_grad
from .train import Trainer, evaluate, load_model

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "Forecaster",
    "ModelConfig",
    "RunConfig",
    "Tensor",
    "Trainer",
    "evaluate",
    "generate_dataset",
    "load_model",
    "no_grad",
    "__version__",
]
