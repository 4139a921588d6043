"""Frequency-varying feature filtering and temporal aggregation for open-set recognition, on numpy."""

from .model import CFAN, ModelConfig
from .openset import EvalReport, evaluate_logits
from .spectral import build_templates, ep_weights, fft2d, ifft2d, make_filter
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, load_checkpoint, save_checkpoint, train_loop

__all__ = [
    "CFAN", "ModelConfig", "EvalReport", "evaluate_logits", "build_templates", "ep_weights", "fft2d",
    "ifft2d", "make_filter", "Tensor", "backward", "no_grad", "TrainConfig", "load_checkpoint",
    "save_checkpoint", "train_loop",
]
__version__ = "0.1.0"
