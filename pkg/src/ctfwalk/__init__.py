"""Dense correspondence from multiscale contrastive random walks.

Optical flow and label propagation learned without labels, on a small
numpy autodiff engine.
"""
from .encoder import EncoderConfig, encode, init_encoder
from .engine import ShapeError, Tensor, grad_check, no_grad
from .model import FlowModel
from .transition import SparseTransition, TransitionConfig, coarse_to_fine, local_attention

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig", "FlowModel", "ShapeError", "SparseTransition", "Tensor", "TransitionConfig",
    "coarse_to_fine", "encode", "grad_check", "init_encoder", "local_attention", "no_grad",
]
