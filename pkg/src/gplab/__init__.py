"""Histopathology patch classification with compound-scaled MBConv networks.

NumPy-only reverse-mode autodiff, EfficientNet-style model family, weighted
cross-entropy training with stratified cross-validation, and logit ensembling.
"""

from .data import CLASS_NAMES, PatchDataset, generate_synthetic, ingest
from .model import ModelSpec, Network, build, get_spec
from .tensor import Tensor, backward, no_grad

__all__ = [
    "CLASS_NAMES", "ModelSpec", "Network", "PatchDataset", "Tensor",
    "backward", "build", "generate_synthetic", "get_spec", "ingest", "no_grad",
]

__version__ = "0.1.0"
