"""Invertible restoring autoencoder for image restoration at desk scale.

A fully invertible encoder-decoder built from normalizing-flow layers
(ActNorm, invertible 1x1 convolution, affine coupling, squeeze), trained
with an L1 pixel loss against synthetic degradations (Gaussian noise,
JPEG-style compression, inpainting masks), plus the tooling to verify the
round-trip invertibility and information-preservation claims exhaustively.
"""

from .autodiff import Tensor, no_grad
from .model import IraeConfig, IraeModel, build, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "no_grad",
    "IraeConfig",
    "IraeModel",
    "build",
    "save_checkpoint",
    "load_checkpoint",
    "__version__",
]
