"""Glow normalizing flows: actnorm, invertible 1x1 convolutions and affine
coupling in a multi-scale architecture, with exact log-likelihood training."""

from .errors import GlowError
from .model import Glow, GlowConfig, LatentRecord, load_checkpoint, save_checkpoint

__version__ = "0.1.0"
__all__ = ["Glow", "GlowConfig", "GlowError", "LatentRecord", "load_checkpoint",
           "save_checkpoint"]
