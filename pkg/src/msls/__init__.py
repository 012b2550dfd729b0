"""Blind image deblurring with a multi-scale latent structure prior."""
from .core import (DeblurConfig, SyntheticBlurSpec, convolve2d, gradient,
                   synth_blur)
from .patchmatch import BACKEND

__version__ = "0.1.0"

__all__ = ["DeblurConfig", "SyntheticBlurSpec", "convolve2d", "gradient",
           "synth_blur", "BACKEND"]
