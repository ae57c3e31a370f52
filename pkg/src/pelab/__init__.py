"""Perceptual enhancement of decoded samples by noising and reverse diffusion on analytic models."""

from .codecs import make_codec
from .gmm import GmmModel, load_model
from .pipeline import EnhanceConfig, enhance, select_sigma

__version__ = "0.1.0"

__all__ = ["GmmModel", "load_model", "make_codec", "EnhanceConfig", "enhance", "select_sigma", "__version__"]
