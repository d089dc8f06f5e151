"""Identity-conditioned video diffusion transformer at desk scale."""

from .config import ModelConfig, PatchSpec, PAPER_SCALE
from .model import Conditioning, Lynx, build_model

__version__ = "0.1.0"
__all__ = ["ModelConfig", "PatchSpec", "PAPER_SCALE", "Conditioning", "Lynx", "build_model"]
