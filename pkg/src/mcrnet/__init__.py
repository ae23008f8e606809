"""Multi-step co-interactive relation reader for extractive QA with unanswerable questions."""

from .config import RunConfig, load_config
from .model import MCRNet, ModelConfig

__all__ = ["MCRNet", "ModelConfig", "RunConfig", "load_config"]
__version__ = "0.1.0"
