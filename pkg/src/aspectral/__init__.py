"""Multi-aspect dense retrieval with aspect learning, on a small numpy autodiff engine."""

from .config import RunConfig, load_config
from .model import ModelConfig, MultiAspectModel

__all__ = ["RunConfig", "load_config", "ModelConfig", "MultiAspectModel"]
__version__ = "0.1.0"
