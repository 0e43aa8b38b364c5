"""Two-stage text-conditioned image GAN on a numpy autodiff core, sized for a desk CPU."""

from .config import ArchConfig, RunConfig, TrainConfig
from .errors import StackLabError

__version__ = "0.1.0"

__all__ = ["ArchConfig", "RunConfig", "TrainConfig", "StackLabError", "__version__"]
