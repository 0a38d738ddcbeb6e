"""Self-supervised depth and ego-motion learning with RGB/depth channel-exchange fusion."""
from .tensor import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
