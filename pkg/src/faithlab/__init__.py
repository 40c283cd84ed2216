"""Desk-scale laboratory for faithful knowledge unlearning."""

__version__ = "0.1.0"

from . import autograd, evalkit, microlm, unlearn, worldgen  # noqa: E402
from .estimators import MemorizingLM, Unlearner  # noqa: E402

__all__ = ["autograd", "evalkit", "microlm", "unlearn", "worldgen", "MemorizingLM", "Unlearner", "__version__"]
