"""Multimodal attention-fusion sequential recommender on a small numpy autodiff core."""

from .config import DESK_PROFILE, FULL_PROFILE, TrainConfig

__version__ = "0.1.0"

__all__ = ["DESK_PROFILE", "FULL_PROFILE", "TrainConfig", "__version__"]
