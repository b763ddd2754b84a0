"""Geometric VQA dataset generation and scoring for 6D-pose tabletop scenes."""

from .errors import PoseQAError

__version__ = "0.1.0"
__all__ = ["PoseQAError", "__version__"]
