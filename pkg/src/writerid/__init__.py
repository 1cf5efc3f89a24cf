"""Self-supervised writer identification on damaged handwriting-like pages.

Pipeline stages: synthetic corpus generation, spectral pre-filtering,
momentum contrastive pre-training with adaptive patch reweighting, few-shot
writer calibration, and robustness evaluation.
"""

__version__ = "0.1.0"

from .errors import ConfigError, GradientStateError, ManifestError, WriteridError

__all__ = [
    "ConfigError",
    "GradientStateError",
    "ManifestError",
    "WriteridError",
    "__version__",
]
