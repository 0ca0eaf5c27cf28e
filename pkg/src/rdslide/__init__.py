"""Reverse-distillation anomaly detection for synthetic tissue slides.

Pure numpy reverse-mode autodiff with optional numba kernels, a frozen
teacher / trainable student distillation model, focal distillation loss
using a few tumor patches, slide-level inference and evaluation metrics.
Set ``RDSLIDE_BACKEND=numpy`` to disable the numba kernels.
"""

from ._kernels import BACKEND
from .config import RunConfig
from .loss import LossConfig
from .model import EncoderConfig
from .slides import NORMAL, TUMOR, DatasetSpec

__version__ = "0.1.0"
