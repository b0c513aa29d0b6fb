"""Mean embeddings with test-time augmentation on a desk-scale CNN stack."""

__version__ = "0.1.0"

from .tensor_engine import Tensor, Tape, OptimizerState  # noqa: F401
from .data_aug import AugmentationPolicy, Dataset  # noqa: F401
from .model import BackboneConfig, Checkpoint, LinearHead  # noqa: F401
from .metta_core import EmbeddingStats, RetrievalIndex  # noqa: F401
