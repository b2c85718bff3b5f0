"""Few-shot detection transformer on a synthetic shapes world.

Detects novel classes from a handful of template crops: templates are
encoded, stamped with pseudo-class embeddings, fed as visual prompts to a
transformer encoder-decoder, and matched to ground truth by Hungarian set
prediction. Everything runs on a numpy autodiff substrate; no deep-learning
framework is required.
"""

from . import backbone, evaltool, matching, model, ndgrad, netpbm, prompts, rng, synthworld, trainpipe
from .errors import (
    ConfigError,
    ContaminationError,
    DimensionError,
    InvalidBoxError,
    NumericAbort,
    SamplingError,
)
from .model import FSDetr, ModelConfig
from .ndgrad import Tape, Tensor, backward
from .trainpipe import TrainConfig

__version__ = "0.1.0"
