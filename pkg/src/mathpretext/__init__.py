"""Self-supervised pretext tasks, permutation-invariant answer scoring, and
bias audits for five-option math word problems."""

__version__ = "0.1.0"

from .corpus import Problem, RationaleSteps, SplitSet  # noqa: F401
from .encoder import EncoderConfig, ModelBundle  # noqa: F401
from .training import TrainConfig  # noqa: F401
