"""Unpaired image-to-image translation with attention-guided generators and
adaptive layer-instance normalization, on a small numpy autograd engine."""

from .networks import DiscriminatorNet, GeneratorNet, NetConfig
from .training import LossWeights, Models, TrainState, train, train_step

__version__ = "0.1.0"

__all__ = ["NetConfig", "GeneratorNet", "DiscriminatorNet", "Models", "TrainState",
           "LossWeights", "train", "train_step", "__version__"]
