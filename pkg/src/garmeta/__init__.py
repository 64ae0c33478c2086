"""In-loop meta-learning for SGD training.

Per-example gradient-alignment rewards computed from closed-form layer
kernels drive REINFORCE updates of non-differentiable sampling
distributions (data-split choice, augmentation policy) inside the same
loop that trains the network.
"""

from .nn import AdamConfig, Network, SgdConfig, build_network
from .meta import TrainConfig, train_loop, verify_unbiasedness
from .policies import OlaPolicy, SplitPolicy
from .tensor import Rng

__all__ = [
    "AdamConfig",
    "Network",
    "OlaPolicy",
    "Rng",
    "SgdConfig",
    "SplitPolicy",
    "TrainConfig",
    "build_network",
    "train_loop",
    "verify_unbiasedness",
]

__version__ = "0.1.0"
