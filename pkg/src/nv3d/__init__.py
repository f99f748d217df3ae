"""Memory-adaptive 3D in-context learning: a dual-branch U-Net whose context
set is streamed through mini-contexts with a running mean."""

from .apsp import ContextPair, apsp_forward, apsp_train_forward, partition
from .net import NetConfig, init_params

__version__ = "0.1.0"

__all__ = ["ContextPair", "NetConfig", "apsp_forward", "apsp_train_forward", "init_params", "partition"]
