from .network import (
    FORMAT_VERSION,
    LayerSpec,
    Network,
    NetworkSpec,
    convnet_spec,
    forward,
    load_checkpoint,
    mlp_spec,
    save_checkpoint,
    sgd_step,
)
from .tensor import Tensor, conv2d, pairwise_distance, squared_distance

__all__ = [
    "FORMAT_VERSION", "LayerSpec", "Network", "NetworkSpec", "Tensor", "conv2d", "convnet_spec",
    "forward", "load_checkpoint", "mlp_spec", "pairwise_distance", "save_checkpoint", "sgd_step",
    "squared_distance",
]
