from .network import Network
from .proto import ALL_LAYERS, FeatureHook, LayerId
from .tensor import Tensor, backward, no_grad


__all__ = [
    "ALL_LAYERS",
    "backward",
    "FeatureHook",
    "LayerId",
    "Network",
    "no_grad",
    "Tensor",
]
