from __future__ import annotations

from enum import Enum
from typing import Iterable, Tuple

from typing_extensions import Protocol, runtime_checkable

from placedrop.errors import ConfigError

from .tensor import Tensor


class LayerId(str, Enum):
    """A hook point: the output of one of the network's four blocks"""

    L1 = "L1"
    L2 = "L2"
    L3 = "L3"
    L4 = "L4"

    @property
    def index(self) -> int:
        """Zero-based position of the block this layer follows"""
        return int(self.value[1:]) - 1

    @classmethod
    def parse_set(cls, names: Iterable[str], key: str = "layers") -> Tuple["LayerId", ...]:
        """Turn names like ``["L3", "L4"]`` into a sorted, duplicate free tuple

        Raises :class:`~placedrop.errors.ConfigError` naming ``key`` if the names are
        empty, unknown or repeated.
        """
        names = [str(n).strip() for n in names]
        if not names:
            raise ConfigError({key: "must name at least one of L1, L2, L3, L4"})
        unknown = [n for n in names if n not in cls.__members__]
        if unknown:
            raise ConfigError({key: f"unknown layers {unknown}"})
        if len(set(names)) != len(names):
            raise ConfigError({key: f"repeats a layer in {names}"})
        return tuple(sorted((cls(n) for n in names), key=lambda layer: layer.index))


ALL_LAYERS = (LayerId.L1, LayerId.L2, LayerId.L3, LayerId.L4)


@runtime_checkable
class FeatureHook(Protocol):
    """Replaces the features at a hook point with a tensor of the same shape"""

    def __call__(self, features: Tensor) -> Tensor:
        """Transform a batch of block outputs ``(N, C, H, W)``"""


HookList = Tuple[Tuple[LayerId, FeatureHook], ...]
"""Hooks to apply during one forward pass, in the order they should run"""
