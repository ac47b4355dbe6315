"""Progressive layer-wise and channel-wise dropout

At every training iteration one candidate layer is picked at random and, in each
sample of the batch, ``gamma = floor(C * P)`` whole channels of that layer's features
are zeroed. The ratio ``P`` grows with the epoch along an arctangent curve that
saturates at ``p_max``. Surviving activations are not rescaled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from logging import getLogger
from typing import Callable, FrozenSet, Sequence, Tuple

import numpy as np

from placedrop.core.ops import elementwise_mul
from placedrop.core.proto import ALL_LAYERS, FeatureHook, HookList, LayerId
from placedrop.core.tensor import Tensor
from placedrop.errors import ConfigError, ContractError, ShapeError


logger = getLogger(__name__)


@dataclass(frozen=True)
class PlaceConfig:
    """Parameters of PLACE dropout

    The three ``*_wise``/``progressive`` switches exist for ablations. Turning one off
    removes that component: ``layer_wise=False`` drops channels in every candidate
    layer at once, ``progressive=False`` uses ``p_max`` from the first epoch and
    ``channel_wise=False`` drops individual activations instead of channels.
    """

    p_max: float = 0.33
    v: float = 4.0
    candidate_layers: Tuple[LayerId, ...] = (LayerId.L3, LayerId.L4)
    enabled: bool = True
    layer_wise: bool = True
    progressive: bool = True
    channel_wise: bool = True

    def __post_init__(self) -> None:
        problems = {}
        if not 0 < self.p_max <= 1:
            problems["place.p_max"] = f"must lie in (0, 1], not {self.p_max}"
        if not self.v > 0:
            problems["place.v"] = f"must be positive, not {self.v}"
        if not self.candidate_layers:
            problems["place.layers"] = "must name at least one layer"
        elif not set(self.candidate_layers) <= set(ALL_LAYERS):
            problems["place.layers"] = f"unknown layers in {self.candidate_layers}"
        elif len(set(self.candidate_layers)) != len(self.candidate_layers):
            problems["place.layers"] = f"repeats a layer in {self.candidate_layers}"
        if problems:
            raise ConfigError(problems)


@dataclass
class ScheduleState:
    """The stage-local epoch counter ``e``

    It is 0 before PLACE activates, becomes 1 on the first PLACE-active epoch and grows
    by exactly one per epoch after that.
    """

    e: int = 0

    def advance(self) -> int:
        self.e += 1
        return self.e


@dataclass(frozen=True)
class ChannelMask:
    """Which of ``C`` channels are zeroed"""

    C: int
    zero_set: FrozenSet[int] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        if any(not 0 <= i < self.C for i in self.zero_set):
            raise ShapeError(f"Mask indices {sorted(self.zero_set)} fall outside [0, {self.C})")

    @property
    def gamma(self) -> int:
        return len(self.zero_set)

    def materialize(self, dtype: np.dtype = np.dtype(np.float32)) -> np.ndarray:
        """The mask as an array of shape ``(C, 1, 1)``: 0 in dropped channels, else 1"""
        mask = np.ones((self.C, 1, 1), dtype=dtype)
        mask[sorted(self.zero_set), 0, 0] = 0
        return mask


def schedule_ratio(e: int, p_max: float, v: float) -> float:
    """``P = p_max * (2 / pi) * arctan(e / v)``: 0 at ``e = 0``, approaching ``p_max``"""
    if e < 0:
        raise ContractError(f"Epoch counter must be non-negative, not {e}")
    return p_max * (2.0 / math.pi) * math.atan(e / v)


def num_dropped(C: int, P: float) -> int:
    """``gamma = floor(C * P)``, kept below ``C`` so a feature is never fully erased"""
    if not 0 <= P < 1:
        raise ContractError(f"Dropout ratio must lie in [0, 1), not {P}")
    return min(int(math.floor(C * P)), C - 1)


def sample_mask(C: int, gamma: int, rng: np.random.Generator) -> ChannelMask:
    """Draw ``gamma`` distinct channels uniformly at random"""
    if not 0 <= gamma < C:
        raise ContractError(f"Cannot drop {gamma} of {C} channels")
    if gamma == 0:
        return ChannelMask(C)
    chosen = rng.choice(C, size=gamma, replace=False)
    return ChannelMask(C, frozenset(int(i) for i in chosen))


def apply_mask(features: Tensor, mask: ChannelMask) -> Tensor:
    """``features * M`` for one sample's ``(C, H, W)`` features"""
    if features.ndim != 3 or features.shape[0] != mask.C:
        raise ShapeError(f"Mask over {mask.C} channels does not fit features {features.shape}")
    return elementwise_mul(features, mask.materialize(features.dtype))


def select_layer(candidates: Sequence[LayerId], rng: np.random.Generator) -> LayerId:
    """Pick one candidate uniformly at random"""
    if not candidates:
        raise ContractError("Cannot select a layer from an empty candidate set")
    ordered = sorted(set(candidates), key=lambda layer: layer.index)
    return ordered[int(rng.integers(len(ordered)))]


def batch_mask(
    shape: Tuple[int, ...],
    gamma: int,
    sample_rngs: Sequence[np.random.Generator],
    channel_wise: bool = True,
    dtype: np.dtype = np.dtype(np.float32),
) -> np.ndarray:
    """Independent per-sample masks for a batch of ``(N, C, H, W)`` features

    Channel-wise masks have shape ``(N, C, 1, 1)``. Element-wise masks zero ``gamma``
    activations of each sample and have the full feature shape.
    """
    n, c, h, w = shape
    if len(sample_rngs) != n:
        raise ContractError(f"Need one stream per sample, got {len(sample_rngs)} for {n}")
    if channel_wise:
        mask = np.ones((n, c, 1, 1), dtype=dtype)
        for i, rng in enumerate(sample_rngs):
            mask[i] = sample_mask(c, gamma, rng).materialize(dtype)
        return mask
    size = c * h * w
    if not 0 <= gamma < size:
        raise ContractError(f"Cannot drop {gamma} of {size} activations")
    flat = np.ones((n, size), dtype=dtype)
    for i, rng in enumerate(sample_rngs):
        if gamma:
            flat[i, rng.choice(size, size=gamma, replace=False)] = 0
    return flat.reshape(shape)


def place_hook(
    features: Tensor,
    state: ScheduleState,
    config: PlaceConfig,
    sample_rngs: Sequence[np.random.Generator],
    training: bool = True,
) -> Tensor:
    """Apply progressive channel dropout to a batch of features at the selected layer

    ``P`` and ``gamma`` are computed once for the batch; each sample then draws its own
    mask from its own stream.
    """
    if not training:
        raise ContractError("PLACE dropout is closed in evaluation mode")
    if features.ndim != 4:
        raise ShapeError(f"Expected (N, C, H, W) features, not {features.shape}")
    P = current_ratio(state, config)
    n, c, h, w = features.shape
    gamma = num_dropped(c if config.channel_wise else c * h * w, P)
    if gamma == 0:
        return features
    mask = batch_mask(features.shape, gamma, sample_rngs, config.channel_wise, features.dtype)
    return elementwise_mul(features, mask)


_BELOW_ONE = float(np.nextafter(1.0, 0.0))


def current_ratio(state: ScheduleState, config: PlaceConfig) -> float:
    """The ratio for the current epoch, honouring the ``progressive`` switch"""
    if not config.progressive:
        return 0.0 if state.e == 0 else min(config.p_max, _BELOW_ONE)
    return schedule_ratio(state.e, config.p_max, config.v)


SampleStreams = Callable[[int, int], Sequence[np.random.Generator]]
"""``(layer_ordinal, batch_size) -> one stream per sample``

The ordinal is 0 for the single layer of a layer-wise iteration and counts up across
layers when every candidate layer is dropped at once.
"""


class PlaceDropout:
    """Binds a :class:`PlaceConfig` to its schedule and hands out per-iteration hooks

    It is an exact identity when disabled, when the schedule has not started, or when
    the network is in evaluation mode.
    """

    def __init__(self, config: PlaceConfig, state: ScheduleState | None = None) -> None:
        self.config = config
        self.state = state if state is not None else ScheduleState()

    def ratio(self) -> float:
        return current_ratio(self.state, self.config)

    def gamma(self, C: int, spatial: int = 1) -> int:
        """Units dropped per sample

        Channels, or single activations out of ``C * spatial`` when ``channel_wise`` is
        off.
        """
        return num_dropped(C if self.config.channel_wise else C * spatial, self.ratio())

    def layers(self, layer_rng: np.random.Generator) -> Tuple[LayerId, ...]:
        """The layers which receive dropout this iteration"""
        config = self.config
        if config.layer_wise:
            return (select_layer(config.candidate_layers, layer_rng),)
        return tuple(sorted(config.candidate_layers, key=lambda layer: layer.index))

    def hooks(
        self,
        layer_rng: np.random.Generator,
        sample_streams: SampleStreams,
        training: bool = True,
    ) -> HookList:
        """The (layer, hook) pairs for one training iteration

        With ``layer_wise`` on there is exactly one pair.
        """
        if not (self.config.enabled and training):
            return ()
        config, state = self.config, self.state

        def make_hook(ordinal: int) -> FeatureHook:
            def hook(features: Tensor) -> Tensor:
                rngs = sample_streams(ordinal, features.shape[0])
                return place_hook(features, state, config, rngs, training=True)

            return hook

        return tuple(
            (layer, make_hook(ordinal))
            for ordinal, layer in enumerate(self.layers(layer_rng))
        )

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.config}, e={self.state.e})"
