"""Feature-level style augmentation

A feature map's "style" is summarized by the mean and standard deviation of each of its
channels. Re-normalizing one map to the statistics of another (adaptive instance
normalization) transfers style while keeping the content's spatial layout. SwapStyle
does this between random pairs of samples in a batch; the mix variant blends the two
sets of statistics instead.

Donor statistics are always treated as constants: no gradient flows into the sample
whose style was borrowed.
"""

from __future__ import annotations

from dataclasses import dataclass
from logging import getLogger
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from typing_extensions import Literal

from placedrop.core import ops
from placedrop.core.proto import HookList, LayerId
from placedrop.core.tensor import Tensor
from placedrop.errors import ConfigError, ContractError, ShapeError


logger = getLogger(__name__)

DEFAULT_EPS = 1e-6
STYLE_LAYERS = (LayerId.L1, LayerId.L2)
"""Hook points where style augmentation may attach"""

StyleMode = Literal["off", "swap", "mix"]

FeatureLike = Union[Tensor, np.ndarray]


@dataclass(frozen=True)
class StyleStats:
    """Per-channel mean and (population) standard deviation

    ``mu`` and ``sigma`` have shape ``(C,)`` for one sample or ``(N, C)`` for a batch.
    """

    mu: np.ndarray
    sigma: np.ndarray
    eps: float = DEFAULT_EPS

    def __post_init__(self) -> None:
        if self.mu.shape != self.sigma.shape:
            raise ShapeError(f"mu {self.mu.shape} and sigma {self.sigma.shape} differ")
        if (self.sigma < 0).any():
            raise ContractError("Standard deviations must be non-negative")
        if not self.eps > 0:
            raise ContractError(f"eps must be positive, not {self.eps}")

    @property
    def channels(self) -> int:
        return int(self.mu.shape[-1])

    def __getitem__(self, index: Union[int, np.ndarray]) -> "StyleStats":
        """Select the statistics of some samples of a batch"""
        return StyleStats(self.mu[index], self.sigma[index], self.eps)


def _values(features: FeatureLike) -> np.ndarray:
    return features.data if isinstance(features, Tensor) else np.asarray(features)


def channel_stats(features: FeatureLike, eps: float = DEFAULT_EPS) -> StyleStats:
    """Statistics of each channel over its two trailing (spatial) axes"""
    data = _values(features)
    if data.ndim < 3:
        raise ShapeError(f"Expected (..., C, H, W) features, not {data.shape}")
    if data.shape[-1] * data.shape[-2] == 0:
        raise ContractError("Channel statistics need at least one spatial position")
    mu = data.mean(axis=(-2, -1))
    centered = data - mu[..., None, None]
    sigma = np.sqrt((centered * centered).mean(axis=(-2, -1)))
    return StyleStats(mu, sigma, eps)


def adain(features: Tensor, target: StyleStats) -> Tensor:
    """``target.sigma * (F - F_mu) / (F_sigma + eps) + target.mu`` per channel"""
    if target.mu.shape != features.shape[:-2]:
        raise ShapeError(
            f"Statistics of shape {target.mu.shape} do not fit features {features.shape}"
        )
    return ops.instance_restyle(features, target.mu, target.sigma, target.eps)


def swap_style(
    x: Tensor, y: Tensor, eps: float = DEFAULT_EPS
) -> Tuple[Tensor, Tensor]:
    """Give ``x`` the style of ``y`` and ``y`` the style of ``x``"""
    if x.shape != y.shape:
        raise ShapeError(f"Cannot swap styles of {x.shape} and {y.shape}")
    return adain(x, channel_stats(y, eps)), adain(y, channel_stats(x, eps))


def _check_permutation(permutation: np.ndarray, n: int) -> np.ndarray:
    permutation = np.asarray(permutation, dtype=np.int64)
    if permutation.shape != (n,) or not np.array_equal(np.sort(permutation), np.arange(n)):
        raise ContractError(f"{permutation.tolist()} is not a permutation of range({n})")
    return permutation


def batch_swap(
    features: Tensor,
    rng: np.random.Generator,
    permutation: Optional[Sequence[int]] = None,
    eps: float = DEFAULT_EPS,
) -> Tensor:
    """Restyle sample ``i`` of a batch with the statistics of sample ``permutation[i]``

    The permutation is drawn uniformly from ``rng`` unless given. Fixed points are
    allowed and leave their sample (nearly) unchanged. Batches of fewer than two
    samples are returned as they are.
    """
    if features.ndim != 4:
        raise ShapeError(f"Expected (N, C, H, W) features, not {features.shape}")
    n = features.shape[0]
    if n < 2:
        return features
    perm = _check_permutation(
        rng.permutation(n) if permutation is None else np.asarray(permutation), n
    )
    return adain(features, channel_stats(features, eps)[perm])


def mix_style(x: Tensor, y: Tensor, lam: float, eps: float = DEFAULT_EPS) -> Tensor:
    """Restyle ``x`` with the blend ``lam * stats(x) + (1 - lam) * stats(y)``"""
    if not 0 <= lam <= 1:
        raise ContractError(f"Mixing weight must lie in [0, 1], not {lam}")
    if x.shape != y.shape:
        raise ShapeError(f"Cannot mix styles of {x.shape} and {y.shape}")
    sx, sy = channel_stats(x, eps), channel_stats(y, eps)
    mixed = StyleStats(
        lam * sx.mu + (1 - lam) * sy.mu,
        lam * sx.sigma + (1 - lam) * sy.sigma,
        eps,
    )
    return adain(x, mixed)


def batch_mix(
    features: Tensor,
    rng: np.random.Generator,
    lambda_rng: np.random.Generator,
    permutation: Optional[Sequence[int]] = None,
    lambdas: Optional[Sequence[float]] = None,
    eps: float = DEFAULT_EPS,
) -> Tensor:
    """Batch counterpart of :func:`mix_style`

    Sample ``i`` mixes its own statistics with those of ``permutation[i]`` using weight
    ``lambdas[i]``. Unless given, the permutation comes from ``rng`` and the weights are
    drawn from Uniform[0, 1] with ``lambda_rng``.
    """
    if features.ndim != 4:
        raise ShapeError(f"Expected (N, C, H, W) features, not {features.shape}")
    n = features.shape[0]
    if n < 2:
        return features
    perm = _check_permutation(
        rng.permutation(n) if permutation is None else np.asarray(permutation), n
    )
    lam = np.asarray(
        lambda_rng.uniform(0.0, 1.0, size=n) if lambdas is None else lambdas,
        dtype=np.float64,
    )
    if lam.shape != (n,) or (lam < 0).any() or (lam > 1).any():
        raise ContractError(f"Need {n} mixing weights in [0, 1], got {lam.tolist()}")
    own = channel_stats(features, eps)
    partner = own[perm]
    weight = lam[:, None]
    mixed = StyleStats(
        weight * own.mu + (1 - weight) * partner.mu,
        weight * own.sigma + (1 - weight) * partner.sigma,
        eps,
    )
    return adain(features, mixed)


@dataclass(frozen=True)
class StyleConfig:
    """Where and how feature statistics are perturbed during training

    Parameters:
        mode: ``"swap"`` for SwapStyle, ``"mix"`` for the mixing variant, ``"off"``.
        layers: Candidate hook points. One is picked per iteration when there are two.
        eps: Stabilizer added to the content standard deviation.
        p: Probability that an iteration is augmented at all.
    """

    mode: StyleMode = "swap"
    layers: Tuple[LayerId, ...] = (LayerId.L1,)
    eps: float = DEFAULT_EPS
    p: float = 1.0

    def __post_init__(self) -> None:
        problems = {}
        if self.mode not in ("off", "swap", "mix"):
            problems["style.mode"] = f"must be one of off, swap, mix - not {self.mode!r}"
        if not self.layers:
            problems["style.layers"] = "must name at least one layer"
        elif not set(self.layers) <= set(STYLE_LAYERS):
            problems["style.layers"] = f"must be a subset of L1, L2 - not {self.layers}"
        elif len(set(self.layers)) != len(self.layers):
            problems["style.layers"] = f"repeats a layer in {self.layers}"
        if not self.eps > 0:
            problems["style.eps"] = f"must be positive, not {self.eps}"
        if not 0 <= self.p <= 1:
            problems["style.p"] = f"must lie in [0, 1], not {self.p}"
        if problems:
            raise ConfigError(problems)

    @property
    def enabled(self) -> bool:
        return self.mode != "off"


class StyleAugment:
    """Hands out the style hook of one training iteration"""

    def __init__(self, config: StyleConfig) -> None:
        self.config = config

    def hooks(
        self,
        rng: np.random.Generator,
        lambda_rng: np.random.Generator,
        training: bool = True,
    ) -> HookList:
        """Zero or one (layer, hook) pair

        ``rng`` decides whether the iteration is augmented, picks the layer and, once
        the hook runs, draws the pairing. ``lambda_rng`` only feeds the mix weights.
        """
        config = self.config
        if not (config.enabled and training):
            return ()
        if rng.random() >= config.p:
            return ()
        layers = sorted(config.layers, key=lambda layer: layer.index)
        layer = layers[int(rng.integers(len(layers)))] if len(layers) > 1 else layers[0]

        if config.mode == "swap":

            def hook(features: Tensor) -> Tensor:
                return batch_swap(features, rng, eps=config.eps)

        else:

            def hook(features: Tensor) -> Tensor:
                return batch_mix(features, rng, lambda_rng, eps=config.eps)

        return ((layer, hook),)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.config})"
