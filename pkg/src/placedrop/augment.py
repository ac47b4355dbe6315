"""Image-level augmentation

Two pipelines operate on single ``(3, H, W)`` float images with values in ``[0, 1]``:

- :func:`standard_augment`: random resized crop, horizontal flip, color jitter and
  random grayscale.
- :func:`rand_augment`: ``alpha`` transforms picked from a pool, all applied at the same
  magnitude level ``beta``.

Geometric transforms resample bilinearly with Pillow (in its 32-bit float mode) and fill
uncovered pixels with zeros. Photometric transforms are plain numpy. Each call draws
only from the generator it is given, so a sample's output depends on nothing but its
stream and its source image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from logging import getLogger
from typing import Callable, Mapping, Sequence, Tuple

import numpy as np
from PIL import Image

from placedrop.errors import ConfigError, ShapeError


logger = getLogger(__name__)

MAX_LEVEL = 10

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"Expected a (3, H, W) image, not {image.shape}")
    return image


def _grayscale(image: np.ndarray) -> np.ndarray:
    return np.tensordot(_LUMA, image, axes=1).astype(np.float32)


def _resample(
    image: np.ndarray,
    method: "Image.Transform",
    data: Tuple[float, ...],
) -> np.ndarray:
    """Apply a Pillow transform to each channel of a float image"""
    h, w = image.shape[1:]
    channels = []
    for plane in image:
        source = Image.fromarray(np.ascontiguousarray(plane, dtype=np.float32))
        moved = source.transform(
            (w, h), method, data, resample=Image.Resampling.BILINEAR, fillcolor=0
        )
        channels.append(np.asarray(moved, dtype=np.float32))
    return np.stack(channels)


def _affine(image: np.ndarray, matrix: Tuple[float, ...]) -> np.ndarray:
    """``matrix`` maps output coordinates to input coordinates"""
    return _resample(image, Image.Transform.AFFINE, matrix)


# --- transform pool --------------------------------------------------------------------


def rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center"""
    h, w = image.shape[1:]
    cx, cy = w / 2, h / 2
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    return _affine(
        image,
        (cos, sin, cx - cos * cx - sin * cy, -sin, cos, cy + sin * cx - cos * cy),
    )


def translate_x(image: np.ndarray, fraction: float) -> np.ndarray:
    """Shift right by ``fraction`` of the width"""
    return _affine(image, (1, 0, -fraction * image.shape[2], 0, 1, 0))


def translate_y(image: np.ndarray, fraction: float) -> np.ndarray:
    """Shift down by ``fraction`` of the height"""
    return _affine(image, (1, 0, 0, 0, 1, -fraction * image.shape[1]))


def shear_x(image: np.ndarray, factor: float) -> np.ndarray:
    cy = image.shape[1] / 2
    return _affine(image, (1, factor, -factor * cy, 0, 1, 0))


def shear_y(image: np.ndarray, factor: float) -> np.ndarray:
    cx = image.shape[2] / 2
    return _affine(image, (1, 0, 0, factor, 1, -factor * cx))


def brightness(image: np.ndarray, delta: float) -> np.ndarray:
    """Scale intensities by ``1 + delta``"""
    return image * np.float32(1 + delta)


def contrast(image: np.ndarray, delta: float) -> np.ndarray:
    """Scale deviations from the mean gray level by ``1 + delta``"""
    mean = _grayscale(image).mean()
    return (image - mean) * np.float32(1 + delta) + mean


def invert(image: np.ndarray, _: float = 0.0) -> np.ndarray:
    return np.float32(1) - image


def posterize(image: np.ndarray, bits: float) -> np.ndarray:
    """Keep the ``bits`` most significant bits of each 8-bit intensity"""
    bits = int(round(bits))
    if bits >= 8:
        return image
    quantized = np.floor(np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8)
    mask = np.uint8((0xFF << (8 - bits)) & 0xFF)
    return (quantized & mask).astype(np.float32) / 255


def solarize(image: np.ndarray, threshold: float) -> np.ndarray:
    """Invert every intensity strictly above ``threshold``"""
    return np.where(image > threshold, 1 - image, image).astype(np.float32)


@dataclass(frozen=True)
class TransformSpec:
    """A pool member: how a level in ``[0, 10]`` becomes a parameter, and how to apply it

    ``identity`` is the parameter at level 0. ``limit`` is the parameter at level 10;
    levels in between are interpolated linearly. ``signed`` transforms flip the sign of
    their parameter with probability one half.
    """

    name: str
    apply: Callable[[np.ndarray, float], np.ndarray]
    identity: float
    limit: float
    signed: bool = False
    parametric: bool = True

    def parameter(self, level: int) -> float:
        return self.identity + (self.limit - self.identity) * level / MAX_LEVEL


TRANSFORMS: Mapping[str, TransformSpec] = {
    spec.name: spec
    for spec in (
        TransformSpec("rotate", rotate, 0.0, 30.0, signed=True),
        TransformSpec("translate-x", translate_x, 0.0, 0.3, signed=True),
        TransformSpec("translate-y", translate_y, 0.0, 0.3, signed=True),
        TransformSpec("shear-x", shear_x, 0.0, 0.3, signed=True),
        TransformSpec("shear-y", shear_y, 0.0, 0.3, signed=True),
        TransformSpec("brightness", brightness, 0.0, 0.9, signed=True),
        TransformSpec("contrast", contrast, 0.0, 0.9, signed=True),
        TransformSpec("invert", invert, 0.0, 0.0, parametric=False),
        TransformSpec("posterize", posterize, 8.0, 4.0),
        TransformSpec("solarize", solarize, 1.0, 0.0),
    )
}
"""Every transform RandAugment may choose from, by name"""


@dataclass(frozen=True)
class AugPolicy:
    """``alpha`` transforms per image at magnitude level ``beta``"""

    alpha: int = 8
    beta: int = 4
    pool: Tuple[str, ...] = tuple(TRANSFORMS)

    def __post_init__(self) -> None:
        problems = {}
        unknown = [name for name in self.pool if name not in TRANSFORMS]
        if unknown:
            problems["aug.pool"] = f"unknown transforms {unknown}"
        elif len(set(self.pool)) != len(self.pool):
            problems["aug.pool"] = f"repeats a transform in {list(self.pool)}"
        if not 0 <= self.alpha <= len(self.pool):
            problems["aug.alpha"] = (
                f"must lie in [0, {len(self.pool)}] (the pool size), not {self.alpha}"
            )
        if not 0 <= self.beta <= MAX_LEVEL:
            problems["aug.beta"] = f"must lie in [0, {MAX_LEVEL}], not {self.beta}"
        if problems:
            raise ConfigError(problems)


def rand_augment(
    image: np.ndarray, policy: AugPolicy, rng: np.random.Generator
) -> np.ndarray:
    """Apply ``policy.alpha`` distinct transforms from the pool, in random order"""
    image = _check_image(image)
    if policy.alpha == 0:
        return image.copy()
    chosen = rng.choice(len(policy.pool), size=policy.alpha, replace=False)
    for index in chosen:
        spec = TRANSFORMS[policy.pool[int(index)]]
        param = spec.parameter(policy.beta)
        if spec.signed and rng.random() < 0.5:
            param = -param
        if param != spec.identity or not spec.parametric:
            image = spec.apply(image, param)
    return np.clip(image, 0, 1).astype(np.float32)


# --- standard recipe -------------------------------------------------------------------


@dataclass(frozen=True)
class StandardAugmentConfig:
    area: Tuple[float, float] = (0.8, 1.0)
    """Fraction of the image area a crop retains"""
    ratio: Tuple[float, float] = (3 / 4, 4 / 3)
    """Aspect ratio range of a crop, sampled log-uniformly"""
    flip_p: float = 0.5
    jitter: float = 0.4
    """Color factors lie in ``1 +- jitter`` and hue shifts in ``+- jitter`` turns"""
    gray_p: float = 0.1

    def __post_init__(self) -> None:
        low, high = self.area
        if not 0 < low <= high <= 1:
            raise ConfigError(
                {"aug.standard.area": f"must satisfy 0 < low <= high <= 1, not {self.area}"}
            )
        if not 0 < self.ratio[0] <= self.ratio[1]:
            raise ConfigError({"aug.standard.ratio": f"invalid range {self.ratio}"})
        for key, value in (("flip_p", self.flip_p), ("gray_p", self.gray_p)):
            if not 0 <= value <= 1:
                raise ConfigError(
                    {f"aug.standard.{key}": f"must lie in [0, 1], not {value}"}
                )
        if not 0 <= self.jitter < 1:
            raise ConfigError(
                {"aug.standard.jitter": f"must lie in [0, 1), not {self.jitter}"}
            )


@dataclass(frozen=True)
class StandardDraw:
    """Every random choice of one :func:`standard_augment` call

    The default instance is the degenerate draw which leaves an image untouched.
    """

    crop: Tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
    """``(left, top, width, height)`` as fractions of the image size"""
    flip: bool = False
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    """Hue rotation in turns"""
    grayscale: bool = False

    @classmethod
    def sample(
        cls,
        rng: np.random.Generator,
        config: StandardAugmentConfig = StandardAugmentConfig(),
    ) -> "StandardDraw":
        area = rng.uniform(*config.area)
        ratio = math.exp(rng.uniform(math.log(config.ratio[0]), math.log(config.ratio[1])))
        width = min(1.0, math.sqrt(area * ratio))
        height = min(1.0, math.sqrt(area / ratio))
        left = rng.uniform(0.0, 1.0 - width) if width < 1 else 0.0
        top = rng.uniform(0.0, 1.0 - height) if height < 1 else 0.0
        flip = bool(rng.random() < config.flip_p)
        j = config.jitter
        factors = rng.uniform(1 - j, 1 + j, size=3)
        hue = float(rng.uniform(-j, j))
        grayscale = bool(rng.random() < config.gray_p)
        return cls(
            (float(left), float(top), width, height),
            flip,
            float(factors[0]),
            float(factors[1]),
            float(factors[2]),
            hue,
            grayscale,
        )


def _rotate_hue(image: np.ndarray, turns: float) -> np.ndarray:
    # rotation of the chroma plane in YIQ space
    to_yiq = np.array(
        [[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]]
    )
    theta = 2 * math.pi * turns
    rotation = np.array(
        [
            [1, 0, 0],
            [0, math.cos(theta), -math.sin(theta)],
            [0, math.sin(theta), math.cos(theta)],
        ]
    )
    matrix = np.linalg.inv(to_yiq) @ rotation @ to_yiq
    return np.tensordot(matrix, image, axes=1).astype(np.float32)


def apply_standard(image: np.ndarray, draw: StandardDraw) -> np.ndarray:
    """Apply the choices of a :class:`StandardDraw`, skipping the degenerate ones"""
    image = _check_image(image)
    h, w = image.shape[1:]
    if draw.crop != (0.0, 0.0, 1.0, 1.0):
        left, top, width, height = draw.crop
        box = (left * w, top * h, (left + width) * w, (top + height) * h)
        image = _resample(image, Image.Transform.EXTENT, box)
    if draw.flip:
        image = image[:, :, ::-1]
    if draw.brightness != 1:
        image = image * np.float32(draw.brightness)
    if draw.contrast != 1:
        mean = _grayscale(image).mean()
        image = (image - mean) * np.float32(draw.contrast) + mean
    if draw.saturation != 1:
        gray = _grayscale(image)[None]
        image = (image - gray) * np.float32(draw.saturation) + gray
    if draw.hue != 0:
        image = _rotate_hue(image, draw.hue)
    if draw.grayscale:
        image = np.repeat(_grayscale(image)[None], 3, axis=0)
    return np.ascontiguousarray(np.clip(image, 0, 1), dtype=np.float32)


def standard_augment(
    image: np.ndarray,
    rng: np.random.Generator,
    config: StandardAugmentConfig = StandardAugmentConfig(),
) -> np.ndarray:
    """Random resized crop, horizontal flip, color jitter and random grayscale"""
    return apply_standard(image, StandardDraw.sample(rng, config))


# --- both pipelines together -----------------------------------------------------------


@dataclass(frozen=True)
class AugmentConfig:
    """Switches for the two halves of a composed training batch"""

    standard_enabled: bool = True
    rand_enabled: bool = True
    policy: AugPolicy = field(default_factory=AugPolicy)
    standard: StandardAugmentConfig = field(default_factory=StandardAugmentConfig)

    def standard_view(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if not self.standard_enabled:
            return _check_image(image).copy()
        return standard_augment(image, rng, self.standard)

    def rand_view(self, image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """RandAugment, or a second standard view when RandAugment is off"""
        if not self.rand_enabled:
            return self.standard_view(image, rng)
        return rand_augment(image, self.policy, rng)


def augment_batch(
    images: np.ndarray,
    view: Callable[[np.ndarray, np.random.Generator], np.ndarray],
    rngs: Sequence[np.random.Generator],
) -> np.ndarray:
    """Apply ``view`` to each image of a batch with that image's own stream"""
    if len(images) != len(rngs):
        raise ShapeError(f"Need one stream per image, got {len(rngs)} for {len(images)}")
    return np.stack([view(image, rng) for image, rng in zip(images, rngs)])

