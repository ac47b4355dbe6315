"""A procedural multi-domain benchmark

Five shape classes are drawn in four visual styles ("domains"). Every image holds one
foreground shape, jittered in position, size and rotation but always fully inside the
canvas. Each image is rendered from its own random stream, so generation is a pure
function of ``(seed, per_class, size)`` and any subset of images can be rebuilt alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from logging import getLogger
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Sequence, Tuple, Union

import numpy as np
from PIL import Image

from placedrop.errors import ConfigError, ShapeError
from placedrop.streams import stream


logger = getLogger(__name__)

DOMAINS = ("flat", "sketch", "texture", "inverted")
CLASSES = ("disk", "square", "triangle", "plus", "ring")

DomainRef = Union[int, str]


def domain_id(domain: DomainRef) -> int:
    """Resolve a domain name or id, raising :class:`ConfigError` if it is unknown"""
    if isinstance(domain, str) and not domain.isdigit():
        if domain not in DOMAINS:
            raise ConfigError(
                {"run.targets": f"unknown domain {domain!r} - expected one of {DOMAINS}"}
            )
        return DOMAINS.index(domain)
    index = int(domain)
    if not 0 <= index < len(DOMAINS):
        raise ConfigError(
            {"run.targets": f"domain id must lie in [0, {len(DOMAINS)}), not {index}"}
        )
    return index


@dataclass(frozen=True)
class Dataset:
    """Stacked samples

    Attributes:
        images: ``(N, 3, S, S)`` float32 values in ``[0, 1]``.
        labels: ``(N,)`` class ids.
        domains: ``(N,)`` domain ids.
        indices: ``(N,)`` position of each image within its (domain, class) cell.
    """

    images: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    indices: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.images)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ShapeError(f"Expected images of shape (N, 3, S, S), not {self.images.shape}")
        for name in ("labels", "domains", "indices"):
            if getattr(self, name).shape != (n,):
                raise ShapeError(f"{name} must have shape ({n},)")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def size(self) -> int:
        return int(self.images.shape[-1])

    def subset(self, selector: Union[np.ndarray, Sequence[int], slice]) -> "Dataset":
        return Dataset(
            self.images[selector],
            self.labels[selector],
            self.domains[selector],
            self.indices[selector],
        )

    def where(self, domain: int, label: int) -> np.ndarray:
        """Positions of the samples in one (domain, class) cell"""
        return np.flatnonzero((self.domains == domain) & (self.labels == label))

    def batches(self, batch_size: int) -> Iterator["Dataset"]:
        """Consecutive chunks in stored order, the last one possibly shorter"""
        for start in range(0, len(self), batch_size):
            yield self.subset(slice(start, start + batch_size))

    @classmethod
    def concat(cls, datasets: Sequence["Dataset"]) -> "Dataset":
        if not datasets:
            raise ShapeError("Cannot concatenate zero datasets")
        return cls(
            np.concatenate([d.images for d in datasets]),
            np.concatenate([d.labels for d in datasets]),
            np.concatenate([d.domains for d in datasets]),
            np.concatenate([d.indices for d in datasets]),
        )


@dataclass(frozen=True)
class Split:
    """A leave-one-domain-out partition

    ``train`` and ``val`` hold one dataset per source domain; ``test`` is the whole
    target domain.
    """

    target: int
    train: Tuple[Dataset, ...]
    val: Tuple[Dataset, ...]
    test: Dataset

    @property
    def sources(self) -> Tuple[int, ...]:
        return tuple(int(d.domains[0]) for d in self.train if len(d))

    @property
    def train_pool(self) -> Dataset:
        return Dataset.concat(self.train)

    @property
    def val_pool(self) -> Dataset:
        return Dataset.concat(self.val)


# --- rendering -------------------------------------------------------------------------

Sdf = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


def _box(x: np.ndarray, y: np.ndarray, half_w: float, half_h: float) -> np.ndarray:
    return np.maximum(np.abs(x) - half_w, np.abs(y) - half_h)


def _disk(x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    return np.hypot(x, y) - r


def _square(x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    return _box(x, y, r, r)


def _triangle(x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    # vertices on a circle of radius r, edges at distance r / 2 from the center
    edges = [
        np.cos(angle) * x + np.sin(angle) * y
        for angle in (math.pi / 2, math.pi * 7 / 6, math.pi * 11 / 6)
    ]
    return np.maximum.reduce(edges) - r / 2


def _plus(x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    return np.minimum(_box(x, y, r, r / 3), _box(x, y, r / 3, r))


def _ring(x: np.ndarray, y: np.ndarray, r: float) -> np.ndarray:
    return np.abs(np.hypot(x, y) - r) - 0.2 * r


SHAPES: Dict[str, Sdf] = {
    "disk": _disk,
    "square": _square,
    "triangle": _triangle,
    "plus": _plus,
    "ring": _ring,
}
"""Signed distance of each class's shape: negative inside, positive outside"""

CENTER_JITTER = 0.15
RADIUS_RANGE = (0.4, 0.55)
"""With the jitter these keep every shape's farthest point within 0.95 of the center"""


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    centers = (np.arange(size) + 0.5) / size * 2 - 1
    return np.meshgrid(centers, centers)


def _coverage(distance: np.ndarray, size: int) -> np.ndarray:
    pixel = 2 / size
    return np.clip(0.5 - distance / pixel, 0, 1)


def _shape_distance(label: int, size: int, rng: np.random.Generator) -> np.ndarray:
    x, y = _grid(size)
    cx, cy = rng.uniform(-CENTER_JITTER, CENTER_JITTER, size=2)
    r = rng.uniform(*RADIUS_RANGE)
    theta = rng.uniform(0, 2 * math.pi)
    cos, sin = math.cos(theta), math.sin(theta)
    u = cos * (x - cx) + sin * (y - cy)
    v = -sin * (x - cx) + cos * (y - cy)
    return SHAPES[CLASSES[label]](u, v, r)


def _blend(background: np.ndarray, foreground: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    return background * (1 - alpha) + foreground * alpha


def _flat(distance: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = distance.shape[-1]
    background = rng.uniform(0.55, 0.8, size=3)[:, None, None] * np.ones((3, size, size))
    foreground = rng.uniform(0.0, 0.25, size=3)[:, None, None]
    return _blend(background, foreground, _coverage(distance, size)[None])


def _sketch(distance: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = distance.shape[-1]
    paper = rng.uniform(0.93, 1.0)
    ink = rng.uniform(0.0, 0.15)
    stroke = _coverage(np.abs(distance) - rng.uniform(0.03, 0.06), size)
    image = _blend(np.full((3, size, size), paper), np.full((3, 1, 1), ink), stroke[None])
    return image + rng.normal(0, 0.01, size=image.shape)


def _texture(distance: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    size = distance.shape[-1]
    rows, cols = np.indices((size, size))
    checker = np.where((rows + cols) % 2 == 0, 0.2, -0.2)
    tint = rng.uniform(0.35, 0.55, size=3)[:, None, None]
    background = tint + checker
    foreground = tint + 0.35 - checker
    image = _blend(background, foreground, _coverage(distance, size)[None])
    return image + rng.normal(0, 0.05, size=image.shape)


def _inverted(distance: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return 1 - _flat(distance, rng)


STYLES: Dict[str, Callable[[np.ndarray, np.random.Generator], np.ndarray]] = {
    "flat": _flat,
    "sketch": _sketch,
    "texture": _texture,
    "inverted": _inverted,
}


def render(seed: int, domain: int, label: int, index: int, size: int = 32) -> np.ndarray:
    """Draw one ``(3, size, size)`` image from its own stream"""
    rng = stream(seed, "render", domain, label, index)
    distance = _shape_distance(label, size, rng)
    image = STYLES[DOMAINS[domain]](distance, rng)
    return np.clip(image, 0, 1).astype(np.float32)


def generate_dataset(seed: int, per_class: int, size: int = 32) -> List[Dataset]:
    """One class-balanced dataset per domain, in domain id order"""
    problems = {}
    if per_class < 1:
        problems["data.per_class"] = f"must be at least 1, not {per_class}"
    if size < 16 or size % 16:
        problems["data.size"] = f"must be a positive multiple of 16, not {size}"
    if problems:
        raise ConfigError(problems)

    datasets = []
    for domain in range(len(DOMAINS)):
        images = np.empty((len(CLASSES) * per_class, 3, size, size), dtype=np.float32)
        labels = np.repeat(np.arange(len(CLASSES)), per_class)
        indices = np.tile(np.arange(per_class), len(CLASSES))
        for position, (label, index) in enumerate(zip(labels, indices)):
            images[position] = render(seed, domain, int(label), int(index), size)
        datasets.append(
            Dataset(images, labels, np.full(len(labels), domain), indices)
        )
    logger.debug(f"Rendered {len(DOMAINS)} domains x {len(CLASSES)} classes x {per_class}")
    return datasets


def leave_one_out(
    datasets: Sequence[Dataset],
    target: DomainRef,
    val_fraction: float,
    seed: int,
) -> Split:
    """Hold out ``target`` entirely and split every other domain into train and val

    The validation split is stratified: each (domain, class) cell contributes
    ``round(val_fraction * cell_size)`` samples, chosen by that cell's own stream.
    """
    target_id = domain_id(target)
    if not 0 < val_fraction < 1:
        raise ConfigError({"data.val_fraction": f"must lie in (0, 1), not {val_fraction}"})
    if target_id >= len(datasets):
        raise ConfigError({"run.targets": f"no dataset for domain {target_id}"})

    train, val = [], []
    for domain, dataset in enumerate(datasets):
        if domain == target_id:
            continue
        train_rows, val_rows = [], []
        for label in range(len(CLASSES)):
            cell = dataset.where(domain, label)
            order = stream(seed, "split", domain, label).permutation(len(cell))
            n_val = int(math.floor(val_fraction * len(cell) + 0.5))
            val_rows.append(cell[np.sort(order[:n_val])])
            train_rows.append(cell[np.sort(order[n_val:])])
        train.append(dataset.subset(np.concatenate(train_rows)))
        val.append(dataset.subset(np.concatenate(val_rows)))
    return Split(target_id, tuple(train), tuple(val), datasets[target_id])


# --- PPM files -------------------------------------------------------------------------


def to_bytes(image: np.ndarray) -> np.ndarray:
    """``(3, H, W)`` values in ``[0, 1]`` to ``(H, W, 3)`` bytes, rounding half up"""
    scaled = np.floor(np.clip(image, 0, 1).astype(np.float64) * 255 + 0.5)
    return np.ascontiguousarray(scaled.astype(np.uint8).transpose(1, 2, 0))


def ppm_name(domain: int, label: int, index: int) -> str:
    return f"{DOMAINS[domain]}_{CLASSES[label]}_{index}.ppm"


def export_ppm(dataset: Dataset, directory: Union[str, Path]) -> List[Path]:
    """Write every image as a binary (P6) PPM file named ``{domain}_{class}_{index}.ppm``"""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as error:
        raise OSError(f"Could not create {directory}: {error}") from error
    paths = []
    for image, label, domain, index in zip(
        dataset.images, dataset.labels, dataset.domains, dataset.indices
    ):
        path = directory / ppm_name(int(domain), int(label), int(index))
        try:
            Image.fromarray(to_bytes(image)).save(path, format="PPM")
        except OSError as error:
            raise OSError(f"Could not write {path}: {error}") from error
        paths.append(path)
    logger.info(f"Wrote {len(paths)} images to {directory}")
    return paths


def import_ppm(path: Union[str, Path]) -> np.ndarray:
    """Read a PPM written by :func:`export_ppm` back into a ``(3, H, W)`` float image"""
    path = Path(path)
    try:
        with Image.open(path) as image:
            data = np.asarray(image.convert("RGB"), dtype=np.float32)
    except OSError as error:
        raise OSError(f"Could not read {path}: {error}") from error
    return np.ascontiguousarray(data.transpose(2, 0, 1) / 255)
