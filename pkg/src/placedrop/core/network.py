from __future__ import annotations

import struct
from logging import getLogger
from pathlib import Path
from typing import BinaryIO, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from placedrop.errors import ContractError, ShapeError
from placedrop.streams import stream

from . import ops
from .proto import ALL_LAYERS, FeatureHook, LayerId
from .tensor import Tensor


logger = getLogger(__name__)

BLOCK_WIDTHS = (16, 32, 64, 128)
"""Output channels of blocks B1..B4"""

CHECKPOINT_MAGIC = b"PLCK"
CHECKPOINT_VERSION = 1


class Block:
    """conv 3x3 -> batch norm -> ReLU -> 2x2 max pool"""

    __slots__ = "kernel", "bias", "scale", "shift", "running_mean", "running_var"

    def __init__(self, kernel: Tensor, bias: Tensor, scale: Tensor, shift: Tensor) -> None:
        self.kernel = kernel
        self.bias = bias
        self.scale = scale
        self.shift = shift
        width = kernel.shape[0]
        self.running_mean = np.zeros(width, dtype=kernel.dtype)
        self.running_var = np.ones(width, dtype=kernel.dtype)

    @property
    def width(self) -> int:
        return self.kernel.shape[0]

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        x = ops.conv2d(x, self.kernel, self.bias, padding=1)
        x = ops.batch_norm(
            x, self.scale, self.shift, self.running_mean, self.running_var, training
        )
        return ops.max_pool_2x2(ops.relu(x))


class Network:
    """The four block CNN with hook points L1..L4 and a linear classifier

    Use :meth:`Network.initialize` to build one with fresh parameters.
    """

    def __init__(self, blocks: Sequence[Block], weight: Tensor, bias: Tensor) -> None:
        if len(blocks) != len(ALL_LAYERS):
            raise ShapeError(f"Expected {len(ALL_LAYERS)} blocks, got {len(blocks)}")
        self.blocks = list(blocks)
        self.weight = weight
        self.bias = bias
        self.training = True

    @classmethod
    def initialize(
        cls,
        num_classes: int,
        seed: int,
        in_channels: int = 3,
        widths: Sequence[int] = BLOCK_WIDTHS,
        dtype: Optional[np.dtype] = None,
    ) -> "Network":
        """Fan-in scaled normal weights, zero biases, unit norm scales"""
        rng = stream(seed, "init")
        blocks = []
        fan_in_channels = in_channels
        for width in widths:
            fan_in = fan_in_channels * 9
            kernel = rng.standard_normal((width, fan_in_channels, 3, 3)) * np.sqrt(2.0 / fan_in)
            blocks.append(
                Block(
                    Tensor(kernel, requires_grad=True, dtype=dtype),
                    Tensor(np.zeros(width), requires_grad=True, dtype=dtype),
                    Tensor(np.ones(width), requires_grad=True, dtype=dtype),
                    Tensor(np.zeros(width), requires_grad=True, dtype=dtype),
                )
            )
            fan_in_channels = width
        weight = rng.standard_normal((fan_in_channels, num_classes)) * np.sqrt(
            1.0 / fan_in_channels
        )
        return cls(
            blocks,
            Tensor(weight, requires_grad=True, dtype=dtype),
            Tensor(np.zeros(num_classes), requires_grad=True, dtype=dtype),
        )

    @property
    def num_classes(self) -> int:
        return self.weight.shape[1]

    def width(self, layer: LayerId) -> int:
        """Channel count of the features at a hook point"""
        return self.blocks[layer.index].width

    def feature_shape(self, layer: LayerId, size: int) -> Tuple[int, int, int]:
        """``(C, H, W)`` of the features at a hook point for ``size`` x ``size`` images"""
        side = size // 2 ** (layer.index + 1)
        return self.width(layer), side, side

    def train(self) -> "Network":
        self.training = True
        return self

    def eval(self) -> "Network":
        self.training = False
        return self

    def parameters(self) -> List[Tensor]:
        """Trainable tensors in declaration order"""
        params: List[Tensor] = []
        for block in self.blocks:
            params.extend([block.kernel, block.bias, block.scale, block.shift])
        params.extend([self.weight, self.bias])
        return params

    def named_arrays(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Every array a checkpoint holds, parameters and running statistics alike"""
        for i, block in enumerate(self.blocks, 1):
            yield f"block{i}.kernel", block.kernel.data
            yield f"block{i}.bias", block.bias.data
            yield f"block{i}.scale", block.scale.data
            yield f"block{i}.shift", block.shift.data
            yield f"block{i}.running_mean", block.running_mean
            yield f"block{i}.running_var", block.running_var
        yield "head.weight", self.weight.data
        yield "head.bias", self.bias.data

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def features(
        self,
        x: Tensor,
        hooks: Sequence[Tuple[LayerId, FeatureHook]] = (),
    ) -> Tensor:
        """Pooled block-4 output ``(N, 128)``: the penultimate representation"""
        for index, block in enumerate(self.blocks):
            x = block(x, self.training)
            for layer, hook in hooks:
                if layer.index == index:
                    x = _apply_hook(layer, hook, x)
        return ops.global_avg_pool(x)

    def forward(
        self,
        x: Tensor,
        hooks: Sequence[Tuple[LayerId, FeatureHook]] = (),
    ) -> Tensor:
        """Compute logits ``(N, num_classes)`` for images ``(N, 3, H, W)``

        Each hook receives the output of the block its layer names and its result
        replaces that output. Hooks at the same layer run in the order given. Hooks are
        a training device: passing any in evaluation mode is an error.
        """
        if x.ndim != 4 or x.shape[1] != self.blocks[0].kernel.shape[1]:
            raise ShapeError(f"Expected images (N, 3, H, W), not {x.shape}")
        if hooks and not self.training:
            raise ContractError("Feature hooks are closed in evaluation mode")
        return ops.linear(self.features(x, hooks), self.weight, self.bias)

    __call__ = forward

    def save(self, path: Union[str, Path]) -> Path:
        """Write a checkpoint

        Layout (little endian): magic ``PLCK``, ``u32`` version, ``u32`` array count,
        then per array a ``u16`` name length, the UTF-8 name, a ``u8`` dtype code
        (4 or 8 bytes per float), a ``u8`` rank, one ``u32`` per extent and the raw
        row-major values.
        """
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = list(self.named_arrays())
        tmp = path.with_suffix(path.suffix + ".tmp")
        with tmp.open("wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<II", CHECKPOINT_VERSION, len(arrays)))
            for name, array in arrays:
                _write_array(f, name, array)
        tmp.replace(path)
        logger.debug(f"Saved checkpoint with {len(arrays)} arrays to {path}")
        return path

    def load(self, path: Union[str, Path]) -> "Network":
        """Overwrite this network's arrays with those in a checkpoint"""
        path = Path(path)
        with path.open("rb") as f:
            if f.read(4) != CHECKPOINT_MAGIC:
                raise ContractError(f"{path} is not a placedrop checkpoint")
            version, count = struct.unpack("<II", f.read(8))
            if version != CHECKPOINT_VERSION:
                raise ContractError(f"Unsupported checkpoint version {version} in {path}")
            stored: Dict[str, np.ndarray] = dict(_read_array(f) for _ in range(count))
        for name, array in self.named_arrays():
            try:
                values = stored.pop(name)
            except KeyError:
                raise ContractError(f"Checkpoint {path} has no array {name!r}")
            if values.shape != array.shape:
                raise ShapeError(f"{name} has shape {values.shape} in {path}, not {array.shape}")
            array[...] = values
        if stored:
            raise ContractError(f"Checkpoint {path} has unexpected arrays {sorted(stored)}")
        return self


def _apply_hook(layer: LayerId, hook: FeatureHook, x: Tensor) -> Tensor:
    out = hook(x)
    if out.shape != x.shape:
        raise ContractError(f"Hook at {layer.value} changed shape {x.shape} to {out.shape}")
    return out


def _write_array(f: BinaryIO, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    f.write(struct.pack("<H", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<BB", array.dtype.itemsize, array.ndim))
    f.write(struct.pack(f"<{array.ndim}I", *array.shape))
    f.write(np.ascontiguousarray(array, dtype=array.dtype.newbyteorder("<")).tobytes())


def _read_array(f: BinaryIO) -> Tuple[str, np.ndarray]:
    (length,) = struct.unpack("<H", f.read(2))
    name = f.read(length).decode("utf-8")
    itemsize, ndim = struct.unpack("<BB", f.read(2))
    shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    dtype = np.dtype({4: "<f4", 8: "<f8"}[itemsize])
    count = int(np.prod(shape)) if shape else 1
    values = np.frombuffer(f.read(count * itemsize), dtype=dtype).reshape(shape)
    return name, values.astype(dtype.newbyteorder("="))
