from __future__ import annotations

import threading
from contextlib import contextmanager
from logging import getLogger
from typing import (
    Any,
    Callable,
    Dict,
    Iterator,
    List,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np

from placedrop.config import PLACEDROP_CHECK_FINITE, PLACEDROP_DEFAULT_DTYPE
from placedrop.errors import ContractError, NumericalError


logger = getLogger(__name__)

BackwardRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
"""Maps the upstream gradient of an output to one gradient per parent (``None`` to skip)"""


class TapeNode:
    """How a tensor was produced, recorded so its gradient can be pushed to its parents"""

    __slots__ = "op", "parents", "rule"

    def __init__(
        self,
        op: str,
        parents: Tuple["Tensor", ...],
        rule: BackwardRule,
    ) -> None:
        self.op = op
        self.parents = parents
        self.rule = rule

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.op!r}, parents={len(self.parents)})"


class Tensor:
    """A dense N-dimensional array which can record how it was computed

    Parameters:
        data:
            Anything :func:`numpy.asarray` accepts. Stored contiguously in row-major
            order using ``dtype`` (default :data:`~placedrop.config.PLACEDROP_DEFAULT_DTYPE`).
        requires_grad:
            Whether gradients should be accumulated into :attr:`Tensor.grad`.
        name:
            An optional label used in checkpoints and error messages.
    """

    __slots__ = "data", "requires_grad", "grad", "node", "name"

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        dtype: Any = None,
        name: Optional[str] = None,
    ) -> None:
        dtype = PLACEDROP_DEFAULT_DTYPE.current if dtype is None else dtype
        self.data: np.ndarray = np.ascontiguousarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return int(self.data.ndim)

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"Only single element tensors have an item, not {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's values but not its history"""
        return Tensor(self.data, dtype=self.data.dtype, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """See :func:`backward`"""
        backward(self)

    def __repr__(self) -> str:
        label = f"{self.name!r}, " if self.name else ""
        op = f", op={self.node.op!r}" if self.node is not None else ""
        return (
            f"{type(self).__name__}({label}shape={self.shape}, dtype={self.dtype}, "
            f"requires_grad={self.requires_grad}{op})"
        )


_recording = threading.local()


def is_recording() -> bool:
    """Whether operations on this thread currently record their history"""
    return getattr(_recording, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Stop recording history on this thread (e.g. while evaluating)"""
    previous = is_recording()
    _recording.enabled = False
    try:
        yield None
    finally:
        _recording.enabled = previous


def check_finite(op: str, values: np.ndarray, **context: Any) -> None:
    """Raise :class:`NumericalError` if any of the given values are NaN or infinite"""
    if not np.isfinite(values).all():
        raise NumericalError(f"{op} produced non-finite values", {"op": op, **context})


def record(
    op: str,
    data: np.ndarray,
    parents: Sequence[Tensor],
    rule: BackwardRule,
) -> Tensor:
    """Wrap the output of an operation, attaching its :class:`TapeNode` when needed"""
    if PLACEDROP_CHECK_FINITE.current:
        check_finite(op, data)
    requires_grad = is_recording() and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires_grad, dtype=data.dtype)
    if requires_grad:
        out.node = TapeNode(op, tuple(parents), rule)
    return out


def topological_order(root: Tensor) -> List[Tensor]:
    """All tensors ``root`` depends on, each listed after its parents

    The walk is iterative and visits parents in their recorded order so the result,
    and thus the order gradients are summed in, is the same on every call.
    """
    order: List[Tensor] = []
    visited: set = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]
    while stack:
        tensor, expanded = stack.pop()
        if expanded:
            order.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in reversed(tensor.node.parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every leaf tensor ``loss`` depends on

    Gradients accumulate: calling this twice without :func:`zero_grad` in between adds
    the second set of gradients to the first.
    """
    if loss.data.size != 1:
        raise ContractError(f"Can only call backward on a scalar, not shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("Loss does not require grad - nothing to differentiate")

    upstream: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for tensor in reversed(topological_order(loss)):
        grad = upstream.pop(id(tensor), None)
        if grad is None:
            continue
        node = tensor.node
        if node is None:
            tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
            continue
        parent_grads = node.rule(grad)
        if len(parent_grads) != len(node.parents):
            raise ContractError(
                f"Backward rule of {node.op!r} returned {len(parent_grads)} "
                f"gradients for {len(node.parents)} parents"
            )
        for parent, parent_grad in zip(node.parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + parent_grad
            else:
                upstream[key] = parent_grad


def zero_grad(tensors: Sequence[Tensor]) -> None:
    """Reset the accumulated gradients of the given tensors"""
    for t in tensors:
        t.zero_grad()
