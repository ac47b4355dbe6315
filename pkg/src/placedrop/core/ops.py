"""Differentiable operations

Every function takes :class:`~placedrop.core.tensor.Tensor` operands, computes its
result with numpy and records a backward rule. Reductions always run over the same
axes in the same order, so identical inputs give bit-identical outputs and gradients.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from placedrop.errors import ContractError, ShapeError

from .tensor import Tensor, record


MaskLike = Union[Tensor, np.ndarray]


def _as_array(value: MaskLike, dtype: np.dtype) -> np.ndarray:
    return value.data if isinstance(value, Tensor) else np.asarray(value, dtype=dtype)


def _check_channel_broadcast(a_shape: Tuple[int, ...], b_shape: Tuple[int, ...]) -> None:
    if a_shape == b_shape:
        return None
    spatial = range(len(a_shape) - 2, len(a_shape))
    if len(a_shape) == len(b_shape) and len(a_shape) >= 3:
        if all(
            b == a or (b == 1 and axis in spatial)
            for axis, (a, b) in enumerate(zip(a_shape, b_shape))
        ):
            return None
    raise ShapeError(f"Cannot multiply shape {a_shape} by {b_shape}")


def _reduce_to(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    return grad.sum(axis=axes, keepdims=True) if axes else grad


def elementwise_mul(a: Tensor, b: MaskLike) -> Tensor:
    """Multiply ``a`` by ``b`` element by element

    ``b`` has the shape of ``a`` or, for a ``(..., C, H, W)`` operand, may hold a single
    value per channel (shape ``(..., C, 1, 1)``). It may be a plain array (a constant
    mask) or a tensor.
    """
    b_data = _as_array(b, a.dtype)
    _check_channel_broadcast(a.shape, b_data.shape)
    out = a.data * b_data

    def rule(grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        grad_a = grad * b_data
        if isinstance(b, Tensor):
            return grad_a, _reduce_to(grad * a.data, b_data.shape)
        return (grad_a,)

    parents = (a, b) if isinstance(b, Tensor) else (a,)
    return record("elementwise_mul", out, parents, rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Add two tensors of the same shape"""
    if a.shape != b.shape:
        raise ShapeError(f"Cannot add shape {a.shape} to {b.shape}")
    return record("add", a.data + b.data, (a, b), lambda grad: (grad, grad))


def total(a: Tensor) -> Tensor:
    """Sum every element into a scalar"""
    shape = a.shape
    return record(
        "sum",
        np.asarray(a.data.sum(), dtype=a.dtype),
        (a,),
        lambda grad: (np.broadcast_to(grad, shape).copy(),),
    )


def weighted_sum(a: Tensor, weights: np.ndarray) -> Tensor:
    """``sum(a * weights)`` for a constant array of weights"""
    weights = np.asarray(weights, dtype=a.dtype)
    if weights.shape != a.shape:
        raise ShapeError(f"Weights of shape {weights.shape} do not match {a.shape}")
    return record(
        "weighted_sum",
        np.asarray((a.data * weights).sum(), dtype=a.dtype),
        (a,),
        lambda grad: (grad * weights,),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """The product of two matrices"""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects matrices, not {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"Inner extents of {a.shape} and {b.shape} disagree")

    def rule(grad: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return grad @ b.data.T, a.data.T @ grad

    return record("matmul", a.data @ b.data, (a, b), rule)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` for ``x`` of shape ``(N, D)`` and ``weight`` of ``(D, K)``"""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"Cannot apply weight {weight.shape} to input {x.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"Bias {bias.shape} does not match weight {weight.shape}")

    def rule(grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        return grad @ weight.data.T, x.data.T @ grad, grad.sum(axis=0)

    return record("linear", x.data @ weight.data + bias.data, (x, weight, bias), rule)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    padding: int = 1,
) -> Tensor:
    """Stride 1 cross-correlation with zero padding

    Parameters:
        x: Input of shape ``(N, C_in, H, W)``.
        weight: Kernels of shape ``(C_out, C_in, kh, kw)``.
        bias: Optional per output channel offset of shape ``(C_out,)``.
        padding: Zeros added to each spatial border.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and kernel, not {x.shape}, {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, k_in, kh, kw = weight.shape
    if k_in != c_in:
        raise ShapeError(f"Kernel expects {k_in} input channels, input has {c_in}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"Bias {bias.shape} does not match {c_out} output channels")
    h_out, w_out = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if h_out < 1 or w_out < 1:
        raise ShapeError(f"Kernel {kh}x{kw} is larger than padded input {h}x{w}")

    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    padded = np.pad(x.data, pad) if padding else x.data
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h_out * w_out, -1)
    kernel = weight.data.reshape(c_out, -1)
    flat = cols @ kernel.T
    if bias is not None:
        flat += bias.data
    out = np.ascontiguousarray(flat.reshape(n, h_out, w_out, c_out).transpose(0, 3, 1, 2))

    def rule(grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        grad_flat = grad.transpose(0, 2, 3, 1).reshape(-1, c_out)
        grad_weight = (grad_flat.T @ cols).reshape(weight.shape)
        grad_cols = (grad_flat @ kernel).reshape(n, h_out, w_out, c_in, kh, kw)
        grad_padded = np.zeros(padded.shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                grad_padded[:, :, i : i + h_out, j : j + w_out] += grad_cols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        grad_x = grad_padded[:, :, padding : padding + h, padding : padding + w]
        grads: Tuple[Optional[np.ndarray], ...] = (grad_x, grad_weight)
        if bias is not None:
            grads += (grad_flat.sum(axis=0),)
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, parents, rule)


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel standardization over ``(N, H, W)`` followed by an affine map

    In training mode the batch statistics are used and ``running_mean`` and
    ``running_var`` are updated in place. In evaluation mode the running statistics are
    used and left untouched.
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects (N, C, H, W), not {x.shape}")
    n, c, h, w = x.shape
    if n * h * w == 0:
        raise ContractError("batch_norm needs at least one value per channel")
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"scale/shift must have shape ({c},)")
    axes = (0, 2, 3)
    gamma = scale.data.reshape(1, c, 1, 1)
    beta = shift.data.reshape(1, c, 1, 1)

    if training:
        mean = x.data.mean(axis=axes, keepdims=True)
        centered = x.data - mean
        var = (centered * centered).mean(axis=axes, keepdims=True)
        count = n * h * w
        unbiased = var * (count / (count - 1)) if count > 1 else var
        running_mean *= 1 - momentum
        running_mean += momentum * mean.reshape(c).astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * unbiased.reshape(c).astype(running_var.dtype)
    else:
        mean = running_mean.reshape(1, c, 1, 1).astype(x.dtype)
        var = running_var.reshape(1, c, 1, 1).astype(x.dtype)
        centered = x.data - mean

    inv_std = 1.0 / np.sqrt(var + eps)
    normalized = centered * inv_std
    out = normalized * gamma + beta

    def rule(grad: np.ndarray) -> Tuple[np.ndarray, ...]:
        grad_scale = (grad * normalized).sum(axis=axes)
        grad_shift = grad.sum(axis=axes)
        grad_normalized = grad * gamma
        if training:
            count = n * h * w
            grad_x = (inv_std / count) * (
                count * grad_normalized
                - grad_normalized.sum(axis=axes, keepdims=True)
                - normalized * (grad_normalized * normalized).sum(axis=axes, keepdims=True)
            )
        else:
            grad_x = grad_normalized * inv_std
        return grad_x, grad_scale, grad_shift

    return record("batch_norm", out, (x, scale, shift), rule)


def relu(x: Tensor) -> Tensor:
    """``max(x, 0)`` with a subgradient of 0 at the kink"""
    positive = x.data > 0
    return record(
        "relu",
        np.where(positive, x.data, 0).astype(x.dtype),
        (x,),
        lambda grad: (grad * positive,),
    )


def max_pool_2x2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max pooling; ties resolve to the first window element"""
    if x.ndim != 4:
        raise ShapeError(f"max_pool_2x2 expects (N, C, H, W), not {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool_2x2 needs even spatial extents, not {h}x{w}")
    windows = (
        x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    winner = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, winner[..., None], axis=-1)[..., 0]

    def rule(grad: np.ndarray) -> Tuple[np.ndarray]:
        hot = (np.arange(4) == winner[..., None]) * grad[..., None]
        grad_x = (
            hot.reshape(n, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h, w)
        )
        return (grad_x.astype(grad.dtype),)

    return record("max_pool_2x2", np.ascontiguousarray(out), (x,), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    """Average over the two trailing (spatial) axes"""
    if x.ndim < 3:
        raise ShapeError(f"global_avg_pool expects (..., H, W) features, not {x.shape}")
    h, w = x.shape[-2:]
    shape = x.shape

    def rule(grad: np.ndarray) -> Tuple[np.ndarray]:
        return (np.broadcast_to(grad[..., None, None] / (h * w), shape).copy(),)

    return record("global_avg_pool", x.data.mean(axis=(-2, -1)), (x,), rule)


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``

    Uses a max-shifted log-sum-exp so large logits neither overflow nor underflow.
    """
    if logits.ndim != 2:
        raise ShapeError(f"Logits must be (N, K), not {logits.shape}")
    n, k = logits.shape
    targets = np.asarray(labels, dtype=np.int64)
    if targets.shape != (n,):
        raise ShapeError(f"Expected {n} labels, got shape {targets.shape}")
    if n == 0:
        raise ContractError("Cannot compute a loss over an empty batch")
    if targets.min() < 0 or targets.max() >= k:
        raise ContractError(f"Labels must lie in [0, {k}), got [{targets.min()}, {targets.max()}]")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(n)
    loss = np.asarray(-log_probs[rows, targets].mean(), dtype=logits.dtype)

    def rule(grad: np.ndarray) -> Tuple[np.ndarray]:
        probs = np.exp(log_probs)
        probs[rows, targets] -= 1
        return (probs * (grad / n),)

    return record("softmax_cross_entropy", loss, (logits,), rule)


def instance_restyle(
    x: Tensor,
    target_mu: np.ndarray,
    target_sigma: np.ndarray,
    eps: float,
) -> Tensor:
    """Give every channel of ``x`` a new mean and standard deviation

    ``out = target_sigma * (x - mu) / (sigma + eps) + target_mu`` where ``mu`` and
    ``sigma`` are the population statistics of each channel over its two trailing axes.
    The target statistics are constants; gradients flow through ``mu`` and ``sigma``.

    Parameters:
        x: Features of shape ``(..., C, H, W)``.
        target_mu: Target means of shape ``(..., C)``.
        target_sigma: Target standard deviations of shape ``(..., C)``.
        eps: Added to ``sigma`` in the denominator.
    """
    if x.ndim < 3:
        raise ShapeError(f"Expected (..., C, H, W) features, not {x.shape}")
    stats_shape = x.shape[:-2]
    target_mu = np.asarray(target_mu, dtype=x.dtype)
    target_sigma = np.asarray(target_sigma, dtype=x.dtype)
    if target_mu.shape != stats_shape or target_sigma.shape != stats_shape:
        raise ShapeError(
            f"Target statistics {target_mu.shape}/{target_sigma.shape} do not match "
            f"features {x.shape}"
        )
    count = x.shape[-1] * x.shape[-2]
    mu = x.data.mean(axis=(-2, -1), keepdims=True)
    centered = x.data - mu
    sigma = np.sqrt((centered * centered).mean(axis=(-2, -1), keepdims=True))
    denom = sigma + eps
    normalized = centered / denom
    scale = target_sigma[..., None, None]
    out = scale * normalized + target_mu[..., None, None]

    def rule(grad: np.ndarray) -> Tuple[np.ndarray]:
        g = grad * scale
        g_mean = g.mean(axis=(-2, -1), keepdims=True)
        g_dot = (g * centered).sum(axis=(-2, -1), keepdims=True)
        safe_sigma = np.where(sigma > 0, sigma, 1)
        through_sigma = np.where(
            sigma > 0, centered * g_dot / (count * safe_sigma * denom * denom), 0
        )
        return ((g - g_mean) / denom - through_sigma,)

    return record("instance_restyle", out.astype(x.dtype), (x,), rule)
