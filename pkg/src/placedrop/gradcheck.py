"""Finite difference checks of every backward rule

Each suite builds a scalar from one operation, differentiates it and compares the
result with central differences, all in double precision. The error of a suite is

    max |analytic - numeric| / max(max |analytic|, max |numeric|)

taken over every input, so elements whose gradient is almost zero are judged on the
scale of the whole gradient rather than their own.
"""

from __future__ import annotations

from dataclasses import dataclass
from logging import getLogger
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from placedrop.config import PLACEDROP_DEFAULT_DTYPE
from placedrop.core import ops
from placedrop.core.tensor import Tensor, backward, no_grad
from placedrop.errors import GradientCheckError
from placedrop.place import apply_mask, sample_mask
from placedrop.streams import stream
from placedrop.style import StyleStats, adain, channel_stats, mix_style, swap_style


logger = getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-5
BATCH_NORM_TOLERANCE = 1e-4

Forward = Callable[[Sequence[Tensor]], Tensor]


@dataclass(frozen=True)
class OpCheck:
    op: str
    max_relative_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def numeric_gradient(
    value: Callable[[], float], array: np.ndarray, h: float = STEP
) -> np.ndarray:
    """Central differences of ``value()`` with respect to ``array``, perturbed in place"""
    grad = np.zeros_like(array)
    flat, out = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = value()
        flat[i] = original - h
        minus = value()
        flat[i] = original
        out[i] = (plus - minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest deviation over the scale of the larger gradient

    This is not a per-element bound: an entry much smaller than the largest one can
    be off by more than the tolerance relative to itself and still pass.
    """
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()))
    if scale == 0:
        return 0.0
    return float(np.abs(analytic - numeric).max()) / scale


def check_gradients(
    op: str,
    forward: Forward,
    inputs: Sequence[np.ndarray],
    tolerance: float = TOLERANCE,
    reference: Optional[Forward] = None,
) -> OpCheck:
    """Compare the gradients ``forward`` produces with central differences

    ``forward`` maps the input tensors to a scalar. ``reference``, when given, is
    differentiated numerically in its place. It must agree with ``forward`` at the
    given inputs and treats as constant whatever ``forward`` detaches.
    """
    reference = forward if reference is None else reference
    with PLACEDROP_DEFAULT_DTYPE.scoped(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in inputs]
        tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        backward(forward(tensors))

        def value() -> float:
            with no_grad():
                return reference([Tensor(a.copy()) for a in arrays]).item()

        worst = 0.0
        for array, tensor in zip(arrays, tensors):
            analytic = np.zeros_like(array) if tensor.grad is None else tensor.grad
            worst = max(worst, relative_error(analytic, numeric_gradient(value, array)))
    check = OpCheck(op, worst, tolerance)
    logger.debug(f"Gradient check {op}: max relative error {worst:.3e}")
    return check


# --- suites ----------------------------------------------------------------------------


def _weights(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    return rng.standard_normal(tuple(shape))


def _away_from_zero(values: np.ndarray, margin: float = 0.1) -> np.ndarray:
    return np.sign(values) * (np.abs(values) + margin)


def _distinct(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    """Values at least 0.1 apart so no 2x2 window is close to a tie"""
    size = int(np.prod(shape))
    return (rng.permutation(size) * 0.1 - size * 0.05).reshape(tuple(shape))


def _suite_elementwise_mul(rng: np.random.Generator) -> OpCheck:
    mask = rng.uniform(0.5, 1.5, size=(3, 1, 1))
    w = _weights(rng, (2, 3, 4, 4))
    return check_gradients(
        "elementwise_mul",
        lambda t: ops.weighted_sum(ops.elementwise_mul(t[0], mask), w),
        [rng.standard_normal((2, 3, 4, 4))],
    )


def _suite_matmul(rng: np.random.Generator) -> OpCheck:
    w = _weights(rng, (4, 2))
    return check_gradients(
        "matmul",
        lambda t: ops.weighted_sum(ops.matmul(t[0], t[1]), w),
        [rng.standard_normal((4, 3)), rng.standard_normal((3, 2))],
    )


def _suite_linear(rng: np.random.Generator) -> OpCheck:
    w = _weights(rng, (4, 2))
    return check_gradients(
        "linear",
        lambda t: ops.weighted_sum(ops.linear(t[0], t[1], t[2]), w),
        [rng.standard_normal((4, 3)), rng.standard_normal((3, 2)), rng.standard_normal(2)],
    )


def _suite_conv2d(rng: np.random.Generator) -> OpCheck:
    w = _weights(rng, (2, 3, 5, 5))
    return check_gradients(
        "conv2d",
        lambda t: ops.weighted_sum(ops.conv2d(t[0], t[1], t[2], padding=1), w),
        [
            rng.standard_normal((2, 2, 5, 5)),
            rng.standard_normal((3, 2, 3, 3)),
            rng.standard_normal(3),
        ],
    )


def _suite_batch_norm(rng: np.random.Generator) -> OpCheck:
    w = _weights(rng, (4, 3, 3, 3))

    def forward(t: Sequence[Tensor]) -> Tensor:
        out = ops.batch_norm(t[0], t[1], t[2], np.zeros(3), np.ones(3), training=True)
        return ops.weighted_sum(out, w)

    return check_gradients(
        "batch_norm",
        forward,
        [
            rng.standard_normal((4, 3, 3, 3)),
            rng.uniform(0.5, 1.5, size=3),
            rng.standard_normal(3),
        ],
        tolerance=BATCH_NORM_TOLERANCE,
    )


def _suite_relu(rng: np.random.Generator) -> OpCheck:
    w = _weights(rng, (2, 3, 4, 4))
    return check_gradients(
        "relu",
        lambda t: ops.weighted_sum(ops.relu(t[0]), w),
        [_away_from_zero(rng.standard_normal((2, 3, 4, 4)))],
    )


def _suite_max_pool_2x2(rng: np.random.Generator) -> OpCheck:
    w = _weights(rng, (2, 2, 2, 2))
    return check_gradients(
        "max_pool_2x2",
        lambda t: ops.weighted_sum(ops.max_pool_2x2(t[0]), w),
        [_distinct(rng, (2, 2, 4, 4))],
    )


def _suite_global_avg_pool(rng: np.random.Generator) -> OpCheck:
    w = _weights(rng, (2, 3))
    return check_gradients(
        "global_avg_pool",
        lambda t: ops.weighted_sum(ops.global_avg_pool(t[0]), w),
        [rng.standard_normal((2, 3, 4, 4))],
    )


def _suite_softmax_cross_entropy(rng: np.random.Generator) -> OpCheck:
    labels = [0, 3, 1, 4, 2, 3]
    return check_gradients(
        "softmax_cross_entropy",
        lambda t: ops.softmax_cross_entropy(t[0], labels),
        [rng.standard_normal((6, 5)) * 2],
    )


def _suite_apply_mask(rng: np.random.Generator) -> OpCheck:
    mask = sample_mask(8, 3, rng)
    w = _weights(rng, (8, 4, 4))
    return check_gradients(
        "apply_mask",
        lambda t: ops.weighted_sum(apply_mask(t[0], mask), w),
        [rng.standard_normal((8, 4, 4))],
    )


def _suite_adain(rng: np.random.Generator) -> OpCheck:
    target = StyleStats(rng.standard_normal((2, 3)), rng.uniform(0.5, 2.0, size=(2, 3)))
    w = _weights(rng, (2, 3, 4, 4))
    return check_gradients(
        "adain",
        lambda t: ops.weighted_sum(adain(t[0], target), w),
        [rng.standard_normal((2, 3, 4, 4))],
    )


def _suite_swap_style(rng: np.random.Generator) -> OpCheck:
    x = rng.standard_normal((3, 4, 4))
    y = rng.standard_normal((3, 4, 4)) * 2 + 1
    wx, wy = _weights(rng, x.shape), _weights(rng, y.shape)
    # the donor statistics are detached, so they stay at their starting values
    sx, sy = channel_stats(x), channel_stats(y)

    def forward(t: Sequence[Tensor]) -> Tensor:
        a, b = swap_style(t[0], t[1])
        return ops.add(ops.weighted_sum(a, wx), ops.weighted_sum(b, wy))

    def reference(t: Sequence[Tensor]) -> Tensor:
        return ops.add(
            ops.weighted_sum(adain(t[0], sy), wx), ops.weighted_sum(adain(t[1], sx), wy)
        )

    return check_gradients("swap_style", forward, [x, y], reference=reference)


def _suite_mix_style(rng: np.random.Generator) -> OpCheck:
    x = rng.standard_normal((3, 4, 4))
    y = rng.standard_normal((3, 4, 4)) * 2 + 1
    lam = 0.3
    w = _weights(rng, x.shape)
    sx, sy = channel_stats(x), channel_stats(y)
    mixed = StyleStats(
        lam * sx.mu + (1 - lam) * sy.mu, lam * sx.sigma + (1 - lam) * sy.sigma
    )
    return check_gradients(
        "mix_style",
        lambda t: ops.weighted_sum(mix_style(t[0], t[1], lam), w),
        [x, y],
        reference=lambda t: ops.weighted_sum(adain(t[0], mixed), w),
    )


def _suite_two_layer_network(rng: np.random.Generator) -> OpCheck:
    labels = [1, 0, 2, 1]

    def forward(t: Sequence[Tensor]) -> Tensor:
        hidden = ops.relu(ops.linear(t[0], t[1], t[2]))
        return ops.softmax_cross_entropy(ops.linear(hidden, t[3], t[4]), labels)

    return check_gradients(
        "two_layer_network",
        forward,
        [
            rng.standard_normal((4, 5)),
            rng.standard_normal((5, 6)),
            rng.uniform(0.5, 1.0, size=6),
            rng.standard_normal((6, 3)),
            rng.standard_normal(3),
        ],
    )


SUITES: Dict[str, Callable[[np.random.Generator], OpCheck]] = {
    "elementwise_mul": _suite_elementwise_mul,
    "matmul": _suite_matmul,
    "linear": _suite_linear,
    "conv2d": _suite_conv2d,
    "batch_norm": _suite_batch_norm,
    "relu": _suite_relu,
    "max_pool_2x2": _suite_max_pool_2x2,
    "global_avg_pool": _suite_global_avg_pool,
    "softmax_cross_entropy": _suite_softmax_cross_entropy,
    "apply_mask": _suite_apply_mask,
    "adain": _suite_adain,
    "swap_style": _suite_swap_style,
    "mix_style": _suite_mix_style,
    "two_layer_network": _suite_two_layer_network,
}
"""Every gradient suite by the name of the operation it checks"""


def gradcheck(seed: int = 0, suites: Optional[Sequence[str]] = None) -> List[OpCheck]:
    """Run the gradient suites and return their results

    Raises:
        GradientCheckError: naming the first suite whose error exceeds its tolerance.
    """
    names = list(SUITES) if suites is None else list(suites)
    unknown = [name for name in names if name not in SUITES]
    if unknown:
        raise ValueError(
            f"Unknown gradient suites {unknown} - expected some of {list(SUITES)}"
        )
    report = []
    order = list(SUITES)
    for name in names:
        check = SUITES[name](stream(seed, "gradcheck", sample=order.index(name)))
        report.append(check)
        if check.passed:
            logger.info(f"{name}: max relative error {check.max_relative_error:.2e}")
        else:
            logger.error(f"{name}: max relative error {check.max_relative_error:.2e}")
    for check in report:
        if not check.passed:
            raise GradientCheckError(check.op, check.max_relative_error, check.tolerance)
    return report
