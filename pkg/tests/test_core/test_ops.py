import math

import numpy as np
import pytest

from placedrop.core import ops
from placedrop.core.tensor import Tensor, backward
from placedrop.errors import ContractError, ShapeError


def test_elementwise_mul_by_ones_is_exact_identity(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 4)))
    out = ops.elementwise_mul(x, np.ones((2, 3, 4, 4)))
    assert np.array_equal(out.data, x.data)


def test_elementwise_mul_broadcasts_one_value_per_channel():
    x = Tensor(np.ones((2, 2, 2)), requires_grad=True)
    mask = np.array([0.0, 1.0]).reshape(2, 1, 1)
    out = ops.elementwise_mul(x, mask)
    assert out.data[0].sum() == 0
    assert out.data[1].sum() == 4
    backward(ops.total(out))
    assert np.array_equal(x.grad, np.broadcast_to(mask, (2, 2, 2)))


def test_elementwise_mul_rejects_general_broadcasting():
    with pytest.raises(ShapeError, match="Cannot multiply shape"):
        ops.elementwise_mul(Tensor(np.ones((2, 3, 4))), np.ones((1, 3, 4)))


def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    assert np.array_equal(ops.matmul(Tensor(np.eye(2)), a).data, a.data)


def test_matmul_by_hand():
    out = ops.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5], [6]]))
    assert out.data.tolist() == [[17], [39]]


def test_matmul_rejects_mismatched_inner_extents():
    with pytest.raises(ShapeError, match="Inner extents"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv2d_unit_kernel_is_identity(rng):
    x = Tensor(rng.standard_normal((1, 1, 5, 5)))
    out = ops.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), padding=0)
    assert np.array_equal(out.data, x.data)


def test_conv2d_constant_input_interior_is_nine_c():
    c = 0.5
    out = ops.conv2d(Tensor(np.full((1, 1, 4, 4), c)), Tensor(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 4, 4)
    assert out.data[0, 0, 1:3, 1:3].tolist() == [[9 * c] * 2] * 2
    # corners only see four pixels of the padded input
    assert out.data[0, 0, 0, 0] == 4 * c


def test_conv2d_adds_bias():
    out = ops.conv2d(
        Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((3, 2, 3, 3))), Tensor([1, 2, 3])
    )
    assert out.data[0, :, 1, 1].tolist() == [1, 2, 3]


def test_conv2d_rejects_channel_mismatch():
    with pytest.raises(ShapeError, match="Kernel expects 2 input channels"):
        ops.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((1, 2, 3, 3))))


def test_conv2d_gradients_are_deterministic(rng):
    x_data = rng.standard_normal((2, 3, 6, 6))
    w_data = rng.standard_normal((4, 3, 3, 3))

    def grads():
        x, w = Tensor(x_data, requires_grad=True), Tensor(w_data, requires_grad=True)
        backward(ops.total(ops.conv2d(x, w)))
        return x.grad, w.grad

    (x1, w1), (x2, w2) = grads(), grads()
    assert np.array_equal(x1, x2)
    assert np.array_equal(w1, w2)


def _norm_params(c):
    return Tensor(np.ones(c)), Tensor(np.zeros(c)), np.zeros(c), np.ones(c)


def test_batch_norm_leaves_standardized_input_unchanged(float64):
    x = np.array([-1.0, 1.0] * 8).reshape(2, 1, 2, 4)
    scale, shift, mean, var = _norm_params(1)
    out = ops.batch_norm(Tensor(x), scale, shift, mean, var, training=True)
    assert np.allclose(out.data, x, atol=1e-5)


def test_batch_norm_constant_channel_gives_shift():
    scale, _, mean, var = _norm_params(1)
    shift = Tensor([0.25])
    out = ops.batch_norm(Tensor(np.full((2, 1, 3, 3), 7.0)), scale, shift, mean, var, True)
    assert np.allclose(out.data, 0.25)


def test_batch_norm_updates_running_stats_only_in_training(float64):
    x = Tensor(np.full((2, 1, 2, 2), 4.0))
    scale, shift, mean, var = _norm_params(1)
    ops.batch_norm(x, scale, shift, mean, var, training=True, momentum=0.5)
    assert mean.tolist() == [2.0]
    assert var.tolist() == [0.5]
    ops.batch_norm(x, scale, shift, mean, var, training=False)
    assert mean.tolist() == [2.0]
    assert var.tolist() == [0.5]


def test_batch_norm_evaluation_uses_running_stats(float64):
    scale, shift, _, _ = _norm_params(1)
    mean, var = np.array([1.0]), np.array([4.0])
    out = ops.batch_norm(Tensor(np.full((1, 1, 1, 1), 5.0)), scale, shift, mean, var, False)
    assert math.isclose(out.data.item(), 4 / math.sqrt(4 + 1e-5))


def test_batch_norm_rejects_empty_batch():
    scale, shift, mean, var = _norm_params(2)
    with pytest.raises(ContractError, match="at least one value per channel"):
        ops.batch_norm(Tensor(np.ones((0, 2, 3, 3))), scale, shift, mean, var, True)


def test_relu_with_zero_subgradient_at_kink():
    x = Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    out = ops.relu(x)
    assert out.data.tolist() == [0, 0, 2]
    backward(ops.total(out))
    assert x.grad.tolist() == [0, 0, 1]


def test_max_pool_picks_window_maximum():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2), requires_grad=True)
    out = ops.max_pool_2x2(x)
    assert out.data.item() == 4
    backward(ops.total(out))
    assert x.grad.reshape(-1).tolist() == [0, 0, 0, 1]


def test_max_pool_needs_even_extents():
    with pytest.raises(ShapeError, match="even spatial extents"):
        ops.max_pool_2x2(Tensor(np.ones((1, 1, 3, 4))))


def test_global_avg_pool_by_hand():
    out = ops.global_avg_pool(Tensor(np.array([1.0, 3.0, 5.0, 7.0]).reshape(1, 1, 2, 2)))
    assert out.shape == (1, 1)
    assert out.data.item() == 4


def test_uniform_logits_give_log_k(float64):
    loss = ops.softmax_cross_entropy(Tensor(np.zeros((3, 7))), [0, 3, 6])
    assert abs(loss.item() - math.log(7)) < 1e-9
    assert abs(loss.item() - 1.945910) < 1e-6


def test_dominant_logit_gives_zero_loss(float64):
    logits = np.zeros((2, 4))
    logits[[0, 1], [2, 1]] = 1e6
    assert ops.softmax_cross_entropy(Tensor(logits), [2, 1]).item() == 0


def test_cross_entropy_gradient_is_softmax_minus_onehot(float64, rng):
    data = rng.standard_normal((4, 3))
    labels = [0, 2, 1, 2]
    logits = Tensor(data, requires_grad=True)
    backward(ops.softmax_cross_entropy(logits, labels))
    probs = np.exp(data) / np.exp(data).sum(axis=1, keepdims=True)
    probs[np.arange(4), labels] -= 1
    assert np.allclose(logits.grad, probs / 4, atol=1e-12)


def test_cross_entropy_rejects_label_out_of_range():
    with pytest.raises(ContractError, match=r"Labels must lie in \[0, 3\)"):
        ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_instance_restyle_matches_target_statistics(float64, rng):
    x = Tensor(rng.standard_normal((2, 3, 5, 5)))
    mu = rng.standard_normal((2, 3))
    sigma = rng.uniform(0.5, 2.0, size=(2, 3))
    out = ops.instance_restyle(x, mu, sigma, eps=1e-6).data
    assert np.allclose(out.mean(axis=(-2, -1)), mu, atol=1e-5)
    assert np.allclose(out.std(axis=(-2, -1)), sigma, atol=1e-5)


def test_weighted_sum_checks_shape():
    with pytest.raises(ShapeError, match="do not match"):
        ops.weighted_sum(Tensor(np.ones(3)), np.ones(4))
