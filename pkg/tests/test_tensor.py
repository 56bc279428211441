# -*- coding: utf-8 -*-
"""张量算子与自动微分测试"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core.errors import PreconditionError, ShapeError
from core.gradcheck import grad_check
from core.tensor import (OPERATORS, Parameter, Tensor, clamp_min, concat_channels, conv2d,
                         corrupt_operator, linear, log, log_softmax2, maxpool2d, reduce_sum, relu,
                         softmax2)


def _leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _naive_conv(x, w, b, stride, pad):
    c_out, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    out_h = (xp.shape[1] - k) // stride + 1
    out_w = (xp.shape[2] - k) // stride + 1
    out = np.zeros((c_out, out_h, out_w))
    for o in range(c_out):
        for i in range(out_h):
            for j in range(out_w):
                patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[o, i, j] = np.sum(patch * w[o]) + b[o]
    return out


class TestForward:
    def test_conv2d_matches_naive_loop(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.standard_normal((2, 7, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, pad=1)
        assert out.shape == (3, 4, 3)
        np.testing.assert_allclose(out.data, _naive_conv(x, w, b, 2, 1), atol=1e-12)

    def test_conv2d_batch_equals_per_sample(self):
        rng = np.random.default_rng(1)
        x, w = rng.standard_normal((4, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
        batched = conv2d(Tensor(x), Tensor(w)).data
        for n in range(4):
            np.testing.assert_allclose(batched[n], conv2d(Tensor(x[n]), Tensor(w)).data, atol=1e-12)

    def test_conv2d_channel_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError, match="C_in=3"):
            conv2d(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((4, 3, 3, 3))))

    def test_conv2d_kernel_larger_than_input(self):
        with pytest.raises(ShapeError):
            conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))

    def test_maxpool_ties_pick_lowest_index(self):
        x = Tensor(np.ones((1, 4, 4)))
        out, idx = maxpool2d(x, 2, 2, return_indices=True)
        np.testing.assert_array_equal(out.data, np.ones((1, 2, 2)))
        np.testing.assert_array_equal(idx[0], [[0, 2], [8, 10]])

    def test_maxpool_window_too_large(self):
        with pytest.raises(PreconditionError):
            maxpool2d(Tensor(np.zeros((1, 2, 2))), 3, 1)

    def test_relu_subgradient_at_zero(self):
        x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
        reduce_sum(relu(x)).backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_softmax2_is_stable_for_large_logits(self):
        probs = softmax2(Tensor(np.array([[1000.0, 0.0], [-1000.0, -1000.0]]))).data
        assert np.all(np.isfinite(probs))
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0)
        np.testing.assert_allclose(probs[1], [0.5, 0.5])

    def test_softmax2_rejects_non_finite(self):
        with pytest.raises(PreconditionError):
            softmax2(Tensor(np.array([np.nan, 0.0])))

    def test_log_softmax2_matches_log_of_softmax2(self):
        logits = np.array([[0.4, -1.0], [3.0, 2.5]])
        np.testing.assert_allclose(log_softmax2(Tensor(logits)).data, np.log(softmax2(Tensor(logits)).data),
                                   rtol=1e-12)
        saturated = log_softmax2(Tensor(np.array([1000.0, -1000.0]))).data
        np.testing.assert_allclose(saturated, [0.0, -2000.0])

    def test_log_softmax2_gradient(self):
        z = Tensor(np.random.default_rng(3).standard_normal((4, 2)), requires_grad=True)
        proj = np.random.default_rng(4).standard_normal((4, 2))
        assert grad_check(lambda: reduce_sum(log_softmax2(z) * proj), {'logits': z}, seed=0).passed

    def test_linear_dimension_check(self):
        with pytest.raises(ShapeError):
            linear(Tensor(np.zeros(4)), Tensor(np.zeros((3, 5))))

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ShapeError, match="空间尺寸不一致"):
            concat_channels([Tensor(np.zeros((1, 3, 3))), Tensor(np.zeros((2, 4, 3)))])

    def test_rank_and_empty_limits(self):
        with pytest.raises(ShapeError):
            Tensor(np.zeros((1, 1, 1, 1, 1)))
        with pytest.raises(ShapeError):
            Tensor(np.zeros((0, 3)))


class TestBackward:
    def test_gradients_accumulate_across_passes(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        reduce_sum(x * 3.0).backward()
        reduce_sum(x * 3.0).backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_shared_subexpression(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        y = x * x
        reduce_sum(y + y).backward()
        np.testing.assert_allclose(x.grad, [8.0])

    def test_non_scalar_needs_upstream(self):
        with pytest.raises(ShapeError):
            (Tensor(np.ones(3), requires_grad=True) * 2.0).backward()

    def test_clamp_min_blocks_gradient_below_floor(self):
        x = Tensor(np.array([1e-12, 0.5]), requires_grad=True)
        reduce_sum(log(clamp_min(x, 1e-8))).backward()
        np.testing.assert_allclose(x.grad, [0.0, 2.0])

    def test_parameter_buffers_share_shape(self):
        p = Parameter(np.ones((2, 3)), name='w')
        assert p.grad.shape == p.momentum.shape == p.data.shape
        assert p.requires_grad


@pytest.mark.parametrize("seed", range(3))
def test_every_operator_passes_finite_differences(seed):
    from models.network_check import operator_cases
    for name, (loss_fn, blocks) in operator_cases(seed).items():
        report = grad_check(loss_fn, blocks, step=1e-6, tolerance=1e-4, seed=seed)
        assert report.passed, f"{name}: {report.max_relative_error:.3e}"


@settings(max_examples=25, deadline=None)
@given(size=st.integers(3, 7), k=st.integers(1, 3), stride=st.integers(1, 3),
       pad=st.integers(0, 1), seed=st.integers(0, 10_000))
def test_conv2d_output_extent(size, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    out = conv2d(_leaf(rng, 2, size, size), _leaf(rng, 3, 2, k, k), stride=stride, pad=pad)
    expected = (size + 2 * pad - k) // stride + 1
    assert out.shape == (3, expected, expected)


def test_corrupted_operator_fails_gradcheck():
    from models.network_check import operator_cases
    loss_fn, blocks = operator_cases(0)['linear']
    with corrupt_operator('linear'):
        report = grad_check(loss_fn, blocks, seed=0)
    assert not report.passed
    assert grad_check(loss_fn, blocks, seed=0).passed


def test_registry_lists_network_operators():
    assert set(OPERATORS) == {'conv2d', 'maxpool2d', 'relu', 'linear', 'concat_channels', 'softmax2'}


class TestTorchOracle:
    """与 torch 的前向/反向结果对照 (未安装 torch 时跳过)"""

    def test_conv_pool_linear_chain(self):
        torch = pytest.importorskip("torch")
        rng = np.random.default_rng(7)
        x, w, b = rng.standard_normal((2, 3, 9, 9)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)
        m, c = rng.standard_normal((5, 64)), rng.standard_normal(5)

        tx, tw, tb, tm, tc = (Tensor(a, requires_grad=True) for a in (x, w, b, m, c))
        h = maxpool2d(relu(conv2d(tx, tw, tb, stride=1, pad=1)), 2, 2)
        h = h.reshape(2, -1)
        out = linear(h, tm, tc)
        reduce_sum(out * out).backward()

        px, pw, pb, pm, pc = (torch.tensor(a, requires_grad=True) for a in (x, w, b, m, c))
        ph = torch.nn.functional.max_pool2d(torch.relu(torch.nn.functional.conv2d(px, pw, pb, padding=1)), 2, 2)
        pout = torch.nn.functional.linear(ph.reshape(2, -1), pm, pc)
        (pout * pout).sum().backward()

        np.testing.assert_allclose(out.data, pout.detach().numpy(), rtol=1e-10, atol=1e-10)
        for ours, theirs in ((tx, px), (tw, pw), (tb, pb), (tm, pm), (tc, pc)):
            np.testing.assert_allclose(ours.grad, theirs.grad.numpy(), rtol=1e-8, atol=1e-9)
