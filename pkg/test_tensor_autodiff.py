#!/usr/bin/env python3
"""
Test script for the tensor kernel

Finite-difference gradient checks for every layer, conv2d against direct loops,
normalization invariances, ADAM updates and the checkpoint format.
"""

import logging

import numpy as np
import pytest

from eyeseg_dg.tensor import functional as F
from eyeseg_dg.tensor.autodiff import Tensor, concat, cos, exp, log, no_grad, sin
from eyeseg_dg.tensor.checkpoint import decode_checkpoint, encode_checkpoint
from eyeseg_dg.tensor.layers import ConvNormAct, Linear
from eyeseg_dg.tensor.optim import AdamState, adam_step
from eyeseg_dg.utils.errors import IntegrityError, NormalizationError, ShapeError

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s [%(levelname)s] %(name)s: %(message)s')
logger = logging.getLogger(__name__)

RTOL = 1e-4


def leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, shape), requires_grad=True, dtype=np.float64)


def numeric_grad(fn, tensor, eps=1e-6):
    """Central differences of a scalar function with respect to one tensor"""
    grad = np.zeros_like(tensor.data)
    it = np.nditer(tensor.data, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = tensor.data[idx]
        tensor.data[idx] = original + eps
        plus = fn().item()
        tensor.data[idx] = original - eps
        minus = fn().item()
        tensor.data[idx] = original
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def check_gradients(fn, tensors, rtol=RTOL):
    """Compare analytic and numeric gradients of a scalar function"""
    for t in tensors:
        t.zero_grad()
    fn().backward()
    for t in tensors:
        numeric = numeric_grad(fn, t)
        scale = max(np.abs(numeric).max(), 1e-8)
        err = np.abs(t.grad - numeric).max() / scale
        assert err <= rtol, f"relative gradient error {err:.2e} for shape {t.shape}"


def weighted_sum(out, weights):
    return (out * weights).sum()


@pytest.mark.parametrize("groups,stride,padding", [(1, 1, 1), (2, 1, 1), (1, 2, 0), (4, 1, 0), (2, 2, 1)])
def test_conv2d_gradients(groups, stride, padding):
    rng = np.random.default_rng(groups * 10 + stride + padding)
    x = leaf(rng, 2, 4, 6, 5)
    w = leaf(rng, 4, 4 // groups, 3, 3)
    b = leaf(rng, 4)
    out = F.conv2d(x, w, b, stride, padding, groups)
    weights = rng.normal(size=out.shape)
    check_gradients(lambda: weighted_sum(F.conv2d(x, w, b, stride, padding, groups), weights), [x, w, b])


def test_conv2d_output_extent():
    x = Tensor(np.zeros((1, 2, 7, 9)))
    w = Tensor(np.zeros((3, 2, 3, 3)))
    out = F.conv2d(x, w, stride=2, padding=1)
    assert out.shape == (1, 3, 4, 5)


def test_conv2d_rejects_group_mismatch():
    x = Tensor(np.zeros((1, 6, 4, 4)))
    w = Tensor(np.zeros((4, 3, 3, 3)))
    with pytest.raises(ShapeError, match="groups"):
        F.conv2d(x, w, groups=4)


def conv_loops(x, w, b, stride, padding, groups):
    """Direct nested-loop cross-correlation"""
    n, c_in, h, wd = x.shape
    c_out, c_per_group, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out))
    for s in range(n):
        for o in range(c_out):
            g = o // (c_out // groups)
            channels = slice(g * c_per_group, (g + 1) * c_per_group)
            for i in range(h_out):
                for j in range(w_out):
                    window = xp[s, channels, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[s, o, i, j] = np.sum(window * w[o]) + b[o]
    return out


def test_conv2d_known_values():
    one = F.conv2d(Tensor(np.full((1, 1, 1, 1), 5.0), dtype=np.float64),
                   Tensor(np.ones((1, 1, 1, 1)), dtype=np.float64))
    assert one.data.ravel().tolist() == [5.0]

    ramp = Tensor(np.arange(25.0).reshape(1, 1, 5, 5), dtype=np.float64)
    box = F.conv2d(ramp, Tensor(np.ones((1, 1, 3, 3)), dtype=np.float64))
    assert box.data[0, 0].tolist() == [[54.0, 63.0, 72.0], [99.0, 108.0, 117.0], [144.0, 153.0, 162.0]]


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(21)
    for groups in (1, 2, 4):
        for stride in (1, 2):
            for padding in (0, 1):
                x = rng.normal(size=(2, 4, 7, 6))
                w = rng.normal(size=(8, 4 // groups, 3, 3))
                b = rng.normal(size=8)
                got = F.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                               Tensor(b, dtype=np.float64), stride, padding, groups).data
                expected = conv_loops(x, w, b, stride, padding, groups)
                assert got.shape == expected.shape
                assert np.allclose(got, expected, atol=1e-10), (groups, stride, padding)


def test_depthwise_conv_equals_block_diagonal_dense():
    rng = np.random.default_rng(22)
    x = Tensor(rng.normal(size=(1, 4, 5, 5)), dtype=np.float64)
    depthwise = rng.normal(size=(4, 1, 3, 3))
    dense = np.zeros((4, 4, 3, 3))
    for c in range(4):
        dense[c, c] = depthwise[c, 0]
    a = F.conv2d(x, Tensor(depthwise, dtype=np.float64), padding=1, groups=4).data
    b = F.conv2d(x, Tensor(dense, dtype=np.float64), padding=1, groups=1).data
    assert np.allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("kind", ["instance", "batch"])
def test_normalize_gradients(kind):
    rng = np.random.default_rng(3)
    x = leaf(rng, 3, 2, 4, 5, scale=4.0)
    weights = rng.normal(size=x.shape)
    check_gradients(lambda: weighted_sum(F.normalize(x, F.NormalizationMode(kind=kind)), weights), [x])


def test_instance_norm_statistics():
    rng = np.random.default_rng(11)
    for _ in range(100):
        x = Tensor(rng.normal(rng.uniform(-20, 20), rng.uniform(3, 5), (2, 3, 6, 8)), dtype=np.float64)
        y = F.normalize(x, F.NormalizationMode("instance")).data
        assert np.abs(y.mean(axis=(2, 3))).max() < 1e-6
        assert np.abs(y.var(axis=(2, 3)) - 1.0).max() < 1e-5


def test_instance_norm_affine_invariance():
    rng = np.random.default_rng(12)
    exact = F.NormalizationMode("instance", eps=1e-12)
    default = F.NormalizationMode("instance")
    for _ in range(100):
        x = rng.normal(0.0, 4.0, (1, 2, 5, 7))
        a, b = rng.uniform(0.5, 3.0), rng.uniform(-50, 50)
        y1 = F.normalize(Tensor(x, dtype=np.float64), exact).data
        y2 = F.normalize(Tensor(a * x + b, dtype=np.float64), exact).data
        assert np.abs(y1 - y2).max() < 1e-6
        # the default eps shifts the output by O(eps / variance)
        y1 = F.normalize(Tensor(x, dtype=np.float64), default).data
        y2 = F.normalize(Tensor(a * x + b, dtype=np.float64), default).data
        assert np.abs(y1 - y2).max() < 1e-4


def test_batch_norm_eval_needs_running_statistics():
    x = Tensor(np.ones((2, 1, 2, 2)))
    with pytest.raises(NormalizationError):
        F.normalize(x, F.NormalizationMode("batch"), phase="eval")


def test_batch_norm_running_statistics_move_only_in_training():
    rng = np.random.default_rng(5)
    mode = F.NormalizationMode("batch")
    x = Tensor(rng.normal(3.0, 2.0, (4, 2, 3, 3)))
    F.normalize(x, mode, "train")
    mean = mode.running_mean.copy()
    F.normalize(x, mode, "eval")
    assert np.array_equal(mean, mode.running_mean)
    assert mode.batches_tracked == 1


def test_activation_and_resampling_gradients():
    rng = np.random.default_rng(4)
    x = leaf(rng, 2, 3, 4, 6)
    for op in (F.leaky_relu, F.avg_pool2d, F.upsample2x, F.softmax_channels, F.log_softmax_channels):
        weights = rng.normal(size=op(x).shape)
        check_gradients(lambda: weighted_sum(op(x), weights), [x])


def test_elementwise_and_concat_gradients():
    rng = np.random.default_rng(6)
    a = leaf(rng, 2, 3)
    b = Tensor(rng.uniform(0.5, 2.0, (2, 3)), requires_grad=True, dtype=np.float64)
    check_gradients(lambda: (sin(a) * cos(b) + exp(a * 0.3) / b + log(b) - a ** 2).sum(), [a, b])
    check_gradients(lambda: (concat([a, b], axis=1) ** 2).mean(), [a, b])


def test_linear_and_layer_gradients():
    rng = np.random.default_rng(8)
    layer = Linear(5, 3, rng, dtype=np.float64)
    x = leaf(rng, 4, 5)
    check_gradients(lambda: (layer(x) ** 2).sum(), [x, layer.weight, layer.bias])

    block = ConvNormAct(2, 4, 3, 2, "instance", rng, dtype=np.float64)
    img = leaf(rng, 2, 2, 4, 4, scale=3.0)
    weights = rng.normal(size=(2, 4, 4, 4))
    check_gradients(lambda: weighted_sum(block(img), weights), [img, block.conv.weight, block.norm.gamma])


def test_softmax_sums_to_one():
    rng = np.random.default_rng(9)
    s = F.softmax_channels(Tensor(rng.normal(0, 30, (2, 3, 4, 4)))).data
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_is_stable_for_large_logits():
    s = F.softmax_channels(Tensor(np.full((1, 3, 1, 1), 1000.0))).data
    assert np.all(np.isfinite(s))
    assert np.allclose(s, 1.0 / 3.0, atol=1e-6)
    log_s = F.log_softmax_channels(Tensor(np.array([1000.0, 0.0, -1000.0]).reshape(1, 3, 1, 1))).data
    assert np.all(np.isfinite(log_s))
    assert log_s[0, 0, 0, 0] == pytest.approx(0.0, abs=1e-6)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        (x * 2.0).backward()


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert y.creator is None


def test_adam_first_step_moves_by_learning_rate():
    p = Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True, dtype=np.float64)
    state = AdamState(lr=0.1)
    assert adam_step([p], [np.array([0.3, -4.0, 0.0])], state)
    assert np.allclose(p.data, [0.9, -1.9, 0.5], atol=1e-6)
    assert state.step_count == 1


def test_adam_rejects_non_finite_gradient():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
    state = AdamState()
    assert not adam_step([p], [np.array([np.nan, 1.0])], state)
    assert np.array_equal(p.data, [1.0, 2.0])
    assert state.rejected_steps == 1
    assert state.step_count == 0


def test_adam_minimizes_quadratic_deterministically():
    def descend():
        p = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
        state = AdamState(lr=0.1)
        for _ in range(500):
            assert adam_step([p], [2.0 * (p.data - 3.0)], state)
        return p.data.copy()

    first = descend()
    assert abs(first[0] - 3.0) < 0.05
    assert np.array_equal(first, descend())


def test_adam_zero_gradient_keeps_parameters():
    p = Tensor(np.array([1.5, -0.5]), requires_grad=True, dtype=np.float64)
    state = AdamState(lr=0.1)
    assert adam_step([p], [np.zeros(2)], state)
    assert adam_step([p], [None], state)
    assert np.array_equal(p.data, [1.5, -0.5])
    assert state.step_count == 2


def test_checkpoint_bytes_round_trip():
    rng = np.random.default_rng(10)
    arrays = {"param.a": rng.normal(size=(2, 3)).astype(np.float32), "state.iteration": np.array([12.0])}
    blob = encode_checkpoint(arrays)
    decoded = decode_checkpoint(blob)
    assert list(decoded) == list(arrays)
    assert np.array_equal(decoded["param.a"], arrays["param.a"])
    assert encode_checkpoint(decoded) == blob


def test_checkpoint_rejects_corruption():
    blob = encode_checkpoint({"x": np.ones(4, dtype=np.float32)})
    with pytest.raises(IntegrityError):
        decode_checkpoint(b"XXXX" + blob[4:])
    with pytest.raises(IntegrityError):
        decode_checkpoint(blob[:-3])


def main():
    """Main function"""
    logger.info("Starting tensor kernel tests")
    tests = [(name, fn) for name, fn in globals().items() if name.startswith("test_") and callable(fn)]
    failed = 0
    for name, fn in tests:
        try:
            if name in ("test_conv2d_gradients", "test_normalize_gradients"):
                continue
            fn()
            logger.info(f"✅ {name}")
        except Exception as e:
            failed += 1
            logger.error(f"❌ {name}: {e}")
    logger.info("Parametrized gradient checks run under pytest only")
    return failed == 0


if __name__ == "__main__":
    success = main()
    if not success:
        exit(1)
