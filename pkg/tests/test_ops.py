import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from revtrain import memtrack, ops
from revtrain.errors import ShapeError

from oracles import fd_grad, loop_conv2d, rel_err

# Regression anchors computed once from the loop reference in oracles.py
# (inputs: PCG64 seeds 42/43/44, shapes below). Not derived from ops.py.
FROZEN_CONV_SUMS = {
    "s1p1": (390.0993137286342, 439.5640588948513),
    "s2p1": (94.19910256634554, 107.81814158520856),
    "s1p0_nobias": (1.299981262339216, 110.82936316349364),
}


def _conv_inputs(dtype=np.float64):
    x = ops.gaussian((2, 3, 8, 8), seed=42).astype(dtype)
    k = ops.gaussian((4, 3, 3, 3), seed=43, std=0.1).astype(dtype)
    b = ops.gaussian((4,), seed=44).astype(dtype)
    return x, k, b


def test_conv2d_forward_matches_loop_reference():
    x, k, b = _conv_inputs()
    for stride, padding, bias in [(1, 1, b), (2, 1, b), (1, 0, None), (2, 0, b), (1, 2, None)]:
        got = ops.conv2d_forward(x, k, bias, stride=stride, padding=padding)
        want = loop_conv2d(x, k, bias, stride=stride, padding=padding)
        assert got.shape == want.shape
        assert rel_err(got, want) < 1e-12


def test_conv2d_forward_frozen_checksums():
    x, k, b = _conv_inputs()
    cases = {
        "s1p1": ops.conv2d_forward(x, k, b, stride=1, padding=1),
        "s2p1": ops.conv2d_forward(x, k, b, stride=2, padding=1),
        "s1p0_nobias": ops.conv2d_forward(x, k, None, stride=1, padding=0),
    }
    for name, y in cases.items():
        s, a = FROZEN_CONV_SUMS[name]
        assert float(y.sum()) == pytest.approx(s, rel=1e-12)
        assert float(np.abs(y).sum()) == pytest.approx(a, rel=1e-12)


def test_conv2d_forward_rectangular_and_f32():
    x = ops.gaussian((3, 2, 5, 7), seed=7)
    k = ops.gaussian((4, 2, 3, 3), seed=8, std=0.2)
    got = ops.conv2d_forward(x, k, None, stride=1, padding=1)
    want = loop_conv2d(x.astype(np.float64), k.astype(np.float64), None, stride=1, padding=1)
    assert got.dtype == np.float32
    assert rel_err(got, want) < 1e-5


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0), (2, 0), (1, 2)])
def test_conv2d_backward_input_matches_finite_differences(stride, padding):
    x, k, _ = _conv_inputs()
    y0 = ops.conv2d_forward(x, k, None, stride=stride, padding=padding)
    weight = ops.gaussian(y0.shape, seed=9).astype(np.float64)

    def loss(xv):
        return float((loop_conv2d(xv, k, None, stride=stride, padding=padding) * weight).sum())

    gx = ops.conv2d_backward_input(weight, k, stride=stride, padding=padding, input_hw=x.shape[2:])
    assert gx.shape == x.shape
    assert rel_err(gx, fd_grad(loss, x.copy())) < 1e-7


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 1), (1, 0)])
def test_conv2d_backward_weight_matches_finite_differences(stride, padding):
    x, k, b = _conv_inputs()
    y0 = ops.conv2d_forward(x, k, b, stride=stride, padding=padding)
    weight = ops.gaussian(y0.shape, seed=11).astype(np.float64)

    def loss_k(kv):
        return float((loop_conv2d(x, kv, b, stride=stride, padding=padding) * weight).sum())

    def loss_b(bv):
        return float((loop_conv2d(x, k, bv, stride=stride, padding=padding) * weight).sum())

    gk, gb = ops.conv2d_backward_weight(
        x, weight, stride=stride, padding=padding,
        kernel_hw=k.shape[2:] if stride > 1 else None,
    )
    assert gk.shape == k.shape
    assert gb.shape == b.shape
    assert rel_err(gk, fd_grad(loss_k, k.copy())) < 1e-7
    assert rel_err(gb, fd_grad(loss_b, b.copy())) < 1e-7


def test_conv2d_backward_input_rejects_impossible_geometry():
    # inferred input size (oh-1)*s + kh - 2p collapses to zero
    g = np.zeros((1, 1, 4, 4), dtype=np.float32)
    k = np.zeros((1, 1, 3, 3), dtype=np.float32)
    with pytest.raises(ShapeError):
        ops.conv2d_backward_input(g, k, stride=1, padding=3)


def test_check_tensor_rejects_bad_inputs():
    with pytest.raises(ShapeError):
        ops.check_tensor(np.zeros((2, 3, 4), dtype=np.float32), "x")
    with pytest.raises(ShapeError):
        ops.check_tensor(np.zeros((2, 3, 4, 4), dtype=np.int32), "x")
    with pytest.raises(ShapeError):
        ops.check_tensor([[1.0]], "x")


def test_split_concat_channels_roundtrip_exact():
    x = ops.gaussian((2, 6, 4, 4), seed=3)
    a, b = ops.split_channels(x)
    assert a.shape == (2, 3, 4, 4) and b.shape == (2, 3, 4, 4)
    assert_array_equal(ops.concat_channels(a, b), x)


def test_split_channels_requires_even_channels():
    with pytest.raises(ShapeError):
        ops.split_channels(np.zeros((1, 3, 2, 2), dtype=np.float32))
    with pytest.raises(ShapeError):
        ops.split_channels(np.zeros((1, 4, 2, 2), dtype=np.float32), at=4)


@settings(max_examples=40, deadline=None)
@given(c=st.integers(2, 8), at=st.integers(1, 7), seed=st.integers(0, 2**31 - 1))
def test_split_concat_roundtrip_any_index(c, at, seed):
    if at >= c:
        return
    x = ops.gaussian((2, c, 3, 3), seed=seed)
    a, b = ops.split_channels(x, at=at)
    assert a.shape[1] == at and b.shape[1] == c - at
    assert_array_equal(ops.concat_channels(a, b), x)


def test_elementwise_suite():
    a = ops.gaussian((2, 2, 3, 3), seed=1)
    b = ops.gaussian((2, 2, 3, 3), seed=2)
    assert_array_equal(ops.add(a, b), a + b)
    assert_array_equal(ops.sub(a, b), a - b)
    assert_array_equal(ops.mul(a, b), a * b)
    assert_array_equal(ops.scale(a, 2.5), a * 2.5)
    with pytest.raises(ShapeError):
        ops.add(a, ops.gaussian((2, 2, 3, 4), seed=3))


def test_sum_sq_norm():
    assert ops.sum_sq_norm(np.zeros((3, 3))) == 0.0
    x = np.array([1.0, 2.0, 3.0], dtype=np.float32)
    assert ops.sum_sq_norm(x) == pytest.approx(14.0)


def test_channel_mean_var():
    x = ops.gaussian((3, 4, 5, 5), seed=21, dtype=np.float64)
    mean, var = ops.channel_mean_var(x)
    assert mean.shape == (4,) and var.shape == (4,)
    for ci in range(4):
        vals = x[:, ci].ravel()
        assert mean[ci] == pytest.approx(vals.mean(), abs=1e-12)
        assert var[ci] == pytest.approx(vals.var(), abs=1e-12)


def test_pool_channels_window_order():
    """2x2 spatial window (r0c0, r0c1, r1c0, r1c1) maps to 4 consecutive channels."""
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)
    y = ops.pool_channels(x)
    assert y.shape == (1, 4, 1, 1)
    assert_array_equal(y.ravel(), np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32))


def test_pool_channels_two_input_channels_block_layout():
    # channel ci of the input owns output channels [4*ci, 4*ci+4)
    x = np.arange(32, dtype=np.float32).reshape(1, 2, 4, 4)
    y = ops.pool_channels(x)
    assert y.shape == (1, 8, 2, 2)
    assert_array_equal(y[0, 0], np.array([[0.0, 2.0], [8.0, 10.0]], dtype=np.float32))
    assert_array_equal(y[0, 3], np.array([[5.0, 7.0], [13.0, 15.0]], dtype=np.float32))
    assert_array_equal(y[0, 4], np.array([[16.0, 18.0], [24.0, 26.0]], dtype=np.float32))


def test_pool_batch_window_order():
    """Same window order as pool_channels but laid out along the batch axis."""
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32)
    y = ops.pool_batch(x)
    assert y.shape == (4, 1, 1, 1)
    assert_array_equal(y.ravel(), np.array([1.0, 2.0, 3.0, 4.0], dtype=np.float32))


def test_pool_batch_two_samples_block_layout():
    # sample bi of the input owns output samples [4*bi, 4*bi+4)
    x = np.arange(32, dtype=np.float32).reshape(2, 1, 4, 4)
    y = ops.pool_batch(x)
    assert y.shape == (8, 1, 2, 2)
    assert_array_equal(y[0, 0], np.array([[0.0, 2.0], [8.0, 10.0]], dtype=np.float32))
    assert_array_equal(y[4, 0], np.array([[16.0, 18.0], [24.0, 26.0]], dtype=np.float32))


@settings(max_examples=50, deadline=None)
@given(
    bs=st.integers(1, 3),
    c=st.integers(1, 4),
    hw=st.sampled_from([2, 4, 6]),
    seed=st.integers(0, 2**31 - 1),
)
def test_pool_channels_roundtrip(bs, c, hw, seed):
    x = ops.gaussian((bs, c, hw, hw), seed=seed)
    assert_array_equal(ops.unpool_channels(ops.pool_channels(x)), x)


@settings(max_examples=50, deadline=None)
@given(
    bs=st.integers(1, 3),
    c=st.integers(1, 4),
    hw=st.sampled_from([2, 4, 6]),
    seed=st.integers(0, 2**31 - 1),
)
def test_pool_batch_roundtrip(bs, c, hw, seed):
    x = ops.gaussian((bs, c, hw, hw), seed=seed)
    assert_array_equal(ops.unpool_batch(ops.pool_batch(x)), x)


def test_pool_shape_validation():
    with pytest.raises(ShapeError):
        ops.pool_channels(np.zeros((1, 1, 3, 4), dtype=np.float32))
    with pytest.raises(ShapeError):
        ops.pool_batch(np.zeros((1, 1, 4, 3), dtype=np.float32))
    with pytest.raises(ShapeError):
        ops.unpool_channels(np.zeros((1, 3, 2, 2), dtype=np.float32))
    with pytest.raises(ShapeError):
        ops.unpool_batch(np.zeros((3, 1, 2, 2), dtype=np.float32))


def test_gaussian_deterministic_per_seed():
    a = ops.gaussian((5, 5), seed=123)
    b = ops.gaussian((5, 5), seed=123)
    c = ops.gaussian((5, 5), seed=124)
    assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert a.dtype == np.float32


def test_gaussian_moments():
    z = ops.gaussian((200000,), seed=0, mean=2.0, std=3.0, dtype=np.float64)
    assert abs(z.mean() - 2.0) < 0.05
    assert abs(z.std() - 3.0) < 0.05


def test_conv_apply_counting_convention():
    """Forward and backward-input each count one application; weight grad counts none."""
    x, k, b = _conv_inputs(np.float32)
    ops.reset_conv_applies()
    y = ops.conv2d_forward(x, k, b, stride=1, padding=1)
    assert ops.conv_applies() == 1
    assert (ops.conv_forward_applies(), ops.conv_backward_applies()) == (1, 0)
    ops.conv2d_backward_input(y, k, stride=1, padding=1, input_hw=(8, 8))
    assert ops.conv_applies() == 2
    assert (ops.conv_forward_applies(), ops.conv_backward_applies()) == (1, 1)
    ops.conv2d_backward_weight(x, y, stride=1, padding=1)
    assert ops.conv_applies() == 2
    ops.reset_conv_applies()
    assert ops.conv_applies() == 0


def test_measure_scope_tracks_peak_and_release():
    scope = memtrack.begin_measurement()
    base = scope.peak_bytes
    a = ops.gaussian((64, 64), seed=1)
    memtrack.track(a)
    assert scope.peak_bytes >= base + a.nbytes
    peak_after_a = scope.peak_bytes
    del a
    b = ops.gaussian((8, 8), seed=2)
    memtrack.track(b)
    stats = memtrack.end_measurement(scope)
    assert stats.peak_bytes == peak_after_a  # peak is monotone within the scope
    assert stats.allocation_count >= 2


def test_measure_scope_counts_preexisting_live_arrays():
    held = ops.gaussian((128, 128), seed=3)
    memtrack.track(held)
    with memtrack.MeasureScope() as scope:
        pass
    assert scope.peak_bytes >= held.nbytes


def test_conv2d_forward_output_is_tracked():
    x, k, b = _conv_inputs(np.float32)
    with memtrack.MeasureScope() as scope:
        y = ops.conv2d_forward(x, k, b, stride=1, padding=1)
    assert scope.peak_bytes >= y.nbytes
