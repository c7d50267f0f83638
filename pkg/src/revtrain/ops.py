"""Dense 4-D tensor kernels.

The universal value type is a numpy ndarray of shape (batch, channel, height,
width) in float32 or float64, C-contiguous row-major. Convolution is
cross-correlation (no kernel flip), implemented as im2col + BLAS matmul; the
im2col workspace is untracked scratch.

Convolution-application accounting: conv2d_forward and conv2d_backward_input
each count as one application; conv2d_backward_weight rides along with the
input-gradient sweep of the same layer and does not increment the counter.
Under this convention a plain backward costs ~1x the forward application
count, block-reversible ~2x and hybrid ~3x (reconstruction sweeps included).

Random sampling uses numpy's PCG64 (permuted congruential generator, XSL-RR
128/64 variant) seeded through SeedSequence, so sampled tensors are
reproducible bit-for-bit for a given seed within an environment.
"""

from __future__ import annotations

import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .memtrack import track

FLOAT_DTYPES = (np.float32, np.float64)

_counter_lock = threading.Lock()
_conv_forward_applies = 0
_conv_backward_applies = 0


def conv_applies() -> int:
    """Total counted convolution applications (forward + gradient sweeps)."""
    return _conv_forward_applies + _conv_backward_applies


def conv_forward_applies() -> int:
    return _conv_forward_applies


def conv_backward_applies() -> int:
    return _conv_backward_applies


def reset_conv_applies() -> None:
    global _conv_forward_applies, _conv_backward_applies
    with _counter_lock:
        _conv_forward_applies = 0
        _conv_backward_applies = 0


def _count_forward() -> None:
    global _conv_forward_applies
    with _counter_lock:
        _conv_forward_applies += 1


def _count_backward() -> None:
    global _conv_backward_applies
    with _counter_lock:
        _conv_backward_applies += 1


def check_tensor(x, name: str = "tensor"):
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D ndarray, got {getattr(x, 'shape', type(x))}")
    if x.dtype not in FLOAT_DTYPES:
        raise ShapeError(f"{name} must be float32 or float64, got {x.dtype}")
    return x


def _pad_hw(x, padding: int):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp, kh: int, kw: int, stride: int):
    # (bs, cin, H, W) -> column matrix (bs*oh*ow, cin*kh*kw), plus (oh, ow)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    bs, cin, oh, ow = win.shape[:4]
    col = win.transpose(0, 2, 3, 1, 4, 5).reshape(bs * oh * ow, cin * kh * kw)
    return col, oh, ow


def conv2d_forward(x, kernel, bias=None, stride: int = 1, padding: int = 0):
    """Cross-correlate x (bs,cin,h,w) with kernel (cout,cin,kh,kw), add bias."""
    check_tensor(x, "x")
    bs, cin, h, w = x.shape
    cout, cin_k, kh, kw = kernel.shape
    if cin_k != cin:
        raise ShapeError(f"kernel expects {cin_k} input channels, x has {cin}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"spatial dims {h}x{w} too small for kernel {kh}x{kw} pad {padding}")
    _count_forward()
    col, oh, ow = _im2col(_pad_hw(x, padding), kh, kw, stride)
    out = col @ kernel.reshape(cout, -1).T
    out = out.reshape(bs, oh, ow, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias[None, :, None, None]
    return track(np.ascontiguousarray(out))


def conv2d_backward_input(grad_out, kernel, stride: int = 1, padding: int = 0, input_hw=None):
    """Gradient w.r.t. the convolution input.

    input_hw disambiguates the input spatial size when (h+2p-k) % stride != 0;
    by default exact division is assumed.
    """
    check_tensor(grad_out, "grad_out")
    bs, cout, oh, ow = grad_out.shape
    cout_k, cin, kh, kw = kernel.shape
    if cout_k != cout:
        raise ShapeError(f"kernel produces {cout_k} channels, grad_out has {cout}")
    if input_hw is None:
        h = (oh - 1) * stride + kh - 2 * padding
        w = (ow - 1) * stride + kw - 2 * padding
    else:
        h, w = input_hw
    if h < 1 or w < 1:
        raise ShapeError("grad_out spatial dims inconsistent with kernel/stride/padding")
    _count_backward()
    if stride > 1:
        g = np.zeros((bs, cout, (oh - 1) * stride + 1, (ow - 1) * stride + 1), grad_out.dtype)
        g[:, :, ::stride, ::stride] = grad_out
    else:
        g = grad_out
    # full correlation with the transposed, spatially flipped kernel, then crop
    # to the original frame; rows/cols no window reached keep zero gradient
    k_t = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].swapaxes(0, 1))
    gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    col, gh, gw = _im2col(gp, kh, kw, 1)
    out = col @ k_t.reshape(cin, -1).T
    out = out.reshape(bs, gh, gw, cin).transpose(0, 3, 1, 2)
    src = out[:, :, padding : padding + h, padding : padding + w]
    gx = np.zeros((bs, cin, h, w), dtype=grad_out.dtype)
    gx[:, :, : src.shape[2], : src.shape[3]] = src
    return track(gx)


def conv2d_backward_weight(x, grad_out, stride: int = 1, padding: int = 0, kernel_hw=None):
    """Gradients w.r.t. kernel and bias. Returns (grad_kernel, grad_bias).

    kernel_hw disambiguates the kernel spatial size when (h+2p-k) % stride != 0;
    by default exact division is assumed.
    """
    check_tensor(x, "x")
    check_tensor(grad_out, "grad_out")
    bs, cin, h, w = x.shape
    bs_g, cout, oh, ow = grad_out.shape
    if bs_g != bs:
        raise ShapeError(f"batch mismatch: x {bs}, grad_out {bs_g}")
    if kernel_hw is None:
        kh = h + 2 * padding - (oh - 1) * stride
        kw = w + 2 * padding - (ow - 1) * stride
    else:
        kh, kw = kernel_hw
    if kh < 1 or kw < 1:
        raise ShapeError("grad_out spatial dims inconsistent with x/stride/padding")
    col, oh2, ow2 = _im2col(_pad_hw(x, padding), kh, kw, stride)
    if (oh2, ow2) != (oh, ow):
        raise ShapeError(f"inferred output {oh2}x{ow2} != grad_out {oh}x{ow}")
    g_mat = grad_out.transpose(0, 2, 3, 1).reshape(bs * oh * ow, cout)
    gk = (col.T @ g_mat).reshape(cin, kh, kw, cout).transpose(3, 0, 1, 2)
    gb = grad_out.sum(axis=(0, 2, 3))
    return track(np.ascontiguousarray(gk)), track(np.ascontiguousarray(gb))


def split_channels(x, at=None):
    """Split along channels into two contiguous copies at index ``at``.

    Defaults to an even half split (coupling layers), which requires an even
    channel count.
    """
    check_tensor(x, "x")
    c = x.shape[1]
    if at is None:
        if c % 2:
            raise ShapeError(f"channel split requires even channel count, got {c}")
        at = c // 2
    if not 0 < at < c:
        raise ShapeError(f"split index {at} out of range for {c} channels")
    return track(x[:, :at].copy()), track(x[:, at:].copy())


def concat_channels(a, b):
    check_tensor(a, "a")
    check_tensor(b, "b")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat halves disagree: {a.shape} vs {b.shape}")
    return track(np.concatenate([a, b], axis=1))


def add(a, b):
    _check_same_shape(a, b)
    return track(a + b)


def sub(a, b):
    _check_same_shape(a, b)
    return track(a - b)


def mul(a, b):
    _check_same_shape(a, b)
    return track(a * b)


def scale(x, s: float):
    return track(x * s)


def _check_same_shape(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"operand shapes differ: {np.shape(a)} vs {np.shape(b)}")


def sum_sq_norm(x) -> float:
    """Squared L2 norm of all elements, accumulated in f64."""
    r = np.asarray(x).ravel().astype(np.float64, copy=False)
    return float(r @ r)


def channel_mean_var(x):
    """Per-channel mean and biased variance over (bs, h, w)."""
    check_tensor(x, "x")
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))
    return track(mean), track(var)


# 2x2 window scan order is row-major: (0,0), (0,1), (1,0), (1,1).
# pool_channels sends input channel ci window slot k to output channel ci*4+k;
# pool_batch sends batch element bi window slot k to output element bi*4+k.

def pool_channels(x):
    """(bs, c, h, w) -> (bs, 4c, h/2, w/2), bit-exact permutation."""
    check_tensor(x, "x")
    bs, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pooling requires even spatial dims, got {h}x{w}")
    r = x.reshape(bs, c, h // 2, 2, w // 2, 2)
    return track(np.ascontiguousarray(r.transpose(0, 1, 3, 5, 2, 4).reshape(bs, 4 * c, h // 2, w // 2)))


def unpool_channels(y):
    bs, c4, h, w = check_tensor(y, "y").shape
    if c4 % 4:
        raise ShapeError(f"channel unpool requires channels divisible by 4, got {c4}")
    c = c4 // 4
    r = y.reshape(bs, c, 2, 2, h, w)
    return track(np.ascontiguousarray(r.transpose(0, 1, 4, 2, 5, 3).reshape(bs, c, 2 * h, 2 * w)))


def pool_batch(x):
    """(bs, c, h, w) -> (4bs, c, h/2, w/2), bit-exact permutation."""
    check_tensor(x, "x")
    bs, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"pooling requires even spatial dims, got {h}x{w}")
    r = x.reshape(bs, c, h // 2, 2, w // 2, 2)
    return track(np.ascontiguousarray(r.transpose(0, 3, 5, 1, 2, 4).reshape(4 * bs, c, h // 2, w // 2)))


def unpool_batch(y):
    bs4, c, h, w = check_tensor(y, "y").shape
    if bs4 % 4:
        raise ShapeError(f"batch unpool requires batch divisible by 4, got {bs4}")
    bs = bs4 // 4
    r = y.reshape(bs, 2, 2, c, h, w)
    return track(np.ascontiguousarray(r.transpose(0, 3, 4, 1, 5, 2).reshape(bs, c, 2 * h, 2 * w)))


def default_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def gaussian(shape, seed=None, rng=None, mean: float = 0.0, std: float = 1.0, dtype=np.float32):
    """Seeded Gaussian sample (PCG64 + ziggurat)."""
    if rng is None:
        rng = default_rng(0 if seed is None else seed)
    out = rng.standard_normal(shape, dtype=np.float64)
    if std != 1.0:
        out *= std
    if mean != 0.0:
        out += mean
    return track(out.astype(dtype, copy=False) if dtype != np.float64 else out)
