"""Layer implementations.

Invertible layers (InvBatchNorm, InvLeakyReLU, InvConv, ChannelPool, BatchPool)
expose forward / inverse / backward so activations can be reconstructed during
the backward pass instead of stored. Conv2D, MaxPool2x2 and ClassifierHead are
the conventional non-invertible counterparts.

Conventions shared by every layer:
  - tensors are (bs, c, h, w), f32 or f64; a layer's dtype fixes its parameters
  - backward takes the gradient w.r.t. the layer output plus whatever forward
    context the caller saved or reconstructed, and returns the input gradient
    together with a {name: grad} dict for the layer's parameters
  - params() returns live parameter arrays keyed by name, for in-place updates

Normalization uses scale = |gamma| + eps_i rather than |gamma + eps_i|: the
floor keeps the per-channel scale away from zero for every gamma value, so the
inverse never divides by a vanishing number. The denominator is sqrt(var) + eps
(the eps sits outside the square root) and batch variance is the biased 1/N
estimator.
"""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError, StateError
from .memtrack import track


def kaiming_kernel(cout, cin, kh, kw, rng, dtype):
    """Fan-in scaled Gaussian init, std = sqrt(2 / (cin*kh*kw))."""
    std = float(np.sqrt(2.0 / (cin * kh * kw)))
    return ops.gaussian((cout, cin, kh, kw), rng=rng, std=std, dtype=dtype)


class Conv2D:
    kind = "conv"
    invertible = False

    def __init__(self, cin, cout, k=3, stride=1, padding=None, rng=None, dtype=np.float32):
        if padding is None:
            padding = (k - 1) // 2
        self.cin, self.cout, self.k = cin, cout, k
        self.stride, self.padding = stride, padding
        rng = rng if rng is not None else ops.default_rng(0)
        self.kernel = kaiming_kernel(cout, cin, k, k, rng, dtype)
        self.bias = track(np.zeros(cout, dtype=dtype))

    def params(self):
        return {"kernel": self.kernel, "bias": self.bias}

    def forward(self, x):
        return ops.conv2d_forward(x, self.kernel, self.bias, self.stride, self.padding)

    def backward(self, grad_out, x):
        gx = ops.conv2d_backward_input(
            grad_out, self.kernel, self.stride, self.padding, input_hw=x.shape[2:]
        )
        gk, gb = ops.conv2d_backward_weight(
            x, grad_out, self.stride, self.padding, kernel_hw=(self.k, self.k)
        )
        return gx, {"kernel": gk, "bias": gb}


class InvBatchNorm:
    kind = "bn"
    invertible = True

    def __init__(self, channels, eps=1e-5, eps_i=0.1, momentum=0.9, dtype=np.float32):
        if eps <= 0 or eps_i < 0:
            raise ConfigError(f"need eps > 0 and eps_i >= 0, got {eps}, {eps_i}")
        self.channels = channels
        self.eps, self.eps_i, self.momentum = float(eps), float(eps_i), float(momentum)
        self.gamma = track(np.ones(channels, dtype=dtype))
        self.beta = track(np.zeros(channels, dtype=dtype))
        self.running_mean = track(np.zeros(channels, dtype=dtype))
        self.running_var = track(np.ones(channels, dtype=dtype))
        self.cached_stats = None

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def _check(self, x):
        ops.check_tensor(x, "x")
        if x.shape[1] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {x.shape[1]}")

    def _scale(self):
        return np.abs(self.gamma) + self.eps_i

    def forward(self, x, train=True, update_running=True):
        """Normalize with batch stats (train) or running stats (eval).

        Train mode caches the batch stats for a later inverse. update_running
        is switched off when a reversible backward pass re-applies the layer,
        so recomputation does not double-count into the running averages.
        """
        self._check(x)
        if train:
            bs, _, h, w = x.shape
            if bs * h * w < 2:
                raise ShapeError("batch statistics need at least 2 values per channel")
            mean, var = ops.channel_mean_var(x)
            self.cached_stats = (mean, var)
            if update_running:
                m = self.momentum
                self.running_mean = track((m * self.running_mean + (1 - m) * mean).astype(x.dtype))
                self.running_var = track((m * self.running_var + (1 - m) * var).astype(x.dtype))
        else:
            mean, var = self.running_mean, self.running_var
        return self._affine(x, mean, var)

    def _affine(self, x, mean, var):
        denom = np.sqrt(var) + self.eps
        col = lambda v: v.reshape(1, -1, 1, 1)
        y = col(self._scale()) * (x - col(mean)) / col(denom) + col(self.beta)
        return track(y)

    def forward_cached(self, x):
        """Re-apply the affine map with the cached batch stats, no side effects."""
        self._check(x)
        if self.cached_stats is None:
            raise StateError("no cached batch statistics; run forward(train=True) first")
        return self._affine(x, *self.cached_stats)

    def inverse(self, y):
        """Undo forward using the cached batch stats."""
        self._check(y)
        if self.cached_stats is None:
            raise StateError("inverse needs cached batch statistics; run forward(train=True) first")
        mean, var = self.cached_stats
        denom = np.sqrt(var) + self.eps
        col = lambda v: v.reshape(1, -1, 1, 1)
        x = (y - col(self.beta)) / col(self._scale()) * col(denom) + col(mean)
        return track(x)

    def backward(self, grad_out, x):
        """Gradients of the train-mode forward, treating batch stats as functions of x."""
        self._check(x)
        if grad_out.shape != x.shape:
            raise ShapeError(f"grad_out {grad_out.shape} does not match x {x.shape}")
        axes = (0, 2, 3)
        mean = x.mean(axis=axes, keepdims=True)
        var = x.var(axis=axes, keepdims=True)
        sqrt_v = np.sqrt(var)
        denom = sqrt_v + self.eps
        u = (x - mean) / denom
        grad_beta = track(grad_out.sum(axis=axes))
        sign = np.where(self.gamma >= 0, 1.0, -1.0).astype(x.dtype)
        grad_gamma = track(sign * (grad_out * u).sum(axis=axes))
        gu = grad_out * self._scale().reshape(1, -1, 1, 1)
        # d(sqrt(var))/dvar = 1/(2 sqrt(var)); when var == 0, u == 0 and the
        # statistics term vanishes, so the guarded reciprocal is exact
        inv_sqrt_v = np.zeros_like(sqrt_v)
        np.divide(1.0, sqrt_v, out=inv_sqrt_v, where=sqrt_v > 0)
        gu_mean = gu.mean(axis=axes, keepdims=True)
        guu_mean = (gu * u).mean(axis=axes, keepdims=True)
        gx = (gu - gu_mean) / denom - u * guu_mean * inv_sqrt_v
        return track(np.ascontiguousarray(gx)), {"gamma": grad_gamma, "beta": grad_beta}


class InvLeakyReLU:
    kind = "lrelu"
    invertible = True

    def __init__(self, n=2.0):
        if n <= 1.0:
            raise ConfigError(f"negative-slope divisor must exceed 1, got {n}")
        self.n = float(n)

    def params(self):
        return {}

    def forward(self, x):
        ops.check_tensor(x, "x")
        return track(np.where(x > 0, x, x / self.n))

    def inverse(self, y):
        ops.check_tensor(y, "y")
        return track(np.where(y > 0, y, y * self.n))

    def backward(self, grad_out, sign_source):
        """Scale gradients by 1 or 1/n; the branch comes from sign_source's sign.

        sign_source may be the (reconstructed) input or output: both sides of
        the kink have the same sign, so either works.
        """
        if grad_out.shape != sign_source.shape:
            raise ShapeError(f"grad {grad_out.shape} vs sign source {sign_source.shape}")
        return track(np.where(sign_source > 0, grad_out, grad_out / self.n)), {}


class InvConv:
    """Additive coupling over a channel split, each branch one convolution.

    forward: y1 = x1 + F(x2); y2 = x2 + G(y1)
    inverse: x2 = y2 - G(y1);  x1 = y1 - F(x2)
    """

    kind = "invconv"
    invertible = True

    def __init__(self, channels, k=3, rng=None, dtype=np.float32):
        if channels % 2:
            raise ShapeError(f"coupling needs an even channel count, got {channels}")
        if k % 2 == 0:
            raise ConfigError(f"kernel size must be odd to preserve spatial dims, got {k}")
        self.channels, self.k = channels, k
        self.padding = (k - 1) // 2
        half = channels // 2
        rng = rng if rng is not None else ops.default_rng(0)
        self.f_kernel = kaiming_kernel(half, half, k, k, rng, dtype)
        self.f_bias = track(np.zeros(half, dtype=dtype))
        self.g_kernel = kaiming_kernel(half, half, k, k, rng, dtype)
        self.g_bias = track(np.zeros(half, dtype=dtype))

    def params(self):
        return {
            "f_kernel": self.f_kernel,
            "f_bias": self.f_bias,
            "g_kernel": self.g_kernel,
            "g_bias": self.g_bias,
        }

    def _f(self, t):
        return ops.conv2d_forward(t, self.f_kernel, self.f_bias, 1, self.padding)

    def _g(self, t):
        return ops.conv2d_forward(t, self.g_kernel, self.g_bias, 1, self.padding)

    def forward(self, x):
        x1, x2 = ops.split_channels(x)
        y1 = ops.add(x1, self._f(x2))
        y2 = ops.add(x2, self._g(y1))
        return ops.concat_channels(y1, y2)

    def inverse(self, y):
        y1, y2 = ops.split_channels(y)
        x2 = ops.sub(y2, self._g(y1))
        x1 = ops.sub(y1, self._f(x2))
        return ops.concat_channels(x1, x2)

    def backward(self, grad_out, x, y=None):
        """Exact coupling gradients; pass y to skip recomputing y1 from x."""
        g1, g2 = ops.split_channels(grad_out)
        x1, x2 = ops.split_channels(x)
        if y is None:
            y1 = ops.add(x1, self._f(x2))
        else:
            y1 = ops.split_channels(y)[0]
        gk_g, gb_g = ops.conv2d_backward_weight(y1, g2, 1, self.padding)
        gy1 = ops.add(g1, ops.conv2d_backward_input(g2, self.g_kernel, 1, self.padding))
        gk_f, gb_f = ops.conv2d_backward_weight(x2, gy1, 1, self.padding)
        gx2 = ops.add(g2, ops.conv2d_backward_input(gy1, self.f_kernel, 1, self.padding))
        grads = {"f_kernel": gk_f, "f_bias": gb_f, "g_kernel": gk_g, "g_bias": gb_g}
        return ops.concat_channels(gy1, gx2), grads


class ChannelPool:
    """2x2 spatial window to 4x channels; a pure permutation."""

    kind = "pool_c"
    invertible = True

    def params(self):
        return {}

    def forward(self, x):
        return ops.pool_channels(x)

    def inverse(self, y):
        return ops.unpool_channels(y)

    def backward(self, grad_out):
        return ops.unpool_channels(grad_out), {}


class BatchPool:
    """2x2 spatial window to 4x virtual batch entries; a pure permutation."""

    kind = "pool_b"
    invertible = True

    def params(self):
        return {}

    def forward(self, x):
        return ops.pool_batch(x)

    def inverse(self, y):
        return ops.unpool_batch(y)

    def backward(self, grad_out):
        return ops.unpool_batch(grad_out), {}


class MaxPool2x2:
    kind = "maxpool"
    invertible = False

    def params(self):
        return {}

    @staticmethod
    def _windows(x):
        bs, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ShapeError(f"pooling requires even spatial dims, got {h}x{w}")
        r = x.reshape(bs, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return r.reshape(bs, c, h // 2, w // 2, 4)

    def forward(self, x):
        ops.check_tensor(x, "x")
        return track(np.ascontiguousarray(self._windows(x).max(axis=-1)))

    def backward(self, grad_out, x):
        """Route gradients to each window's argmax, recomputed from the stored input."""
        ops.check_tensor(x, "x")
        bs, c, h, w = x.shape
        win = self._windows(x)
        if grad_out.shape != win.shape[:4]:
            raise ShapeError(f"grad {grad_out.shape} does not match pooled {win.shape[:4]}")
        idx = win.argmax(axis=-1)
        scattered = np.zeros_like(win)
        np.put_along_axis(scattered, idx[..., None], grad_out[..., None], axis=-1)
        gx = (
            scattered.reshape(bs, c, h // 2, w // 2, 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(bs, c, h, w)
        )
        return track(np.ascontiguousarray(gx)), {}


class ClassifierHead:
    """Global average pool (spatial and batch-pool group), then an affine map.

    group_size is the number of virtual batch entries per real sample (4^k
    after k batch pools); forward caches only the pooled features.
    """

    kind = "head"
    invertible = False

    def __init__(self, cin, num_classes, group_size=1, rng=None, dtype=np.float32):
        if group_size < 1:
            raise ConfigError(f"group_size must be >= 1, got {group_size}")
        self.cin, self.num_classes, self.group_size = cin, num_classes, group_size
        rng = rng if rng is not None else ops.default_rng(0)
        std = float(np.sqrt(1.0 / cin))
        self.weight = ops.gaussian((cin, num_classes), rng=rng, std=std, dtype=dtype)
        self.bias = track(np.zeros(num_classes, dtype=dtype))
        self.cached_pooled = None
        self._in_shape = None

    def params(self):
        return {"weight": self.weight, "bias": self.bias}

    def forward(self, x):
        ops.check_tensor(x, "x")
        bs, c, h, w = x.shape
        if c != self.cin:
            raise ShapeError(f"expected {self.cin} channels, got {c}")
        if bs % self.group_size:
            raise ShapeError(f"batch {bs} not divisible by group_size {self.group_size}")
        true_bs = bs // self.group_size
        pooled = x.mean(axis=(2, 3)).reshape(true_bs, self.group_size, c).mean(axis=1)
        self.cached_pooled = track(np.ascontiguousarray(pooled))
        self._in_shape = x.shape
        return track(pooled @ self.weight + self.bias)

    def backward(self, grad_logits):
        if self.cached_pooled is None:
            raise StateError("head backward needs the pooled features from forward")
        bs, c, h, w = self._in_shape
        true_bs = bs // self.group_size
        if grad_logits.shape != (true_bs, self.num_classes):
            raise ShapeError(
                f"grad_logits {grad_logits.shape} != ({true_bs}, {self.num_classes})"
            )
        gw = track(self.cached_pooled.T @ grad_logits)
        gb = track(grad_logits.sum(axis=0))
        gp = grad_logits @ self.weight.T / (self.group_size * h * w)
        gx = np.broadcast_to(
            gp[:, None, :, None, None], (true_bs, self.group_size, c, h, w)
        ).reshape(bs, c, h, w)
        return track(np.ascontiguousarray(gx)), {"weight": gw, "bias": gb}
