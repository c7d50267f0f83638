"""Independent reference implementations used as test oracles.

These are written for clarity, not speed: direct nested loops and central
finite differences. Product code must never import from here.
"""

import numpy as np


def loop_conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Direct 6-nested-loop cross-correlation, (bs,cin,h,w) x (cout,cin,kh,kw)."""
    bs, cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((bs, cout, oh, ow), dtype=x.dtype)
    for b in range(bs):
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += xp[b, ci, oy * stride + ky, ox * stride + kx] * kernel[co, ci, ky, kx]
                    out[b, co, oy, ox] = acc + (bias[co] if bias is not None else 0.0)
    return out


def fd_grad(f, x, h=1e-6):
    """Central finite-difference gradient of scalar f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(b.ravel())
    if denom == 0:
        return np.linalg.norm(a.ravel())
    return np.linalg.norm((a - b).ravel()) / denom
