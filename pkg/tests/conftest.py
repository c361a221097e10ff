"""Shared reference implementations (oracles) for the test suite.

These are deliberately naive: nested loops and direct formulas, kept
independent of the production kernels they verify.
"""

import numpy as np
import pytest


def same_pad(extent, k, stride):
    out = -(-extent // stride)
    total = max((out - 1) * stride + k - extent, 0)
    return out, total // 2


def conv3d_loops(x, kernel, bias=None, stride=1):
    """Direct six-nested-loop 3D convolution, zero-padded SAME."""
    n, w, h, d, cin = x.shape
    k = kernel.shape[0]
    cout = kernel.shape[4]
    ow, pw = same_pad(w, k, stride)
    oh, ph = same_pad(h, k, stride)
    od, pd = same_pad(d, k, stride)
    out = np.zeros((n, ow, oh, od, cout), dtype=x.dtype)
    for b in range(n):
        for i in range(ow):
            for j in range(oh):
                for l in range(od):
                    for co in range(cout):
                        acc = 0.0
                        for ki in range(k):
                            for kj in range(k):
                                for kl in range(k):
                                    xi = i * stride - pw + ki
                                    xj = j * stride - ph + kj
                                    xl = l * stride - pd + kl
                                    if 0 <= xi < w and 0 <= xj < h and 0 <= xl < d:
                                        for ci in range(cin):
                                            acc += x[b, xi, xj, xl, ci] * kernel[ki, kj, kl, ci, co]
                        out[b, i, j, l, co] = acc + (bias[co] if bias is not None else 0.0)
    return out


def conv2d_loops(x, kernel, bias=None, stride=1):
    """Direct nested-loop 2D convolution, zero-padded SAME."""
    n, w, h, cin = x.shape
    k = kernel.shape[0]
    cout = kernel.shape[3]
    ow, pw = same_pad(w, k, stride)
    oh, ph = same_pad(h, k, stride)
    out = np.zeros((n, ow, oh, cout), dtype=x.dtype)
    for b in range(n):
        for i in range(ow):
            for j in range(oh):
                for co in range(cout):
                    acc = 0.0
                    for ki in range(k):
                        for kj in range(k):
                            xi = i * stride - pw + ki
                            xj = j * stride - ph + kj
                            if 0 <= xi < w and 0 <= xj < h:
                                for ci in range(cin):
                                    acc += x[b, xi, xj, ci] * kernel[ki, kj, ci, co]
                    out[b, i, j, co] = acc + (bias[co] if bias is not None else 0.0)
    return out


def downsample_loops(data, target):
    """Nested-loop block-average pooling."""
    fx, fy, fz = (s // t for s, t in zip(data.shape, target))
    out = np.zeros(target, dtype=np.float64)
    for i in range(target[0]):
        for j in range(target[1]):
            for l in range(target[2]):
                block = data[i * fx:(i + 1) * fx, j * fy:(j + 1) * fy, l * fz:(l + 1) * fz]
                out[i, j, l] = block.astype(np.float64).mean()
    return out


def surfaces_loops(data):
    """Per-pixel loop MIP and first-argmax depth."""
    w, h, d = data.shape
    mip = np.zeros((w, h), dtype=data.dtype)
    depth = np.zeros((w, h), dtype=np.float64)
    for i in range(w):
        for j in range(h):
            col = data[i, j, :]
            best = 0
            for l in range(d):
                if col[l] > col[best]:
                    best = l
            mip[i, j] = col[best]
            depth[i, j] = best / max(d - 1, 1)
    return mip, depth


def quartiles_sorted(values):
    """Sort-based five-number summary with linear interpolation."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)

    def at(q):
        pos = q * (n - 1)
        lo = int(np.floor(pos))
        hi = min(lo + 1, n - 1)
        frac = pos - lo
        return v[lo] + frac * (v[hi] - v[lo])

    return {"min": at(0.0), "q1": at(0.25), "median": at(0.5), "q3": at(0.75), "max": at(1.0)}


def simple_regression_r2(x, y):
    """Closed-form R-squared of regressing y on x (equals corr^2)."""
    x = np.asarray(x, np.float64)
    y = np.asarray(y, np.float64)
    xc = x - x.mean()
    yc = y - y.mean()
    return float((xc * yc).sum() ** 2 / ((xc * xc).sum() * (yc * yc).sum()))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
