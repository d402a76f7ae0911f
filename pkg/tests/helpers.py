"""Shared oracles and checks for the test suite."""

import math

import numpy as np

from normalscreen import autodiff as ad
from normalscreen.autodiff import Tensor

GRAD_TOL = 1e-4


def check_gradients(fn, inputs, h=1e-5, tol=GRAD_TOL, seed=0):
    """Compare backprop against central differences for every array in ``inputs``.

    The output is reduced with fixed random weights so every output element
    contributes a distinct amount to the scalar. Returns the worst relative error.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]
    params = [ad.parameter(a) for a in inputs]
    out = fn(params)
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    ad.backward(ad.sum_all(ad.mul(out, Tensor(weights))))

    def scalar():
        return float(np.sum(fn([Tensor(a) for a in inputs]).data * weights))

    worst = 0.0
    for p, a in zip(params, inputs):
        num = ad.numerical_gradient(scalar, a, h)
        err = ad.relative_error(p.grad_or_zeros(), num)
        assert err < tol, f"gradient mismatch {err:.3g} for input of shape {a.shape}"
        worst = max(worst, err)
    return worst


def conv2d_oracle(x, k, b, stride=1, dilation=1, padding="same"):
    """Sliding-window cross-correlation with explicit loops."""
    n, c, hgt, wid = x.shape
    f, _, kh, kw = k.shape
    eh, ew = (kh - 1) * dilation + 1, (kw - 1) * dilation + 1
    if padding == "same":
        oh, ow = math.ceil(hgt / stride), math.ceil(wid / stride)
        th = max((oh - 1) * stride + eh - hgt, 0)
        tw = max((ow - 1) * stride + ew - wid, 0)
        top, left = th // 2, tw // 2
    else:
        oh, ow = (hgt - eh) // stride + 1, (wid - ew) // stride + 1
        top = left = 0
    out = np.zeros((n, f, oh, ow))
    for ni in range(n):
        for fi in range(f):
            for i in range(oh):
                for j in range(ow):
                    acc = b[fi]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride + u * dilation - top
                                s = j * stride + v * dilation - left
                                if 0 <= r < hgt and 0 <= s < wid:
                                    acc += x[ni, ci, r, s] * k[fi, ci, u, v]
                    out[ni, fi, i, j] = acc
    return out


def zero_insert(k, dilation):
    """Expand a kernel by inserting ``dilation - 1`` zeros between taps."""
    f, c, kh, kw = k.shape
    out = np.zeros((f, c, (kh - 1) * dilation + 1, (kw - 1) * dilation + 1), dtype=k.dtype)
    out[:, :, ::dilation, ::dilation] = k
    return out


def mann_whitney_auc(scores, labels):
    """P(random positive outscores random negative), ties counting one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    pos, neg = s[y == 1], s[y == 0]
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return wins / (len(pos) * len(neg))


def adam_reference(theta, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam written straight from the update equations."""
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = grad_fn(theta)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(theta)
    return trace


def random_scores(rng, n, ties=True):
    """Score/label arrays with both classes present and, optionally, ties."""
    while True:
        y = rng.integers(0, 2, n)
        if 0 < y.sum() < n:
            break
    if ties:
        s = rng.integers(0, max(2, n // 2), n) / max(2, n // 2)
    else:
        s = rng.random(n)
    return s, y
