"""Layer primitives with hand-rolled forward and backward passes.

Layout is NHWC throughout. Every forward returns (out, cache); the matching
backward consumes the cache and the upstream gradient.
"""

import numpy as np


def conv3x3_forward(x, w, b):
    """3x3 convolution, stride 1, zero padding 1 (same size).

    x: (N, H, W, Cin), w: (3, 3, Cin, Cout), b: (Cout,).
    Computed as nine shifted matmuls to avoid materializing patch tensors.
    """
    n, h, wd, cin = x.shape
    cout = w.shape[3]
    xp = np.zeros((n, h + 2, wd + 2, cin), dtype=x.dtype)
    xp[:, 1 : h + 1, 1 : wd + 1, :] = x
    acc = np.zeros((n * h * wd, cout), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            patch = xp[:, di : di + h, dj : dj + wd, :].reshape(n * h * wd, cin)
            acc += patch @ w[di, dj]
    acc += b
    return acc.reshape(n, h, wd, cout), (xp, w)


def conv3x3_backward(dout, cache):
    xp, w = cache
    n, hp, wp, cin = xp.shape
    h, wd = hp - 2, wp - 2
    cout = w.shape[3]
    dy = dout.reshape(n * h * wd, cout)
    dw = np.empty_like(w)
    db = dout.sum(axis=(0, 1, 2))
    dxp = np.zeros_like(xp)
    for di in range(3):
        for dj in range(3):
            patch = xp[:, di : di + h, dj : dj + wd, :].reshape(n * h * wd, cin)
            dw[di, dj] = patch.T @ dy
            dxp[:, di : di + h, dj : dj + wd, :] += (dy @ w[di, dj].T).reshape(n, h, wd, cin)
    dx = dxp[:, 1 : h + 1, 1 : wd + 1, :]
    return dx, dw, db


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu_backward(dout, mask):
    return dout * mask


def maxpool2_forward(x):
    """2x2 max pooling, stride 2. Ties go to the first maximum in row-major
    window order, matching argmax semantics."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"pooling needs even spatial dims, got {h}x{w}")
    win = (
        x.reshape(n, h // 2, 2, w // 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, h // 2, w // 2, 4, c)
    )
    idx = win.argmax(axis=3)
    out = np.take_along_axis(win, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, (idx, x.shape)


def maxpool2_backward(dout, cache):
    idx, shape = cache
    n, h, w, c = shape
    dwin = np.zeros((n, h // 2, w // 2, 4, c), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[:, :, :, None, :], dout[:, :, :, None, :], axis=3)
    return (
        dwin.reshape(n, h // 2, w // 2, 2, 2, c)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(n, h, w, c)
    )


def dropout_mask(shape, p, rng, dtype):
    """Inverted-dropout mask: kept units carry 1/(1-p), dropped units 0."""
    keep = 1.0 - p
    m = (rng.random(shape) < keep).astype(dtype)
    m /= keep
    return m


def dropout_forward(x, mask):
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout * mask


def dense_forward(x, w, b):
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def softmax(logits):
    """Row-wise softmax computed in float64 via the log-sum-exp shift."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy straight from logits.

    Returns (loss, probs, dlogits). The loss and probabilities are float64;
    dlogits matches the logits dtype and already includes the 1/N factor.
    """
    z = np.asarray(logits, dtype=np.float64)
    n = z.shape[0]
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    loss = float((lse - z[np.arange(n), labels]).mean())
    probs = np.exp(z - lse[:, None])
    dz = probs.copy()
    dz[np.arange(n), labels] -= 1.0
    dz /= n
    return loss, probs, dz.astype(logits.dtype)
