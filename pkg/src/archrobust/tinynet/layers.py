"""Forward/backward primitives on channel-major ``(C, N, H, W)`` float64 arrays.

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the upstream gradient and the cache and returns input (and parameter)
gradients.  Nothing here keeps state between calls.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x, w, stride=1, pad=0):
    """Convolution on a channel-major ``(C, N, H, W)`` array.

    The padded batch is flattened to one row per channel, so each kernel tap
    is a contiguous row slice; outputs are computed on the padded grid and
    cropped.  Strided convolutions are evaluated densely and subsampled.
    """
    o, c, k, _ = w.shape
    _, n, h, wd = x.shape
    wm = w.reshape(o, c * k * k)
    if k == 1 and pad == 0:
        if stride != 1:
            x = x[:, :, ::stride, ::stride]
        xs = x.reshape(c, -1)
        out = (wm @ xs).reshape(o, n, x.shape[2], x.shape[3])
        return out, (xs, (c, n, h, wd), stride, pad, None)
    hp, wp = h + 2 * pad, wd + 2 * pad
    ho, wo = hp - k + 1, wp - k + 1
    flat = _pad(x, pad).reshape(c, n * hp * wp)
    span = n * hp * wp - (k - 1) * (wp + 1)
    offsets = [i * wp + j for i in range(k) for j in range(k)]
    cols = np.empty((c, k * k, span))
    for t, off in enumerate(offsets):
        cols[:, t] = flat[:, off : off + span]
    full = np.empty((o, n * hp * wp))
    full[:, :span] = wm @ cols.reshape(c * k * k, span)
    full[:, span:] = 0.0
    out = full.reshape(o, n, hp, wp)[:, :, :ho:stride, :wo:stride]
    return np.ascontiguousarray(out), (cols, (c, n, h, wd), stride, pad, offsets)


def conv2d_backward(g, w, cache, need_dx=True):
    cols, xshape, stride, pad, offsets = cache
    o, c, k, _ = w.shape
    _, n, h, wd = xshape
    if offsets is None:
        g2 = g.reshape(o, -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        if not need_dx:
            return None, gw
        gx = (w.reshape(o, c).T @ g2).reshape(c, n, g.shape[2], g.shape[3])
        if stride != 1:
            full = np.zeros(xshape)
            full[:, :, ::stride, ::stride] = gx
            gx = full
        return gx, gw
    hp, wp = h + 2 * pad, wd + 2 * pad
    ho, wo = hp - k + 1, wp - k + 1
    span = cols.shape[2]
    gfull = np.zeros((o, n, hp, wp))
    gfull[:, :, :ho:stride, :wo:stride] = g
    g2 = gfull.reshape(o, n * hp * wp)[:, :span]
    gw = (g2 @ cols.reshape(c * k * k, span).T).reshape(w.shape)
    if not need_dx:
        return None, gw
    gcols = (w.reshape(o, c * k * k).T @ g2).reshape(c, k * k, span)
    gflat = np.zeros((c, n * hp * wp))
    for t, off in enumerate(offsets):
        gflat[:, off : off + span] += gcols[:, t]
    gx = gflat.reshape(c, n, hp, wp)
    if pad:
        gx = gx[:, :, pad:-pad, pad:-pad]
    return np.ascontiguousarray(gx), gw


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(g, mask):
    return g * mask


def _box3(x):
    h, w = x.shape[2], x.shape[3]
    xp = _pad(x, 1)
    rows = xp[:, :, 0:h] + xp[:, :, 1 : h + 1] + xp[:, :, 2 : h + 2]
    return rows[:, :, :, 0:w] + rows[:, :, :, 1 : w + 1] + rows[:, :, :, 2 : w + 2]


@lru_cache(maxsize=32)
def _pool_counts(h, w):
    ones = np.ones((1, 1, h, w))
    counts = _box3(ones)
    counts.flags.writeable = False
    return counts


def avgpool3_forward(x):
    """3x3 average pooling, stride 1, padding 1, padded cells not counted."""
    counts = _pool_counts(x.shape[2], x.shape[3])
    return _box3(x) / counts, counts


def avgpool3_backward(g, counts):
    return _box3(g / counts)


def avgpool2_forward(x):
    c, n, h, w = x.shape
    return x.reshape(c, n, h // 2, 2, w // 2, 2).mean(axis=(3, 5)), None


def avgpool2_backward(g, _cache=None):
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25


def gap_forward(x):
    """Global average pool to an ``(N, C)`` feature matrix."""
    return x.mean(axis=(2, 3)).T, x.shape


def gap_backward(g, shape):
    c, n, h, w = shape
    return np.broadcast_to(g.T[:, :, None, None] / (h * w), shape).copy()


def linear_forward(x, w, b):
    return x @ w.T + b, x


def linear_backward(g, w, x):
    return g @ w, g.T @ x, g.sum(axis=0)


def batchnorm_forward(x, gamma, beta, running, train, momentum=0.1, eps=1e-5):
    """Per-channel batch normalisation.

    ``running`` is a ``(mean, var)`` pair used in eval mode; in train mode the
    batch statistics are used and the updated running pair is returned in the
    cache for the caller to commit.
    """
    if train:
        mu = x.mean(axis=(1, 2, 3))
        var = x.var(axis=(1, 2, 3))
    else:
        mu, var = running
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu[:, None, None, None]) * inv[:, None, None, None]
    out = gamma[:, None, None, None] * xhat + beta[:, None, None, None]
    new_running = None
    if train:
        m = x.shape[1] * x.shape[2] * x.shape[3]
        unbiased = var * m / max(m - 1, 1)
        new_running = ((1 - momentum) * running[0] + momentum * mu, (1 - momentum) * running[1] + momentum * unbiased)
    return out, (xhat, inv, gamma, train, new_running)


def batchnorm_backward(g, cache):
    xhat, inv, gamma, train, _ = cache
    axes = (1, 2, 3)
    ggamma = (g * xhat).sum(axis=axes)
    gbeta = g.sum(axis=axes)
    gxhat = g * gamma[:, None, None, None]
    if not train:
        return gxhat * inv[:, None, None, None], ggamma, gbeta
    m = g.shape[1] * g.shape[2] * g.shape[3]
    s1 = gxhat.sum(axis=axes)[:, None, None, None]
    s2 = (gxhat * xhat).sum(axis=axes)[:, None, None, None]
    gx = inv[:, None, None, None] / m * (m * gxhat - s1 - xhat * s2)
    return gx, ggamma, gbeta


def log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def cross_entropy(z, y):
    """Per-example CE losses and d(sum of losses)/dz."""
    logp = log_softmax(z)
    n = z.shape[0]
    losses = -logp[np.arange(n), y]
    g = np.exp(logp)
    g[np.arange(n), y] -= 1.0
    return losses, g
