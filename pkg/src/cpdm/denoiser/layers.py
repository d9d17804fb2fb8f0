"""Forward/backward pairs for the small fixed operator set of the networks.

All activations are channels-last ``(N, H, W, C)``. Every ``*_forward``
returns ``(out, cache)`` and the matching ``*_backward`` takes
``(cache, dout)``. Computation follows the dtype of the inputs, so the same
code serves float32 training and float64 gradient checks.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _im2col(x, k):
    """``(N, H, W, C)`` -> ``(N, H, W, k*k*C)`` with column order (di, dj, c)."""
    if k == 1:
        return x
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
    return np.ascontiguousarray(win).reshape(x.shape[:3] + (k * k * x.shape[3],))


def conv2d_forward(x, w, b):
    """Stride-1 'same' convolution. ``w`` has shape ``(k, k, C_in, C_out)``, k odd."""
    k, _, c, co = w.shape
    cols = _im2col(x, k)
    out = cols.reshape(-1, k * k * c) @ w.reshape(k * k * c, co)
    out += b
    return out.reshape(x.shape[:3] + (co,)), (cols, w)


def conv2d_backward(cache, dout):
    cols, w = cache
    k, _, c, co = w.shape
    d2 = dout.reshape(-1, co)
    dw = (cols.reshape(-1, k * k * c).T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    # input gradient = 'same' convolution of dout with the flipped kernel
    wf = w[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * co, c)
    dx = (_im2col(dout, k).reshape(-1, k * k * co) @ wf).reshape(dout.shape[:3] + (c,))
    return dx, dw, db


def _group_sum(x, groups):
    """Sum ``(N, H, W, C)`` over space and within channel groups -> ``(N, G)``."""
    n, c = x.shape[0], x.shape[-1]
    return x.reshape(n, -1, c).sum(axis=1).reshape(n, groups, c // groups).sum(axis=2)


def _expand(stat, c):
    """``(N, G)`` -> ``(N, 1, 1, C)`` by repeating each group value."""
    n, g = stat.shape
    return np.repeat(stat, c // g, axis=1).reshape(n, 1, 1, c)


def groupnorm_forward(x, gamma, beta, groups, eps=1e-5):
    n, h, w, c = x.shape
    count = h * w * (c // groups)
    mean = _expand(_group_sum(x, groups) / count, c)
    xc = x - mean
    var = _group_sum(xc * xc, groups) / count
    inv = _expand(1.0 / np.sqrt(var + eps), c).astype(x.dtype)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma, groups)


def groupnorm_backward(cache, dout):
    xhat, inv, gamma, groups = cache
    n, h, w, c = xhat.shape
    d2 = dout.reshape(-1, c)
    dgamma = (d2 * xhat.reshape(-1, c)).sum(axis=0)
    dbeta = d2.sum(axis=0)
    count = h * w * (c // groups)
    dxh = dout * gamma
    s1 = _expand(_group_sum(dxh, groups), c)
    s2 = _expand(_group_sum(dxh * xhat, groups), c)
    dx = (inv / count) * (count * dxh - s1 - xhat * s2)
    return dx, dgamma, dbeta


def _sigmoid(x):
    # tanh form: overflow-free and faster than exp-based variants
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def silu_forward(x):
    sig = _sigmoid(x)
    return x * sig, (x, sig)


def silu_backward(cache, dout):
    x, sig = cache
    return dout * sig * (1.0 + x * (1.0 - sig))


def sigmoid_forward(x):
    y = _sigmoid(x)
    return y, y


def sigmoid_backward(cache, dout):
    y = cache
    return dout * y * (1.0 - y)


def linear_forward(x, w, b):
    """``x`` is ``(N, D_in)``, ``w`` is ``(D_in, D_out)``."""
    return x @ w + b, (x, w)


def linear_backward(cache, dout):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def film_forward(h, scale, shift):
    """Per-sample, per-channel modulation ``h * (1 + scale) + shift``.

    ``scale`` and ``shift`` have shape ``(N, C)``.
    """
    s = scale[:, None, None, :]
    return h * (1.0 + s) + shift[:, None, None, :], (h, s)


def film_backward(cache, dout):
    h, s = cache
    dh = dout * (1.0 + s)
    dscale = (dout * h).sum(axis=(1, 2))
    dshift = dout.sum(axis=(1, 2))
    return dh, dscale, dshift


def time_embedding(t, T, dim=32):
    """Sinusoidal features of ``t / T`` at geometric frequencies 1 .. 1000.

    The lowest frequency keeps ``sin(t/T)`` monotone on (0, 1], which makes
    the embedding injective in ``t``.
    """
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.geomspace(1.0, 1000.0, half) if half > 1 else np.ones(1)
    ang = (t / T)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
