"""Numpy reference implementations of the hot kernels.

Matrix products are not here on purpose: both backends hand those to BLAS via
``numpy`` directly. These kernels cover the memory-bound pieces (row softmax,
layer norm, GELU, rotary application) where the compiled backend fuses passes
that numpy spreads over temporaries. Signatures are shared with
``widecap.kernels._fast`` and all arrays are float64, C-contiguous.
"""

import numpy as np

BACKEND = "pyref"

_GELU_C = np.sqrt(2.0 / np.pi)
_GELU_A = 0.044715


def gelu_fwd(x):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    return 0.5 * x * (1.0 + np.tanh(u))


def gelu_bwd(x, gout):
    u = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return gout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def softmax_fwd(x):
    """Row softmax of a (rows, cols) matrix with max subtraction."""
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, gout):
    inner = (gout * y).sum(axis=1, keepdims=True)
    return y * (gout - inner)


def causal_softmax_fwd(x):
    """Row softmax of stacked (n, t, t) score matrices, keys limited to j <= m."""
    t = x.shape[-1]
    masked = np.where(np.tri(t, dtype=bool), x, -np.inf)
    shifted = masked - masked.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def causal_softmax_bwd(y, gout):
    inner = (gout * y).sum(axis=-1, keepdims=True)
    return y * (gout - inner)


def layernorm_fwd(x, gain, bias, eps):
    """Normalize each row of (rows, cols) to zero mean/unit variance, then affine.

    Returns (y, mean, rstd); mean and rstd are kept for the backward pass.
    """
    mean = x.mean(axis=1)
    var = ((x - mean[:, None]) ** 2).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gain + bias, mean, rstd


def layernorm_bwd(x, gain, mean, rstd, gout):
    cols = x.shape[1]
    xhat = (x - mean[:, None]) * rstd[:, None]
    gy = gout * gain
    s1 = gy.sum(axis=1, keepdims=True)
    s2 = (gy * xhat).sum(axis=1, keepdims=True)
    gx = (rstd[:, None] / cols) * (cols * gy - s1 - xhat * s2)
    ggain = (gout * xhat).sum(axis=0)
    gbias = gout.sum(axis=0)
    return gx, ggain, gbias


def rope_fwd(x, pos, theta):
    """Rotate consecutive coordinate pairs of (n, d) rows by pos[i] * theta[j].

    The backward pass is the same rotation with negated positions.
    """
    ang = pos[:, None] * theta[None, :]
    c = np.cos(ang)
    s = np.sin(ang)
    x0 = x[:, 0::2]
    x1 = x[:, 1::2]
    y = np.empty_like(x)
    y[:, 0::2] = x0 * c - x1 * s
    y[:, 1::2] = x0 * s + x1 * c
    return y
