"""Pure-numpy fallback for the hot kernels.

Same call signatures as the compiled module.  All 2-D arguments are
C-contiguous with the mixed axis last; float32 and float64 are supported
and preserved.  Reductions use numpy's fixed order, so repeat runs on one
machine are bit-identical.
"""

import numpy as np
from scipy.special import erf

NAME = "numpy"

_INV_SQRT2 = float(1.0 / np.sqrt(2.0))
_INV_SQRT2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def linear_fwd(x, w):
    # x: (rows, k_in), w: (k_out, k_in) -> (rows, k_out)
    return x @ w.T


def linear_bwd_x(gy, w):
    return gy @ w


def linear_bwd_w(gy, x):
    return gy.T @ x


def layer_norm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * invstd
    y = xhat * gamma + beta
    return y, xhat, np.ascontiguousarray(invstd[:, 0])


def layer_norm_bwd(gy, xhat, invstd, gamma):
    gyg = gy * gamma
    s1 = gyg.mean(axis=1, keepdims=True)
    s2 = (gyg * xhat).mean(axis=1, keepdims=True)
    gx = (gyg - s1 - xhat * s2) * invstd[:, None]
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    return gx, ggamma, gbeta


def gelu_fwd(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(gy, x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return gy * (cdf + x * pdf)


def sigmoid_fwd(x):
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y


def sigmoid_bwd(gy, y):
    return gy * y * (1.0 - y)


def relu_fwd(x):
    return np.maximum(x, 0)


def relu_bwd(gy, x):
    return gy * (x > 0)
