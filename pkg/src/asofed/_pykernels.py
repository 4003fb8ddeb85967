"""Pure-numpy versions of the fused update kernels.

Every function works in place on flat, C-contiguous float64 arrays and
performs its arithmetic in the same order as the compiled twin in
``_ckernels.pyx`` so the two backends agree bit for bit (the softmax
reductions excepted, where summation order differs).
"""

import numpy as np

NAME = "python"


def sgd_step(w, grad, step):
    w -= step * grad


def asofed_step(w, w_server, grad_f, grad_s_prev, h_pre, lam, step, grad_s_out):
    np.subtract(w, w_server, out=grad_s_out)
    grad_s_out *= lam
    grad_s_out += grad_f
    zeta = grad_s_out - grad_s_prev
    zeta += h_pre
    zeta *= step
    w -= zeta


def ema_update(h, v, beta):
    h *= beta
    h += (1.0 - beta) * v


def async_merge(w, w_sent, w_new, frac):
    delta = w_sent - w_new
    delta *= frac
    w -= delta


def mix(w, w_new, alpha):
    w *= 1.0 - alpha
    w += alpha * w_new


def reweight(mat, axis, scale):
    """``scale``: 0 plain coefficients, 1 times the normalized length,
    2 restore each slice's L2 norm."""
    a = np.abs(mat)
    a -= a.max(axis=axis, keepdims=True)
    np.exp(a, out=a)
    a /= a.sum(axis=axis, keepdims=True)
    if scale == 1:
        a *= mat.shape[axis]
    if scale == 2:
        before = np.sqrt((mat * mat).sum(axis=axis, keepdims=True))
        mat *= a
        after = np.sqrt((mat * mat).sum(axis=axis, keepdims=True))
        np.divide(before, after, out=after, where=after > 0)
        mat *= after
        return
    mat *= a
