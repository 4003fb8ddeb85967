# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused update kernels; see ``_pykernels`` for the reference."""

from libc.math cimport exp, fabs, sqrt

import numpy as np

NAME = "cython"


def sgd_step(double[::1] w, const double[::1] grad, double step):
    cdef Py_ssize_t i, n = w.shape[0]
    with nogil:
        for i in range(n):
            w[i] = w[i] - step * grad[i]


def asofed_step(double[::1] w, const double[::1] w_server, const double[::1] grad_f,
                const double[::1] grad_s_prev, const double[::1] h_pre,
                double lam, double step, double[::1] grad_s_out):
    cdef Py_ssize_t i, n = w.shape[0]
    cdef double g, z
    with nogil:
        for i in range(n):
            g = lam * (w[i] - w_server[i])
            g = g + grad_f[i]
            grad_s_out[i] = g
            z = (g - grad_s_prev[i]) + h_pre[i]
            w[i] = w[i] - z * step


def ema_update(double[::1] h, const double[::1] v, double beta):
    cdef Py_ssize_t i, n = h.shape[0]
    cdef double keep = 1.0 - beta
    with nogil:
        for i in range(n):
            h[i] = h[i] * beta + keep * v[i]


def async_merge(double[::1] w, const double[::1] w_sent, const double[::1] w_new, double frac):
    cdef Py_ssize_t i, n = w.shape[0]
    with nogil:
        for i in range(n):
            w[i] = w[i] - (w_sent[i] - w_new[i]) * frac


def mix(double[::1] w, const double[::1] w_new, double alpha):
    cdef Py_ssize_t i, n = w.shape[0]
    cdef double keep = 1.0 - alpha
    with nogil:
        for i in range(n):
            w[i] = w[i] * keep + alpha * w_new[i]


def reweight(double[:, ::1] mat, int axis, int scale):
    cdef Py_ssize_t nr = mat.shape[0], nc = mat.shape[1]
    cdef Py_ssize_t outer = nr if axis == 1 else nc
    cdef Py_ssize_t inner = nc if axis == 1 else nr
    cdef Py_ssize_t o, k, rs, cs
    cdef double m, s, a, x, before, after, f
    cdef double *p = &mat[0, 0]
    # exponentials of the current slice, computed once
    cdef double[::1] e = np.empty(inner)
    # element (o, k) of the slice lives at p[o * rs + k * cs]
    if axis == 1:
        rs, cs = nc, 1
    else:
        rs, cs = 1, nc
    with nogil:
        for o in range(outer):
            m = 0.0
            for k in range(inner):
                a = fabs(p[o * rs + k * cs])
                if a > m:
                    m = a
            s = 0.0
            for k in range(inner):
                e[k] = exp(fabs(p[o * rs + k * cs]) - m)
                s = s + e[k]
            s = 1.0 / s
            if scale == 1:
                s = s * inner
            before = 0.0
            after = 0.0
            for k in range(inner):
                x = p[o * rs + k * cs]
                before = before + x * x
                x = x * (e[k] * s)
                after = after + x * x
                p[o * rs + k * cs] = x
            if scale == 2 and after > 0.0:
                f = sqrt(before) / sqrt(after)
                for k in range(inner):
                    p[o * rs + k * cs] = p[o * rs + k * cs] * f
