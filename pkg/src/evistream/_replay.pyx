# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled evidence-replay kernels; see ``_replay_py`` for the reference."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()


def confidence_weights(double[:, ::1] logits):
    cdef Py_ssize_t n = logits.shape[0], c = logits.shape[1], i, j
    cdef double mx, z, h, p
    cdef double lnc = log(<double>c)
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] w = out
    for i in range(n):
        mx = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > mx:
                mx = logits[i, j]
        z = 0.0
        for j in range(c):
            z += exp(logits[i, j] - mx)
        h = 0.0
        for j in range(c):
            p = exp(logits[i, j] - mx) / z
            if p > 0.0:
                h -= p * log(p)
        w[i] = 1.0 - h / lnc
        if w[i] < 0.0:
            w[i] = 0.0
    return out


def replay(double[:, ::1] evidence, double[::1] weights, double[::1] thresholds):
    cdef Py_ssize_t n = evidence.shape[0], c = evidence.shape[1], k = thresholds.shape[0]
    cdef Py_ssize_t t, j, q
    cdef double mx
    steps_arr = np.full(k, n, dtype=np.int64)
    halted_arr = np.zeros(k, dtype=np.uint8)
    decided_arr = np.zeros((k, c), dtype=np.float64)
    acc_arr = np.zeros(c, dtype=np.float64)
    cdef cnp.int64_t[::1] steps = steps_arr
    cdef cnp.uint8_t[::1] halted = halted_arr
    cdef double[:, ::1] decided = decided_arr
    cdef double[::1] acc = acc_arr
    cdef Py_ssize_t remaining = k
    for t in range(n):
        for j in range(c):
            acc[j] += weights[t] * evidence[t, j]
        mx = acc[0]
        for j in range(1, c):
            if acc[j] > mx:
                mx = acc[j]
        for q in range(k):
            if not halted[q] and mx >= thresholds[q]:
                halted[q] = 1
                steps[q] = t + 1
                for j in range(c):
                    decided[q, j] = acc[j]
                remaining -= 1
        if remaining == 0:
            break
    for q in range(k):
        if not halted[q]:
            for j in range(c):
                decided[q, j] = acc[j]
    return steps_arr, halted_arr, decided_arr
