# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; semantics mirror ``_kernels_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def window_similarity(windows):
    cdef double[:, :, ::1] w = np.ascontiguousarray(windows, dtype=np.float64)
    cdef Py_ssize_t k_count = w.shape[0], n = w.shape[1], h = w.shape[2]
    out_arr = np.eye(n)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] sq = np.empty(n)
    cdef Py_ssize_t k, i, j, s
    cdef double d, dist, dot, norm, cos, acc, a, b
    if k_count == 0:
        return out_arr
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = 0.0
    for k in range(k_count):
        for i in range(n):
            acc = 0.0
            for s in range(h):
                acc += w[k, i, s] * w[k, i, s]
            sq[i] = acc
        for i in range(n):
            for j in range(i + 1, n):
                dist = 0.0
                dot = 0.0
                for s in range(h):
                    a = w[k, i, s]
                    b = w[k, j, s]
                    d = a - b
                    dist += d * d
                    dot += a * b
                dist = sqrt(dist)
                if sq[i] == 0.0 and sq[j] == 0.0:
                    cos = 1.0
                elif sq[i] == 0.0 or sq[j] == 0.0:
                    cos = 0.0
                else:
                    norm = sqrt(sq[i] * sq[j])
                    cos = dot / norm
                    if cos > 1.0:
                        cos = 1.0
                    elif cos < -1.0:
                        cos = -1.0
                out[i, j] += 0.5 / (1.0 + dist) + 0.25 * (cos + 1.0)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] /= k_count
            out[j, i] = out[i, j]
    return out_arr


def variation_stats(values, mask, cal_dow, cal_slot, weather, cell_t, cell_dow, cell_slot,
                    cell_weather, limit, pi_q):
    cdef double[:, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef cnp.uint8_t[:, ::1] mk = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef long long[::1] cdow = np.ascontiguousarray(cal_dow, dtype=np.int64)
    cdef long long[::1] cslot = np.ascontiguousarray(cal_slot, dtype=np.int64)
    cdef long long[:, ::1] wt = np.ascontiguousarray(weather, dtype=np.int64)
    cdef long long[::1] ct = np.ascontiguousarray(cell_t, dtype=np.int64)
    cdef long long[::1] cd = np.ascontiguousarray(cell_dow, dtype=np.int64)
    cdef long long[::1] cs = np.ascontiguousarray(cell_slot, dtype=np.int64)
    cdef long long[:, ::1] cw = np.ascontiguousarray(cell_weather, dtype=np.int64)
    cdef long long[::1] lim = np.ascontiguousarray(limit, dtype=np.int64)
    cdef Py_ssize_t n = v.shape[0], m_count = ct.shape[0]
    cdef long long cap = pi_q
    std_arr = np.zeros((n, m_count))
    count_arr = np.zeros((n, m_count), dtype=np.int64)
    cdef double[:, ::1] std = std_arr
    cdef long long[:, ::1] count = count_arr
    cdef double buf[1024]
    cdef Py_ssize_t m, i, c, got
    cdef long long tq, stop
    cdef double mean, var, x
    if cap > 1024:
        raise ValueError("pi_q above 1024 is not supported by the compiled kernel")
    for m in range(m_count):
        stop = ct[m] if ct[m] < lim[m] else lim[m]
        for i in range(n):
            got = 0
            tq = stop - 1
            while tq >= 0 and got < cap:
                if cdow[tq] == cd[m] and cslot[tq] == cs[m] and mk[i, tq] and wt[i, tq] == cw[i, m]:
                    buf[got] = v[i, tq]
                    got += 1
                tq -= 1
            count[i, m] = got
            if got > 1:
                mean = 0.0
                for c in range(got):
                    mean += buf[c]
                mean /= got
                var = 0.0
                for c in range(got):
                    x = buf[c] - mean
                    var += x * x
                std[i, m] = sqrt(var / got)
    return std_arr, count_arr
