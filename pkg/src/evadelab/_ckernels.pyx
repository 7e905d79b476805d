# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Pure-numpy twins live in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from libc.stdlib cimport malloc, free, qsort

cnp.import_array()


cdef inline Py_ssize_t _reflect(Py_ssize_t i, Py_ssize_t n) nogil:
    # half-sample symmetric extension: (c b a | a b c | c b a)
    while i < 0 or i >= n:
        if i < 0:
            i = -i - 1
        if i >= n:
            i = 2 * n - i - 1
    return i


cdef int _cmp_double(const void* a, const void* b) noexcept nogil:
    cdef double x = (<double*>a)[0]
    cdef double y = (<double*>b)[0]
    return (x > y) - (x < y)


cdef inline void _sort(double* buf, Py_ssize_t n) nogil:
    cdef Py_ssize_t i, j
    cdef double v
    if n > 32:
        qsort(buf, n, sizeof(double), _cmp_double)
        return
    for i in range(1, n):
        v = buf[i]
        j = i - 1
        while j >= 0 and buf[j] > v:
            buf[j + 1] = buf[j]
            j -= 1
        buf[j + 1] = v


cdef inline void _cswap(double* a, double* b) noexcept nogil:
    cdef double t
    if a[0] > b[0]:
        t = a[0]
        a[0] = b[0]
        b[0] = t


cdef inline double _median9(double* p) noexcept nogil:
    # fixed 19-exchange selection network
    _cswap(&p[1], &p[2]); _cswap(&p[4], &p[5]); _cswap(&p[7], &p[8])
    _cswap(&p[0], &p[1]); _cswap(&p[3], &p[4]); _cswap(&p[6], &p[7])
    _cswap(&p[1], &p[2]); _cswap(&p[4], &p[5]); _cswap(&p[7], &p[8])
    _cswap(&p[0], &p[3]); _cswap(&p[5], &p[8]); _cswap(&p[4], &p[7])
    _cswap(&p[3], &p[6]); _cswap(&p[1], &p[4]); _cswap(&p[2], &p[5])
    _cswap(&p[4], &p[7]); _cswap(&p[4], &p[2]); _cswap(&p[6], &p[4])
    _cswap(&p[4], &p[2])
    return p[4]


def median_filter(const double[:, :, :, ::1] x, int kh, int kw):
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t n, i, j, c, di, dj, m
    cdef Py_ssize_t oh = kh // 2, ow = kw // 2
    cdef Py_ssize_t size = kh * kw
    out_arr = np.empty((N, H, W, C), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    # one symmetric pad up front keeps the inner loop free of index reflection
    cdef double[:, :, :, ::1] xp = np.ascontiguousarray(
        np.pad(np.asarray(x), ((0, 0), (oh, kh - 1 - oh), (ow, kw - 1 - ow), (0, 0)), mode="symmetric"))
    cdef double* buf = <double*>malloc(size * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    try:
        with nogil:
            for n in range(N):
                for i in range(H):
                    for j in range(W):
                        for c in range(C):
                            m = 0
                            for di in range(kh):
                                for dj in range(kw):
                                    buf[m] = xp[n, i + di, j + dj, c]
                                    m += 1
                            if size == 9:
                                out[n, i, j, c] = _median9(buf)
                                continue
                            _sort(buf, size)
                            if size % 2 == 1:
                                out[n, i, j, c] = buf[size // 2]
                            else:
                                out[n, i, j, c] = 0.5 * (buf[size // 2 - 1] + buf[size // 2])
    finally:
        free(buf)
    return out_arr


def nl_means(const double[:, :, :, ::1] x, int a, int b, double c):
    cdef Py_ssize_t N = x.shape[0], H = x.shape[1], W = x.shape[2], C = x.shape[3]
    cdef Py_ssize_t ha = a // 2, hb = b // 2
    cdef Py_ssize_t ns = a * a
    cdef Py_ssize_t n, i, j, si, sj, s, u, v, ch, pi, pj, qi, qj, ri, rj
    cdef double d, diff, total, inv_c2 = 1.0 / (c * c)
    cdef double scale = 255.0 * 255.0 / (b * b * C)
    out_arr = np.zeros((N, H, W, C), dtype=np.float64)
    wn_arr = np.empty((H, W, ns), dtype=np.float64)
    cnt_arr = np.zeros((H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, :, ::1] wn = wn_arr
    cdef double[:, ::1] cnt = cnt_arr

    for ri in range(H):
        for rj in range(W):
            for u in range(b):
                for v in range(b):
                    pi = ri - (u - hb)
                    pj = rj - (v - hb)
                    if 0 <= pi < H and 0 <= pj < W:
                        cnt[ri, rj] += 1.0

    with nogil:
        for n in range(N):
            # normalized weights per (patch centre, search offset)
            for i in range(H):
                for j in range(W):
                    total = 0.0
                    for si in range(a):
                        for sj in range(a):
                            s = si * a + sj
                            d = 0.0
                            for u in range(b):
                                for v in range(b):
                                    pi = _reflect(i + u - hb, H)
                                    pj = _reflect(j + v - hb, W)
                                    qi = _reflect(i + si - ha + u - hb, H)
                                    qj = _reflect(j + sj - ha + v - hb, W)
                                    for ch in range(C):
                                        diff = x[n, pi, pj, ch] - x[n, qi, qj, ch]
                                        d += diff * diff
                            wn[i, j, s] = exp(-d * scale * inv_c2)
                            total += wn[i, j, s]
                    for s in range(ns):
                        wn[i, j, s] /= total
            # each pixel averages the estimates of every patch covering it
            for ri in range(H):
                for rj in range(W):
                    for u in range(b):
                        for v in range(b):
                            pi = ri - (u - hb)
                            pj = rj - (v - hb)
                            if pi < 0 or pi >= H or pj < 0 or pj >= W:
                                continue
                            for si in range(a):
                                for sj in range(a):
                                    s = si * a + sj
                                    qi = _reflect(ri + si - ha, H)
                                    qj = _reflect(rj + sj - ha, W)
                                    for ch in range(C):
                                        out[n, ri, rj, ch] += wn[pi, pj, s] * x[n, qi, qj, ch]
                    for ch in range(C):
                        out[n, ri, rj, ch] /= cnt[ri, rj]
    return out_arr


def saliency_pair(const double[::1] alpha, const double[::1] beta, const cnp.uint8_t[::1] domain, bint increase):
    """Best feature pair ``(p, q)``, ``p < q``, by the JSMA saliency rule; ``(-1, -1)`` if none."""
    cdef Py_ssize_t n = alpha.shape[0]
    cdef Py_ssize_t p, q, bp = -1, bq = -1
    cdef double sa, sb, score, best = -1.0
    cdef double sign = 1.0 if increase else -1.0
    with nogil:
        for p in range(n):
            if not domain[p]:
                continue
            for q in range(p + 1, n):
                if not domain[q]:
                    continue
                sa = sign * (alpha[p] + alpha[q])
                sb = sign * (beta[p] + beta[q])
                if sa > 0.0 and sb < 0.0:
                    score = -sa * sb
                    if score > best:
                        best = score
                        bp = p
                        bq = q
    return bp, bq
