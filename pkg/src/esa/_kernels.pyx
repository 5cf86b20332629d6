# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels; see `_kernels_py` for the reference versions."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()

ctypedef cnp.int64_t i64


def segment_offsets(indptr):
    cdef i64[::1] ptr = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef Py_ssize_t nseg = ptr.shape[0] - 1
    cdef i64 base = ptr[0]
    out_arr = np.empty(ptr[nseg] - base, dtype=np.int64)
    cdef i64[::1] out = out_arr
    cdef Py_ssize_t s, k
    for s in range(nseg):
        for k in range(ptr[s], ptr[s + 1]):
            out[k - base] = k - ptr[s]
    return out_arr


def edge_adjacency_coo(src, trg, Py_ssize_t num_nodes):
    cdef i64[::1] s = np.ascontiguousarray(src, dtype=np.int64)
    cdef i64[::1] t = np.ascontiguousarray(trg, dtype=np.int64)
    cdef Py_ssize_t n_e = s.shape[0]
    cdef Py_ssize_t p, q, k, n, a, m, cnt, total

    # node -> incident edges (CSR), edges listed once per distinct endpoint
    deg_arr = np.zeros(num_nodes + 1, dtype=np.int64)
    cdef i64[::1] deg = deg_arr
    for p in range(n_e):
        deg[s[p] + 1] += 1
        if t[p] != s[p]:
            deg[t[p] + 1] += 1
    for n in range(num_nodes):
        deg[n + 1] += deg[n]
    fill_arr = deg_arr[:-1].copy()
    cdef i64[::1] fill = fill_arr
    inc_arr = np.empty(deg[num_nodes], dtype=np.int64)
    cdef i64[::1] inc = inc_arr
    for p in range(n_e):
        inc[fill[s[p]]] = p
        fill[s[p]] += 1
        if t[p] != s[p]:
            inc[fill[t[p]]] = p
            fill[t[p]] += 1

    # exact row sizes with a stamp array, then fill
    stamp_arr = np.full(n_e, -1, dtype=np.int64)
    cdef i64[::1] stamp = stamp_arr
    rowlen_arr = np.zeros(n_e, dtype=np.int64)
    cdef i64[::1] rowlen = rowlen_arr
    cdef i64 ends[2]
    total = 0
    for p in range(n_e):
        ends[0] = s[p]
        ends[1] = t[p]
        cnt = 0
        for a in range(2):
            n = ends[a]
            for k in range(deg[n], deg[n + 1]):
                q = inc[k]
                if stamp[q] != p:
                    stamp[q] = p
                    cnt += 1
        rowlen[p] = cnt
        total += cnt

    rows_arr = np.empty(total, dtype=np.int64)
    cols_arr = np.empty(total, dtype=np.int64)
    cdef i64[::1] rows = rows_arr
    cdef i64[::1] cols = cols_arr
    stamp_arr[:] = -1
    cdef Py_ssize_t pos = 0, start
    for p in range(n_e):
        ends[0] = s[p]
        ends[1] = t[p]
        start = pos
        for a in range(2):
            n = ends[a]
            for k in range(deg[n], deg[n + 1]):
                q = inc[k]
                if stamp[q] != p:
                    stamp[q] = p
                    rows[pos] = p
                    cols[pos] = q
                    pos += 1
        cols_arr[start:pos].sort()
    return rows_arr, cols_arr


def multi_source_bfs(indptr, indices, sources, i64 cap):
    cdef i64[::1] ptr = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef i64[::1] nbr = np.ascontiguousarray(indices, dtype=np.int64)
    cdef i64[::1] src = np.ascontiguousarray(sources, dtype=np.int64)
    cdef Py_ssize_t n = ptr.shape[0] - 1
    dist_arr = np.full(n, cap, dtype=np.int64)
    cdef i64[::1] dist = dist_arr
    queue_arr = np.empty(n, dtype=np.int64)
    cdef i64[::1] queue = queue_arr
    cdef Py_ssize_t head = 0, tail = 0, k
    cdef i64 u, v
    if cap <= 0:
        return dist_arr
    for k in range(src.shape[0]):
        u = src[k]
        if dist[u] != 0:
            dist[u] = 0
            queue[tail] = u
            tail += 1
    while head < tail:
        u = queue[head]
        head += 1
        if dist[u] + 1 >= cap:
            continue
        for k in range(ptr[u], ptr[u + 1]):
            v = nbr[k]
            if dist[v] == cap:
                dist[v] = dist[u] + 1
                queue[tail] = v
                tail += 1
    return dist_arr


def segment_softmax(scores, indptr):
    cdef cnp.ndarray sc = np.ascontiguousarray(scores)
    if sc.dtype == np.float32:
        return np.asarray(_segment_softmax_f32(sc, np.ascontiguousarray(indptr, dtype=np.int64)))
    return np.asarray(_segment_softmax_f64(sc.astype(np.float64, copy=False),
                                           np.ascontiguousarray(indptr, dtype=np.int64)))


def segment_softmax_backward(p, dp, indptr):
    cdef cnp.ndarray pa = np.ascontiguousarray(p)
    ptr = np.ascontiguousarray(indptr, dtype=np.int64)
    if pa.dtype == np.float32:
        return np.asarray(_segment_softmax_bwd_f32(
            pa, np.ascontiguousarray(dp, dtype=np.float32), ptr))
    return np.asarray(_segment_softmax_bwd_f64(
        pa.astype(np.float64, copy=False), np.ascontiguousarray(dp, dtype=np.float64), ptr))


ctypedef fused real:
    float
    double


cdef real[::1] _segment_softmax_impl(real[::1] x, i64[::1] ptr):
    cdef Py_ssize_t nseg = ptr.shape[0] - 1, r, k
    out_arr = np.empty_like(np.asarray(x))
    cdef real[::1] out = out_arr
    cdef double m, z, e
    for r in range(nseg):
        if ptr[r + 1] == ptr[r]:
            continue
        m = x[ptr[r]]
        for k in range(ptr[r] + 1, ptr[r + 1]):
            if x[k] > m:
                m = x[k]
        z = 0.0
        for k in range(ptr[r], ptr[r + 1]):
            e = exp(<double>x[k] - m)
            out[k] = <real>e
            z += <double>out[k]
        for k in range(ptr[r], ptr[r + 1]):
            out[k] = <real>(<double>out[k] / z)
    return out


cdef real[::1] _segment_softmax_bwd_impl(real[::1] p, real[::1] dp, i64[::1] ptr):
    cdef Py_ssize_t nseg = ptr.shape[0] - 1, r, k
    out_arr = np.empty_like(np.asarray(p))
    cdef real[::1] out = out_arr
    cdef double dot
    for r in range(nseg):
        dot = 0.0
        for k in range(ptr[r], ptr[r + 1]):
            dot += <double>p[k] * <double>dp[k]
        for k in range(ptr[r], ptr[r + 1]):
            out[k] = <real>(<double>p[k] * (<double>dp[k] - dot))
    return out


def _segment_softmax_f32(float[::1] x, i64[::1] ptr):
    return _segment_softmax_impl(x, ptr)


def _segment_softmax_f64(double[::1] x, i64[::1] ptr):
    return _segment_softmax_impl(x, ptr)


def _segment_softmax_bwd_f32(float[::1] p, float[::1] dp, i64[::1] ptr):
    return _segment_softmax_bwd_impl(p, dp, ptr)


def _segment_softmax_bwd_f64(double[::1] p, double[::1] dp, i64[::1] ptr):
    return _segment_softmax_bwd_impl(p, dp, ptr)
