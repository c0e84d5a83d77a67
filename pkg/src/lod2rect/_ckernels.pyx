# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels; semantics mirror ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t

cnp.import_array()


def grid_sse(s, d, ze, dz):
    cdef double[::1] sv = np.ascontiguousarray(s, dtype=np.float64)
    cdef double[::1] dv = np.ascontiguousarray(d, dtype=np.float64)
    cdef double[::1] zv = np.ascontiguousarray(ze, dtype=np.float64)
    cdef double[::1] qv = np.ascontiguousarray(dz, dtype=np.float64)
    cdef Py_ssize_t n = sv.shape[0], K = zv.shape[0], J = qv.shape[0]
    out = np.zeros((K, J), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double[::1] base = np.empty(n, dtype=np.float64)
    cdef Py_ssize_t i, j, k
    cdef double acc, r, z
    with nogil:
        for j in range(J):
            for i in range(n):
                base[i] = qv[j] * sv[i] - dv[i]
            for k in range(K):
                z = zv[k]
                acc = 0.0
                for i in range(n):
                    r = z + base[i]
                    acc = acc + r * r
                o[k, j] = acc
    return out


def max_inner_rect(mask):
    cdef cnp.uint8_t[:, ::1] m = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef Py_ssize_t rows = m.shape[0], cols = m.shape[1]
    cdef cnp.uint8_t[::1] run = np.empty(cols, dtype=np.uint8)
    cdef Py_ssize_t r0, r1, c, a, h, any_on
    cdef Py_ssize_t b_area = 0, b_r0 = 0, b_c0 = 0, b_h = 0, b_w = 0, area
    with nogil:
        for r0 in range(rows):
            for c in range(cols):
                run[c] = 1
            for r1 in range(r0, rows):
                any_on = 0
                for c in range(cols):
                    run[c] = run[c] & (m[r1, c] != 0)
                    any_on = any_on | run[c]
                if not any_on:
                    break
                h = r1 - r0 + 1
                if h * cols < b_area:
                    continue
                c = 0
                while c < cols:
                    if run[c]:
                        a = c
                        while c < cols and run[c]:
                            c += 1
                        area = h * (c - a)
                        if area > b_area or (area == b_area and (
                                r0 < b_r0 or (r0 == b_r0 and (a < b_c0 or (a == b_c0 and h < b_h))))):
                            b_area = area
                            b_r0 = r0
                            b_c0 = a
                            b_h = h
                            b_w = c - a
                    else:
                        c += 1
    return int(b_r0), int(b_c0), int(b_h), int(b_w)


cdef inline void _push(int64_t[::1] heap, Py_ssize_t* size, int64_t key) noexcept nogil:
    cdef Py_ssize_t i = size[0], p
    size[0] += 1
    while i > 0:
        p = (i - 1) >> 1
        if heap[p] <= key:
            break
        heap[i] = heap[p]
        i = p
    heap[i] = key


cdef inline int64_t _pop(int64_t[::1] heap, Py_ssize_t* size) noexcept nogil:
    cdef int64_t top = heap[0], last
    cdef Py_ssize_t i = 0, ch, n
    size[0] -= 1
    n = size[0]
    if n == 0:
        return top
    last = heap[n]
    while True:
        ch = 2 * i + 1
        if ch >= n:
            break
        if ch + 1 < n and heap[ch + 1] < heap[ch]:
            ch += 1
        if heap[ch] >= last:
            break
        heap[i] = heap[ch]
        i = ch
    heap[i] = last
    return top


def watershed_flood(markers, mask):
    mk_arr = np.ascontiguousarray(markers, dtype=np.int64)
    ms_arr = np.ascontiguousarray((np.asarray(mask, dtype=bool) | (mk_arr > 0)), dtype=np.uint8)
    cdef int64_t[:, ::1] mk = mk_arr
    cdef cnp.uint8_t[:, ::1] ms = ms_arr
    cdef Py_ssize_t rows = mk.shape[0], cols = mk.shape[1]
    cdef int64_t npix = rows * cols
    cdef int64_t nlab = int(mk_arr.max(initial=0)) + 1
    out_arr = np.zeros((rows, cols), dtype=np.int64)
    cdef int64_t[:, ::1] out = out_arr
    # each pixel is pushed at most 4 times plus once as a seed
    cdef int64_t[::1] heap = np.empty(5 * npix + 1, dtype=np.int64)
    cdef Py_ssize_t size = 0
    cdef Py_ssize_t r, c, rr, cc, t
    cdef int64_t key, dist, rem, idx, lab, j
    cdef int dr[4]
    cdef int dc[4]
    dr[0] = -1; dc[0] = 0
    dr[1] = 0; dc[1] = -1
    dr[2] = 0; dc[2] = 1
    dr[3] = 1; dc[3] = 0
    with nogil:
        for r in range(rows):
            for c in range(cols):
                if mk[r, c] > 0:
                    _push(heap, &size, (r * cols + c) * nlab + mk[r, c])
        while size > 0:
            key = _pop(heap, &size)
            dist = key // (npix * nlab)
            rem = key - dist * npix * nlab
            idx = rem // nlab
            lab = rem - idx * nlab
            r = idx // cols
            c = idx - r * cols
            if out[r, c]:
                continue
            out[r, c] = lab
            for t in range(4):
                rr = r + dr[t]
                cc = c + dc[t]
                if 0 <= rr < rows and 0 <= cc < cols:
                    if ms[rr, cc] and not out[rr, cc]:
                        j = rr * cols + cc
                        _push(heap, &size, ((dist + 1) * npix + j) * nlab + lab)
    return out_arr
