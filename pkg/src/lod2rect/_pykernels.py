"""Pure-Python/numpy reference implementations of the hot kernels.

These are selected automatically when the compiled extension is unavailable
and serve as the cross-check for it in the test suite.
"""
from __future__ import annotations

import heapq

import numpy as np


def grid_sse(s, d, ze, dz):
    """SSE[k, j] = sum_i (ze[k] + dz[j] * s[i] - d[i])**2, summed left to right."""
    s = np.ascontiguousarray(s, dtype=np.float64)
    d = np.ascontiguousarray(d, dtype=np.float64)
    ze = np.ascontiguousarray(ze, dtype=np.float64)
    dz = np.ascontiguousarray(dz, dtype=np.float64)
    out = np.zeros((ze.size, dz.size))
    for j in range(dz.size):
        base = dz[j] * s - d  # (n,)
        r = ze[:, None] + base[None, :]
        # cumulative left-to-right sum so rounding matches the compiled loop
        out[:, j] = np.cumsum(r * r, axis=1)[:, -1] if s.size else 0.0
    return out


def max_inner_rect(mask):
    """Largest all-true axis-aligned rectangle as (row, col, height, width).

    Ties: smaller top row, then smaller left column, then smaller height.
    Returns (0, 0, 0, 0) for an empty mask.
    """
    m = np.asarray(mask, dtype=bool)
    rows, cols = m.shape
    best = (0, 0, 0, 0, 0)  # area, r0, c0, h, w
    for r0 in range(rows):
        run = np.ones(cols, dtype=bool)
        for r1 in range(r0, rows):
            run &= m[r1]
            if not run.any():
                break
            h = r1 - r0 + 1
            if h * cols < best[0]:
                continue
            padded = np.concatenate(([False], run, [False]))
            edges = np.flatnonzero(padded[1:] != padded[:-1])
            for a, b in zip(edges[::2], edges[1::2]):
                area = h * (b - a)
                cand = (area, r0, int(a), h, int(b - a))
                if area > best[0] or (
                    area == best[0] and (r0, a, h) < (best[1], best[2], best[3])
                ):
                    best = cand
    return best[1], best[2], best[3], best[4]


def watershed_flood(markers, mask):
    """Flood positive ``markers`` through ``mask`` by 4-connected geodesic distance.

    Pixels are claimed in (distance, row-major index, label) order.  Returns the
    label image; mask pixels unreachable from any marker stay 0.
    """
    mk = np.asarray(markers, dtype=np.int64)
    ms = np.asarray(mask, dtype=bool) | (mk > 0)
    rows, cols = mk.shape
    npix = rows * cols
    nlab = int(mk.max(initial=0)) + 1
    out = np.zeros(npix, dtype=np.int64)
    flat_ms = ms.ravel()
    heap = [int(i) * nlab + int(l) for i, l in enumerate(mk.ravel()) if l > 0]
    heapq.heapify(heap)
    while heap:
        key = heapq.heappop(heap)
        dist, rem = divmod(key, npix * nlab)
        idx, lab = divmod(rem, nlab)
        if out[idx]:
            continue
        out[idx] = lab
        r, c = divmod(idx, cols)
        nd = dist + 1
        for rr, cc in ((r - 1, c), (r, c - 1), (r, c + 1), (r + 1, c)):
            if 0 <= rr < rows and 0 <= cc < cols:
                j = rr * cols + cc
                if flat_ms[j] and not out[j]:
                    heapq.heappush(heap, (nd * npix + j) * nlab + lab)
    return out.reshape(rows, cols)
