"""Compiled inner loops (numba). Pure functions over integer arrays."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _heap_push(heap, size, key):
    i = size
    heap[i] = key
    while i > 0:
        parent = (i - 1) >> 1
        if heap[parent] <= heap[i]:
            break
        tmp = heap[parent]
        heap[parent] = heap[i]
        heap[i] = tmp
        i = parent
    return size + 1


@njit(cache=True)
def _heap_pop(heap, size):
    top = heap[0]
    size -= 1
    heap[0] = heap[size]
    i = 0
    while True:
        left = 2 * i + 1
        if left >= size:
            break
        child = left
        if left + 1 < size and heap[left + 1] < heap[left]:
            child = left + 1
        if heap[i] <= heap[child]:
            break
        tmp = heap[i]
        heap[i] = heap[child]
        heap[child] = tmp
        i = child
    return top, size


@njit(cache=True)
def bpe_encode_ids(ids, rank, merged):
    """Apply BPE merges to base-symbol ids.

    Adjacent pairs are merged lowest-rank first, leftmost first within a
    rank. Because a merge only ever creates pairs of a strictly higher rank,
    this equals applying every merge rule in learned order, left to right.
    ``rank[a, b]`` is the merge index of pair (a, b) or -1.
    """
    n = ids.shape[0]
    if n < 2:
        return ids.copy()
    tok = ids.copy()
    nxt = np.empty(n, np.int64)
    prv = np.empty(n, np.int64)
    alive = np.ones(n, np.bool_)
    for i in range(n):
        nxt[i] = i + 1
        prv[i] = i - 1
    nxt[n - 1] = -1
    stride = n + 1
    heap = np.empty(3 * n + 4, np.int64)
    size = 0
    for i in range(n - 1):
        r = rank[tok[i], tok[i + 1]]
        if r >= 0:
            size = _heap_push(heap, size, r * stride + i)
    count = n
    while size > 0:
        key, size = _heap_pop(heap, size)
        r = key // stride
        p = key % stride
        if not alive[p]:
            continue
        q = nxt[p]
        if q < 0 or rank[tok[p], tok[q]] != r:
            continue
        tok[p] = merged[tok[p], tok[q]]
        alive[q] = False
        count -= 1
        after = nxt[q]
        nxt[p] = after
        if after >= 0:
            prv[after] = p
        before = prv[p]
        if before >= 0:
            r2 = rank[tok[before], tok[p]]
            if r2 >= 0:
                size = _heap_push(heap, size, r2 * stride + before)
        if after >= 0:
            r2 = rank[tok[p], tok[after]]
            if r2 >= 0:
                size = _heap_push(heap, size, r2 * stride + p)
    out = np.empty(count, ids.dtype)
    j = 0
    i = 0
    while i >= 0:
        out[j] = tok[i]
        j += 1
        i = nxt[i]
    return out


@njit(cache=True)
def levenshtein_kernel(a, b, cutoff):
    """Unit-cost edit distance with a rolling row over the shorter string.

    With ``cutoff >= 0`` only the diagonal band |i - j| <= cutoff is filled
    and the scan stops as soon as a whole row exceeds the cutoff; the return
    value is then ``cutoff + 1``.
    """
    if a.shape[0] < b.shape[0]:
        a, b = b, a
    m = a.shape[0]
    n = b.shape[0]
    if n == 0:
        if cutoff >= 0 and m > cutoff:
            return cutoff + 1
        return m
    if cutoff >= 0 and m - n > cutoff:
        return cutoff + 1
    big = m + n + 1
    prev = np.empty(n + 1, np.int64)
    cur = np.empty(n + 1, np.int64)
    for j in range(n + 1):
        prev[j] = j
    if cutoff >= 0:
        for j in range(cutoff + 1, n + 1):
            prev[j] = big
    for i in range(1, m + 1):
        if cutoff >= 0:
            lo = max(1, i - cutoff)
            hi = min(n, i + cutoff)
        else:
            lo = 1
            hi = n
        if lo > hi:
            return cutoff + 1
        if lo == 1:
            cur[0] = i
        else:
            cur[lo - 1] = big
        row_min = cur[lo - 1]
        ai = a[i - 1]
        for j in range(lo, hi + 1):
            cost = 0 if ai == b[j - 1] else 1
            v = prev[j - 1] + cost
            d = prev[j] + 1
            if d < v:
                v = d
            ins = cur[j - 1] + 1
            if ins < v:
                v = ins
            cur[j] = v
            if v < row_min:
                row_min = v
        if hi < n:
            cur[hi + 1] = big
        if cutoff >= 0 and row_min > cutoff:
            return cutoff + 1
        prev, cur = cur, prev
    res = prev[n]
    if cutoff >= 0 and res > cutoff:
        return cutoff + 1
    return res
