"""Compiled inner loops for the search path."""

import functools

import numba
import numpy as np


# The scan is generated per codebook count M with the sum over sub-codebooks
# written out term by term: the running total stays in a register and the
# gathers are independent, which a loop over m does not give numba. Terms are
# added in ascending m, the same order as a plain per-item sum.
_SCAN_SOURCE = """
def scan(tables, codes, out):
    Q = tables.shape[0]
    N = codes.shape[0]
    for q in range(Q):
        t = tables[q]
        o = out[q]
        for i in range(N):
            acc = t[0, codes[i, 0]]
{terms}
            o[i] = acc
"""


@functools.lru_cache(maxsize=None)
def _scan_kernel(M: int):
    terms = "\n".join(f"            acc += t[{m}, codes[i, {m}]]" for m in range(1, M))
    namespace = {}
    exec(_SCAN_SOURCE.format(terms=terms), namespace)
    return numba.njit(namespace["scan"])


def lookup_scores(tables, codes, out):
    """out[q, i] = sum_m tables[q, m, codes[i, m]] for tables (Q, M, K) and codes (N, M)."""
    if codes.shape[0]:
        _scan_kernel(codes.shape[1])(tables, codes, out)


@numba.njit(cache=True)
def _sift_down(hs, hi, pos, n):
    # min-heap on (score, -id): the root is the weakest kept item
    while True:
        left = 2 * pos + 1
        if left >= n:
            break
        child = left
        right = left + 1
        if right < n and (hs[right] < hs[left] or (hs[right] == hs[left] and hi[right] > hi[left])):
            child = right
        if hs[child] < hs[pos] or (hs[child] == hs[pos] and hi[child] > hi[pos]):
            hs[pos], hs[child] = hs[child], hs[pos]
            hi[pos], hi[child] = hi[child], hi[pos]
            pos = child
        else:
            break


@numba.njit(cache=True)
def top_n(scores, n, exclude):
    """Indices of the ``n`` best scores, best first; ties by ascending index.

    ``exclude`` is an item index to skip (-1 for none).
    """
    N = scores.shape[0]
    hs = np.empty(n, dtype=scores.dtype)
    hi = np.empty(n, dtype=np.int64)
    count = 0
    for i in range(N):
        if i == exclude:
            continue
        s = scores[i]
        if count < n:
            # sift up
            pos = count
            hs[pos] = s
            hi[pos] = i
            count += 1
            while pos > 0:
                parent = (pos - 1) // 2
                if hs[pos] < hs[parent] or (hs[pos] == hs[parent] and hi[pos] > hi[parent]):
                    hs[pos], hs[parent] = hs[parent], hs[pos]
                    hi[pos], hi[parent] = hi[parent], hi[pos]
                    pos = parent
                else:
                    break
        elif s > hs[0]:
            # items arrive in ascending index order, so an equal score never wins
            hs[0] = s
            hi[0] = i
            _sift_down(hs, hi, 0, n)
    # heap-sort out: repeatedly pop the weakest to the back
    for end in range(count - 1, 0, -1):
        hs[0], hs[end] = hs[end], hs[0]
        hi[0], hi[end] = hi[end], hi[0]
        _sift_down(hs, hi, 0, end)
    return hi[:count].copy()


@numba.njit(cache=True)
def top_n_rows(scores, n, exclude):
    Q = scores.shape[0]
    out = np.empty((Q, n), dtype=np.int64)
    for q in range(Q):
        out[q] = top_n(scores[q], n, exclude[q])
    return out
