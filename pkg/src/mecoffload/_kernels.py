"""Inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``MECOFFLOAD_PURE_NUMPY`` is
unset (or "0"). Both paths are always importable as ``*_numpy`` /
``*_numba`` so they can be cross-checked; the unsuffixed names are the
selected implementation. Both paths perform the same float operations in
the same order, so their results are bit-identical.
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("MECOFFLOAD_PURE_NUMPY", "0").strip().lower()
_want_numba = _flag in ("", "0", "false", "no")

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and _want_numba


# ---------------------------------------------------------------------------
# FIFO multi-unit server


def fifo_units_numpy(arrival, service, order, n_units):
    """Start/finish times for tasks served FIFO in ``order`` on identical units."""
    n = arrival.shape[0]
    free = np.zeros(n_units)
    start = np.empty(n)
    finish = np.empty(n)
    for k in range(n):
        i = order[k]
        u = int(np.argmin(free))
        s = max(arrival[i], free[u])
        start[i] = s
        finish[i] = s + service[i]
        free[u] = finish[i]
    return start, finish


def _fifo_units_loop(arrival, service, order, n_units):
    n = arrival.shape[0]
    free = np.zeros(n_units)
    start = np.empty(n)
    finish = np.empty(n)
    for k in range(n):
        i = order[k]
        u = 0
        for j in range(1, n_units):
            if free[j] < free[u]:
                u = j
        s = arrival[i] if arrival[i] > free[u] else free[u]
        start[i] = s
        finish[i] = s + service[i]
        free[u] = finish[i]
    return start, finish


# ---------------------------------------------------------------------------
# Greedy admission under a count and a size budget


def greedy_admit_numpy(order, sizes, k_max, capacity):
    """Accept candidates in ``order`` while fewer than ``k_max`` are accepted
    and the cumulative size still fits in ``capacity``. Rejections do not stop
    the scan: a later, smaller candidate may still fit."""
    accept = np.zeros(sizes.shape[0], dtype=np.bool_)
    count = 0
    total = 0.0
    for i in order:
        if count >= k_max:
            break
        if total + sizes[i] <= capacity:
            accept[i] = True
            total += sizes[i]
            count += 1
    return accept


def _greedy_admit_loop(order, sizes, k_max, capacity):
    accept = np.zeros(sizes.shape[0], dtype=np.bool_)
    count = 0
    total = 0.0
    for k in range(order.shape[0]):
        if count >= k_max:
            break
        i = order[k]
        if total + sizes[i] <= capacity:
            accept[i] = True
            total += sizes[i]
            count += 1
    return accept


# ---------------------------------------------------------------------------
# Sum tree: leaves at [cap, 2*cap), root at 1. Parents are always recomputed
# as left + right, never patched by deltas, so both paths agree exactly.


def tree_update_numpy(tree, leaves, values):
    cap = tree.shape[0] // 2
    idx = np.asarray(leaves, dtype=np.int64) + cap
    tree[idx] = values
    idx = np.unique(idx // 2)
    while idx.size and idx[0] >= 1:
        tree[idx] = tree[2 * idx] + tree[2 * idx + 1]
        if idx[0] == 1:
            break
        idx = np.unique(idx // 2)


def _tree_update_loop(tree, leaves, values):
    cap = tree.shape[0] // 2
    for k in range(leaves.shape[0]):
        tree[leaves[k] + cap] = values[k]
    # level-by-level so a shared parent sees both updated children
    depth = 0
    c = cap
    while c > 1:
        c //= 2
        depth += 1
    for level in range(1, depth + 1):
        for k in range(leaves.shape[0]):
            p = (leaves[k] + cap) >> level
            tree[p] = tree[2 * p] + tree[2 * p + 1]


def tree_find_numpy(tree, targets, size):
    """Leaf index for each prefix-sum target by descending from the root."""
    cap = tree.shape[0] // 2
    u = np.array(targets, dtype=np.float64)
    idx = np.ones(u.shape[0], dtype=np.int64)
    while cap > 1 and idx[0] < cap:
        left = 2 * idx
        go_left = u < tree[left]
        u = np.where(go_left, u, u - tree[left])
        idx = np.where(go_left, left, left + 1)
    leaf = idx - tree.shape[0] // 2
    return np.minimum(leaf, size - 1)


def _tree_find_loop(tree, targets, size):
    cap = tree.shape[0] // 2
    out = np.empty(targets.shape[0], dtype=np.int64)
    for k in range(targets.shape[0]):
        u = targets[k]
        i = 1
        while i < cap:
            left = 2 * i
            if u < tree[left]:
                i = left
            else:
                u = u - tree[left]
                i = left + 1
        leaf = i - cap
        out[k] = leaf if leaf < size else size - 1
    return out


if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)
    fifo_units_numba = _jit(_fifo_units_loop)
    greedy_admit_numba = _jit(_greedy_admit_loop)
    tree_update_numba = _jit(_tree_update_loop)
    tree_find_numba = _jit(_tree_find_loop)
else:  # pragma: no cover
    fifo_units_numba = greedy_admit_numba = None
    tree_update_numba = tree_find_numba = None


if USE_NUMBA:
    fifo_units = fifo_units_numba
    greedy_admit = greedy_admit_numba
    tree_update = tree_update_numba
    tree_find = tree_find_numba
else:
    fifo_units = fifo_units_numpy
    greedy_admit = greedy_admit_numpy
    tree_update = tree_update_numpy
    tree_find = tree_find_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
