"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The loops that dominate runtime (sparse feature propagation, community
local-moving sweeps, matching and refinement passes, component labeling)
are written as plain array functions and JIT-compiled with numba when it
is available. Setting the environment variable ``FGLSIM_PURE_NUMPY=1``
forces the fallback path: a vectorized numpy implementation for the
matrix product and the uncompiled loop versions elsewhere.

``benchmarks/bench_kernels.py`` times both paths on the same workloads.
"""

from __future__ import annotations

import os

import numpy as np

ENV_FLAG = "FGLSIM_PURE_NUMPY"

try:
    from numba import njit as _njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

NUMBA_ENABLED = HAVE_NUMBA and os.environ.get(ENV_FLAG, "0") != "1"


def _jit(fn):
    if NUMBA_ENABLED:
        return _njit(cache=True, nogil=True)(fn)
    return fn


# ---------------------------------------------------------------- spmm ----


def _spmm_loops(indptr, indices, data, X, out):
    n = indptr.size - 1
    f = X.shape[1]
    for i in range(n):
        for jj in range(indptr[i], indptr[i + 1]):
            j = indices[jj]
            w = data[jj]
            for c in range(f):
                out[i, c] += w * X[j, c]


_spmm_loops_jit = _jit(_spmm_loops)


def _spmm_numpy(indptr, indices, data, X):
    n = indptr.size - 1
    rows = np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr))
    out = np.zeros((n, X.shape[1]), dtype=np.float64)
    np.add.at(out, rows, data[:, None] * X[indices])
    return out


def spmm(indptr, indices, data, X):
    """CSR sparse matrix times dense matrix, returns a new dense matrix."""
    if NUMBA_ENABLED:
        out = np.zeros((indptr.size - 1, X.shape[1]), dtype=np.float64)
        _spmm_loops_jit(indptr, indices, data, np.ascontiguousarray(X, dtype=np.float64), out)
        return out
    return _spmm_numpy(indptr, indices, data, np.asarray(X, dtype=np.float64))


# ------------------------------------------------- louvain local moving ----


def _louvain_move_pass(
    indptr, indices, weights, strength, comm, comm_tot, order, two_m, resolution
):
    # One sweep of local moving. `comm` and `comm_tot` are updated in place;
    # returns the number of nodes that changed community. Community ids are
    # drawn from the initial singleton labeling, so `comm_tot` has one slot
    # per node. Ties keep the current community; among new candidates the
    # first best in neighbor scan order wins (scan order is CSR order, which
    # is deterministic).
    n_moves = 0
    neigh_w = np.zeros(comm_tot.size, dtype=np.float64)
    touched = np.empty(comm_tot.size, dtype=np.int64)
    for oi in range(order.size):
        u = order[oi]
        cu = comm[u]
        n_touch = 0
        for jj in range(indptr[u], indptr[u + 1]):
            v = indices[jj]
            if v == u:
                continue
            c = comm[v]
            if neigh_w[c] == 0.0:
                touched[n_touch] = c
                n_touch += 1
            neigh_w[c] += weights[jj]
        ku = strength[u]
        comm_tot[cu] -= ku
        best_c = cu
        best_score = neigh_w[cu] - resolution * ku * comm_tot[cu] / two_m
        for ti in range(n_touch):
            c = touched[ti]
            if c == cu:
                continue
            score = neigh_w[c] - resolution * ku * comm_tot[c] / two_m
            if score > best_score + 1e-12:
                best_score = score
                best_c = c
        comm_tot[best_c] += ku
        if best_c != cu:
            comm[u] = best_c
            n_moves += 1
        for ti in range(n_touch):
            neigh_w[touched[ti]] = 0.0
    return n_moves


louvain_move_pass = _jit(_louvain_move_pass)


# ------------------------------------------------- heavy-edge matching ----


def _hem_match(indptr, indices, weights, node_w, w_cap, order, match):
    # Greedy heavy-edge matching: each unmatched node (in `order`) pairs with
    # its heaviest unmatched neighbor, ties to the lowest index; nodes with
    # no available neighbor match themselves. Pairs whose combined weight
    # would exceed `w_cap` are skipped so supernodes stay placeable.
    for oi in range(order.size):
        u = order[oi]
        if match[u] >= 0:
            continue
        best = -1
        best_w = 0.0
        for jj in range(indptr[u], indptr[u + 1]):
            v = indices[jj]
            if v == u or match[v] >= 0:
                continue
            if node_w[u] + node_w[v] > w_cap:
                continue
            w = weights[jj]
            if w > best_w or (w == best_w and best >= 0 and v < best):
                best_w = w
                best = v
        if best >= 0:
            match[u] = best
            match[best] = u
        else:
            match[u] = u


hem_match = _jit(_hem_match)


# ------------------------------------------- Fiduccia-Mattheyses pass ----


def _fm_pass(indptr, indices, weights, node_w, part, part_w, K, max_w, move_cap):
    # One FM refinement pass: repeatedly apply the single best boundary move
    # (even when negative), lock the node, and afterwards roll back to the
    # prefix of moves with maximum cumulative gain among BALANCED states.
    # During the pass a part may exceed `max_w` by up to one node weight,
    # which lets tightly balanced partitions improve via implicit swaps.
    # Parts are never emptied. Returns the gain kept (cut-weight reduction).
    n = part.size
    slack = node_w.max()
    locked = np.zeros(n, dtype=np.bool_)
    move_nodes = np.empty(move_cap, dtype=np.int64)
    move_from = np.empty(move_cap, dtype=np.int64)
    move_to = np.empty(move_cap, dtype=np.int64)
    conn = np.zeros(K, dtype=np.float64)
    over = 0
    for c in range(K):
        if part_w[c] > max_w:
            over += 1
    n_moves = 0
    total = 0.0
    if over == 0:
        best_prefix = 0
        best_total = 0.0
    else:
        best_prefix = -1
        best_total = -1e300
    while n_moves < move_cap:
        sel_u = -1
        sel_t = -1
        sel_gain = 0.0
        for u in range(n):
            if locked[u]:
                continue
            p = part[u]
            if part_w[p] - node_w[u] <= 0:
                continue
            for c in range(K):
                conn[c] = 0.0
            boundary = False
            for jj in range(indptr[u], indptr[u + 1]):
                v = indices[jj]
                if v == u:
                    continue
                q = part[v]
                conn[q] += weights[jj]
                if q != p:
                    boundary = True
            if not boundary:
                continue
            for q in range(K):
                if q == p or conn[q] == 0.0:
                    continue
                if part_w[q] + node_w[u] > max_w + slack:
                    continue
                g = conn[q] - conn[p]
                if sel_u < 0:
                    take = True
                elif g > sel_gain + 1e-12:
                    take = True
                elif g >= sel_gain - 1e-12 and (u < sel_u or (u == sel_u and q < sel_t)):
                    take = True
                else:
                    take = False
                if take:
                    sel_gain = g
                    sel_u = u
                    sel_t = q
        if sel_u < 0:
            break
        p = part[sel_u]
        if part_w[p] > max_w and part_w[p] - node_w[sel_u] <= max_w:
            over -= 1
        if part_w[sel_t] <= max_w and part_w[sel_t] + node_w[sel_u] > max_w:
            over += 1
        part[sel_u] = sel_t
        part_w[p] -= node_w[sel_u]
        part_w[sel_t] += node_w[sel_u]
        locked[sel_u] = True
        total += sel_gain
        move_nodes[n_moves] = sel_u
        move_from[n_moves] = p
        move_to[n_moves] = sel_t
        n_moves += 1
        if over == 0 and total > best_total + 1e-12:
            best_total = total
            best_prefix = n_moves
    if best_prefix < 0:
        best_prefix = 0
        best_total = 0.0
    for i in range(n_moves - 1, best_prefix - 1, -1):
        u = move_nodes[i]
        part[u] = move_from[i]
        part_w[move_to[i]] -= node_w[u]
        part_w[move_from[i]] += node_w[u]
    return best_total


fm_pass = _jit(_fm_pass)


# ------------------------------------------------ connected components ----


def _cc_labels(indptr, indices, labels):
    # Iterative DFS labeling; `labels` must come in as all -1.
    n = labels.size
    stack = np.empty(n, dtype=np.int64)
    comp = 0
    for s in range(n):
        if labels[s] >= 0:
            continue
        labels[s] = comp
        stack[0] = s
        top = 1
        while top > 0:
            top -= 1
            u = stack[top]
            for jj in range(indptr[u], indptr[u + 1]):
                v = indices[jj]
                if labels[v] < 0:
                    labels[v] = comp
                    stack[top] = v
                    top += 1
        comp += 1
    return comp


cc_labels = _jit(_cc_labels)
