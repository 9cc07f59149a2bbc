"""Pure-Python/numpy reference implementations of the hot kernels.

Semantics are kept bit-compatible with the compiled extension: the cascade
kernel draws one counter-based variate per attempted edge, and the scan
kernel walks the same greedy key window with the same tie rules. The
compiled module is preferred at import time; this one is the fallback and
the oracle the extension is tested against.
"""

from __future__ import annotations

import numpy as np

_M64 = (1 << 64) - 1
_INV53 = 1.0 / 9007199254740992.0  # 2**-53


def mix64(z: int) -> int:
    """splitmix64 finalizer; a bijection on 64-bit integers."""
    z = (z + 0x9E3779B97F4A7C15) & _M64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _M64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _M64
    z ^= z >> 31
    return z


def edge_uniform(seed: int, rep: int, slot: int) -> float:
    """Uniform(0,1) variate keyed by (seed, replication, edge slot).

    Counter-based, so draws do not depend on traversal order. Each directed
    edge is attempted at most once per cascade, which makes this exactly
    equivalent to drawing fresh variates on demand.
    """
    h = mix64(seed & _M64)
    h = mix64(h ^ (rep & _M64))
    h = mix64(h ^ (slot & _M64))
    return (h >> 11) * _INV53


def cascade_counts(indptr, indices, probs, seeds, num_nodes, num_reps, seed):
    """Monte Carlo independent-cascade simulation over a CSR digraph.

    ``probs[slot]`` is the activation probability of the directed edge stored
    at CSR position ``slot``. Returns ``(counts, spreads)``: per-node
    activation counts across replications and the total spread (activated
    node count, seeds included) per replication.
    """
    indptr = np.asarray(indptr, dtype=np.int64)
    indices = np.asarray(indices, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    seeds_arr = np.asarray(seeds, dtype=np.int64)
    counts = np.zeros(num_nodes, dtype=np.int64)
    spreads = np.zeros(num_reps, dtype=np.int64)
    base = mix64(seed & _M64)

    for rep in range(num_reps):
        hrep = mix64(base ^ rep)
        active = np.zeros(num_nodes, dtype=bool)
        frontier = []
        for s in seeds_arr:
            s = int(s)
            if not active[s]:
                active[s] = True
                frontier.append(s)
        total = len(frontier)
        while frontier:
            nxt = []
            for u in frontier:
                for slot in range(indptr[u], indptr[u + 1]):
                    v = int(indices[slot])
                    if active[v]:
                        continue
                    h = mix64(hrep ^ int(slot))
                    tau = (h >> 11) * _INV53
                    if probs[slot] > tau:
                        active[v] = True
                        nxt.append(v)
                        total += 1
            frontier = nxt
        spreads[rep] = total
        counts += active
    return counts, spreads


def scan_topk(keys, feats, qkey, query, start, budget, k):
    """Score at most ``budget`` entries around ``start`` and keep the top k.

    ``keys`` must be sorted ascending and ``start`` must point at the first
    entry with key >= qkey. The walk greedily takes whichever side of the
    split has the smaller absolute key distance, preferring the right side on
    ties. Returns (positions, scores) ordered by score descending, position
    ascending on equal scores.
    """
    keys = np.asarray(keys, dtype=np.uint64)
    feats = np.asarray(feats, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    m = keys.shape[0]
    qk = int(qkey)
    left = int(start) - 1
    right = int(start)
    remaining = int(budget)
    while remaining > 0:
        if left >= 0 and right < m:
            if int(keys[right]) - qk <= qk - int(keys[left]):
                right += 1
            else:
                left -= 1
        elif right < m:
            right += 1
        elif left >= 0:
            left -= 1
        else:
            break
        remaining -= 1
    lo, hi = left + 1, right
    if lo >= hi:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    window = np.arange(lo, hi, dtype=np.int64)
    scores = feats[lo:hi] @ query
    order = np.lexsort((window, -scores))[: int(k)]
    return window[order], scores[order]


def scan_topk_batch(keys, feats, qkeys, queries, starts, budget, k):
    """One scan per query row; identical key and start rows walk identical
    windows. Returns (positions, scores) of shape (num_queries, k), with
    positions padded by -1 where a scan yields fewer than k entries.
    """
    queries = np.asarray(queries, dtype=np.float64)
    nq = queries.shape[0]
    out_pos = np.full((nq, int(k)), -1, dtype=np.int64)
    out_sc = np.zeros((nq, int(k)), dtype=np.float64)
    for i in range(nq):
        pos, sc = scan_topk(keys, feats, int(qkeys[i]), queries[i],
                            int(starts[i]), budget, k)
        out_pos[i, : pos.shape[0]] = pos
        out_sc[i, : sc.shape[0]] = sc
    return out_pos, out_sc
