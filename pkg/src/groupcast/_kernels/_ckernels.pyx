# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the fallback kernels.

Must stay semantically identical to ``pyfallback``: same counter-based RNG,
same frontier order, same scan window and tie rules. The parity tests
enforce this.
"""

import numpy as np

cimport numpy as cnp
from libc.stdint cimport int64_t, uint64_t

cnp.import_array()

cdef double _INV53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _mix64(uint64_t z) nogil:
    z = z + <uint64_t>0x9E3779B97F4A7C15
    z ^= z >> 30
    z = z * <uint64_t>0xBF58476D1CE4E5B9
    z ^= z >> 27
    z = z * <uint64_t>0x94D049BB133111EB
    z ^= z >> 31
    return z


def mix64(z):
    """64-bit finalizer behind the counter-based RNG."""
    return _mix64(<uint64_t>(z & 0xFFFFFFFFFFFFFFFF))


def edge_uniform(seed, rep, slot):
    """Counter-based Uniform(0,1) keyed by (seed, replication, edge slot)."""
    cdef uint64_t h = _mix64(<uint64_t>(seed & 0xFFFFFFFFFFFFFFFF))
    h = _mix64(h ^ <uint64_t>(rep & 0xFFFFFFFFFFFFFFFF))
    h = _mix64(h ^ <uint64_t>(slot & 0xFFFFFFFFFFFFFFFF))
    return <double>(h >> 11) * _INV53


def cascade_counts(indptr, indices, probs, seeds, num_nodes, num_reps, seed):
    """Monte Carlo independent-cascade simulation over a CSR digraph.

    Returns (counts, spreads); see the fallback docstring for semantics.
    """
    cdef cnp.ndarray[cnp.int64_t, ndim=1] indptr_a = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] indices_a = np.ascontiguousarray(indices, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] probs_a = np.ascontiguousarray(probs, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] seeds_a = np.ascontiguousarray(seeds, dtype=np.int64)
    cdef int64_t n = num_nodes
    cdef int64_t reps = num_reps
    cdef cnp.ndarray[cnp.int64_t, ndim=1] counts = np.zeros(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] spreads = np.zeros(reps, dtype=np.int64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] active = np.zeros(n, dtype=np.uint8)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] frontier = np.empty(n, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] nxt = np.empty(n, dtype=np.int64)

    cdef int64_t[::1] ip = indptr_a
    cdef int64_t[::1] ix = indices_a
    cdef double[::1] pr = probs_a
    cdef int64_t[::1] sd = seeds_a
    cdef int64_t[::1] cnt = counts
    cdef int64_t[::1] spr = spreads
    cdef cnp.uint8_t[::1] act = active
    cdef int64_t[::1] cur = frontier
    cdef int64_t[::1] nx = nxt

    cdef uint64_t base = _mix64(<uint64_t>(seed & 0xFFFFFFFFFFFFFFFF))
    cdef uint64_t hrep, h
    cdef int64_t rep, i, u, v, slot, fsize, nsize, total, fi
    cdef double tau

    with nogil:
        for rep in range(reps):
            hrep = _mix64(base ^ <uint64_t>rep)
            for i in range(n):
                act[i] = 0
            fsize = 0
            for i in range(sd.shape[0]):
                u = sd[i]
                if act[u] == 0:
                    act[u] = 1
                    cur[fsize] = u
                    fsize += 1
            total = fsize
            while fsize > 0:
                nsize = 0
                for fi in range(fsize):
                    u = cur[fi]
                    for slot in range(ip[u], ip[u + 1]):
                        v = ix[slot]
                        if act[v]:
                            continue
                        h = _mix64(hrep ^ <uint64_t>slot)
                        tau = <double>(h >> 11) * _INV53
                        if pr[slot] > tau:
                            act[v] = 1
                            nx[nsize] = v
                            nsize += 1
                            total += 1
                for fi in range(nsize):
                    cur[fi] = nx[fi]
                fsize = nsize
            spr[rep] = total
            for i in range(n):
                cnt[i] += act[i]
    return counts, spreads


cdef int64_t _scan_core(uint64_t[::1] ky, double[:, ::1] ft, uint64_t qk,
                        double[::1] q, int64_t start, int64_t budget,
                        int64_t kk, int64_t[::1] ti, double[::1] ts) nogil:
    """Greedy bidirectional key-window scan keeping a running top-k.

    Writes the top entries into ti/ts ordered by (score desc, position asc)
    and returns how many were filled. Right side wins key-distance ties.
    """
    cdef int64_t m = ky.shape[0]
    cdef int64_t d = ft.shape[1]
    cdef int64_t left = start - 1
    cdef int64_t right = start
    cdef int64_t remaining = budget
    cdef int64_t filled = 0
    cdef int64_t pick, j, pos
    cdef double s, s0, s1, s2, s3
    cdef const double* qp = &q[0]
    cdef const double* fp
    cdef bint take

    while remaining > 0:
        if left >= 0 and right < m:
            if ky[right] - qk <= qk - ky[left]:
                pick = right
                right += 1
            else:
                pick = left
                left -= 1
        elif right < m:
            pick = right
            right += 1
        elif left >= 0:
            pick = left
            left -= 1
        else:
            break
        remaining -= 1
        # four-lane unrolled dot; fixed lane order keeps results deterministic
        fp = &ft[pick, 0]
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        s3 = 0.0
        j = 0
        while j + 4 <= d:
            s0 += fp[j] * qp[j]
            s1 += fp[j + 1] * qp[j + 1]
            s2 += fp[j + 2] * qp[j + 2]
            s3 += fp[j + 3] * qp[j + 3]
            j += 4
        while j < d:
            s0 += fp[j] * qp[j]
            j += 1
        s = (s0 + s1) + (s2 + s3)
        if filled < kk:
            pos = filled
            while pos > 0 and (ts[pos - 1] < s or (ts[pos - 1] == s and ti[pos - 1] > pick)):
                ts[pos] = ts[pos - 1]
                ti[pos] = ti[pos - 1]
                pos -= 1
            ts[pos] = s
            ti[pos] = pick
            filled += 1
        else:
            take = kk > 0 and (s > ts[kk - 1] or (s == ts[kk - 1] and pick < ti[kk - 1]))
            if take:
                pos = kk - 1
                while pos > 0 and (ts[pos - 1] < s or (ts[pos - 1] == s and ti[pos - 1] > pick)):
                    ts[pos] = ts[pos - 1]
                    ti[pos] = ti[pos - 1]
                    pos -= 1
                ts[pos] = s
                ti[pos] = pick
    return filled


def scan_topk(keys, feats, qkey, query, start, budget, k):
    """Greedy bidirectional key-window scan with running top-k selection.

    Mirrors the fallback: right side wins distance ties, equal scores order
    by position ascending.
    """
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] keys_a = np.ascontiguousarray(keys, dtype=np.uint64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] feats_a = np.ascontiguousarray(feats, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] query_a = np.ascontiguousarray(query, dtype=np.float64)
    cdef int64_t kk = <int64_t>k
    cdef uint64_t qk = <uint64_t>qkey
    cdef int64_t st = <int64_t>start
    cdef int64_t bud = <int64_t>budget
    cdef cnp.ndarray[cnp.int64_t, ndim=1] top_idx = np.empty(kk, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] top_sc = np.empty(kk, dtype=np.float64)
    cdef uint64_t[::1] ky = keys_a
    cdef double[:, ::1] ft = feats_a
    cdef double[::1] qv = query_a
    cdef int64_t[::1] ti = top_idx
    cdef double[::1] ts = top_sc
    cdef int64_t filled
    with nogil:
        filled = _scan_core(ky, ft, qk, qv, st, bud, kk, ti, ts)
    return top_idx[:filled].copy(), top_sc[:filled].copy()


def scan_topk_batch(keys, feats, qkeys, queries, starts, budget, k):
    """One scan per query row; see the fallback docstring for semantics."""
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] keys_a = np.ascontiguousarray(keys, dtype=np.uint64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] feats_a = np.ascontiguousarray(feats, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint64_t, ndim=1] qkeys_a = np.ascontiguousarray(qkeys, dtype=np.uint64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] queries_a = np.ascontiguousarray(queries, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] starts_a = np.ascontiguousarray(starts, dtype=np.int64)
    cdef int64_t nq = queries_a.shape[0]
    cdef int64_t kk = <int64_t>k
    cdef int64_t bud = <int64_t>budget
    cdef cnp.ndarray[cnp.int64_t, ndim=2] out_pos = np.full((nq, kk), -1, dtype=np.int64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out_sc = np.zeros((nq, kk), dtype=np.float64)
    cdef uint64_t[::1] ky = keys_a
    cdef double[:, ::1] ft = feats_a
    cdef uint64_t[::1] qks = qkeys_a
    cdef int64_t[::1] sts = starts_a
    cdef double[:, ::1] qs = queries_a
    cdef int64_t[:, ::1] po = out_pos
    cdef double[:, ::1] so = out_sc
    cdef int64_t i
    with nogil:
        for i in range(nq):
            _scan_core(ky, ft, qks[i], qs[i], sts[i], bud, kk,
                       po[i], so[i])
    return out_pos, out_sc
