"""Compare the compiled kernels against the pure-Python fallbacks.

Runs the cascade simulator and the index scan on identical inputs through
both implementations, checks the outputs agree, and prints min-of-3 wall
times. Usage: python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from groupcast._kernels import HAVE_COMPILED, pyfallback

if HAVE_COMPILED:
    from groupcast._kernels import _ckernels
else:
    _ckernels = None


def _time(fn, reps=3):
    best = float("inf")
    out = None
    for _ in range(reps):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _cascade_inputs(num_nodes=200, out_degree=4, seed=9):
    rng = np.random.default_rng(seed)
    indptr = np.arange(num_nodes + 1, dtype=np.int64) * out_degree
    indices = rng.integers(0, num_nodes, size=num_nodes * out_degree,
                           dtype=np.int64)
    probs = rng.uniform(0.02, 0.35, size=indices.shape[0])
    seeds = np.arange(5, dtype=np.int64)
    return indptr, indices, probs, seeds


def bench_cascade(reps=2000):
    indptr, indices, probs, seeds = _cascade_inputs()
    n = indptr.shape[0] - 1
    args = (indptr, indices, probs, seeds, n, reps, 7)
    t_py, (counts_py, spreads_py) = _time(
        lambda: pyfallback.cascade_counts(*args))
    row = f"cascade_counts  {n} nodes, {indices.shape[0]} edges, {reps} reps"
    if _ckernels is None:
        print(f"{row}  python {t_py * 1e3:8.1f} ms  (no compiled kernel)")
        return
    t_c, (counts_c, spreads_c) = _time(lambda: _ckernels.cascade_counts(*args))
    assert np.array_equal(counts_py, np.asarray(counts_c))
    assert np.array_equal(spreads_py, np.asarray(spreads_c))
    print(f"{row}  python {t_py * 1e3:8.1f} ms  compiled {t_c * 1e3:8.1f} ms"
          f"  speedup {t_py / t_c:5.1f}x")


def _scan_inputs(n=20000, d=32, nq=500, budget=400, k=10, seed=13):
    rng = np.random.default_rng(seed)
    keys = np.sort(rng.integers(0, 2 ** 48, size=n).astype(np.uint64))
    feats = rng.normal(size=(n, d))
    queries = rng.normal(size=(nq, d))
    qkeys = rng.integers(0, 2 ** 48, size=nq).astype(np.uint64)
    starts = np.searchsorted(keys, qkeys).astype(np.int64)
    return keys, feats, qkeys, queries, starts, budget, k


def bench_scan():
    keys, feats, qkeys, queries, starts, budget, k = _scan_inputs()
    args = (keys, feats, qkeys, queries, starts, budget, k)
    t_py, (pos_py, sc_py) = _time(lambda: pyfallback.scan_topk_batch(*args))
    row = (f"scan_topk_batch {queries.shape[0]} queries, budget {budget}, "
           f"k={k}, d={feats.shape[1]}")
    if _ckernels is None:
        print(f"{row}  python {t_py * 1e3:8.1f} ms  (no compiled kernel)")
        return
    t_c, (pos_c, sc_c) = _time(lambda: _ckernels.scan_topk_batch(*args))
    assert np.array_equal(pos_py, np.asarray(pos_c))
    np.testing.assert_allclose(sc_py, np.asarray(sc_c), rtol=1e-12)
    print(f"{row}  python {t_py * 1e3:8.1f} ms  compiled {t_c * 1e3:8.1f} ms"
          f"  speedup {t_py / t_c:5.1f}x")


if __name__ == "__main__":
    print(f"compiled kernels available: {HAVE_COMPILED}")
    bench_cascade()
    bench_scan()
