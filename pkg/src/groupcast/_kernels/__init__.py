"""Kernel selection: compiled extension when available, numpy fallback otherwise."""

from . import pyfallback

try:  # pragma: no cover - exercised indirectly by the parity tests
    from . import _ckernels as _impl

    HAVE_COMPILED = True
except ImportError:  # pragma: no cover
    _impl = pyfallback
    HAVE_COMPILED = False

cascade_counts = _impl.cascade_counts
scan_topk = _impl.scan_topk
scan_topk_batch = _impl.scan_topk_batch
edge_uniform = _impl.edge_uniform
mix64 = _impl.mix64

__all__ = [
    "HAVE_COMPILED",
    "cascade_counts",
    "scan_topk",
    "scan_topk_batch",
    "edge_uniform",
    "mix64",
    "pyfallback",
]
