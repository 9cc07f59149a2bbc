"""Serving-side top-K index over group feature vectors.

Inner-product search is reduced to L2 proximity by norm augmentation, the
augmented vectors are projected to a few axes with FastMap, the projections
are quantized and bit-interleaved into Z-order keys, and entries are stored
in key order inside bounded blocks linked both ways and reachable through a
chained universal-hash table. Queries walk a fixed budget of entries around
the query key and score candidates with the raw inner product.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

__all__ = [
    "IndexConfig",
    "FastMapModel",
    "Block",
    "UgIndex",
    "EmptyIndex",
    "DimensionMismatch",
    "ChecksumMismatch",
    "VersionMismatch",
    "mips_to_l2",
    "augment_query",
    "select_reference_points",
    "fastmap_fit",
    "fastmap_project",
    "fastmap_project_batch",
    "quantize_projections",
    "compute_zorder",
    "compute_zorder_batch",
    "hash_key",
    "build_index",
    "lookup_block",
    "query_knn",
    "batch_query",
    "insert_entry",
    "save_index",
    "load_index",
]

_MERSENNE61 = (1 << 61) - 1


class EmptyIndex(ValueError):
    """Raised by operations that need at least one stored entry."""


class DimensionMismatch(ValueError):
    pass


class ChecksumMismatch(ValueError):
    """Persisted payload does not match its recorded checksum."""


class VersionMismatch(ValueError):
    """Persisted index has the wrong magic or format version."""


@dataclass
class IndexConfig:
    """Layout knobs: number of FastMap axes, entries per block, hash table
    size, and the scan budget multiplier (budget = ceil(mult * B / d) with d
    the stored feature dimensionality)."""

    num_axes: int = 8
    block_size: int = 64
    table_size: int = 1024
    budget_multiplier: float = 4.0
    seed: int = 0

    def validate(self):
        if self.num_axes < 1:
            raise ValueError("num_axes must be >= 1")
        if 64 // self.num_axes < 1:
            raise ValueError("num_axes must be <= 64")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if self.table_size < 1:
            raise ValueError("table_size must be >= 1")
        if self.budget_multiplier <= 0:
            raise ValueError("budget_multiplier must be positive")
        return self

    @property
    def bits_per_dim(self) -> int:
        return min(16, 64 // self.num_axes)


def mips_to_l2(features: np.ndarray) -> tuple[np.ndarray, float]:
    """Append sqrt(M^2 - ||z||^2) so every row has norm M and inner-product
    ranking against a zero-padded query becomes L2 ranking."""
    features = np.asarray(features, dtype=np.float64)
    norms = np.linalg.norm(features, axis=1)
    max_norm = float(norms.max()) if norms.size else 0.0
    pad = np.sqrt(np.maximum(max_norm**2 - norms**2, 0.0))
    return np.hstack([features, pad[:, None]]), max_norm


def augment_query(query: np.ndarray) -> np.ndarray:
    """Zero-pad the query to match the augmented corpus dimensionality."""
    query = np.asarray(query, dtype=np.float64)
    return np.concatenate([query, [0.0]])


@dataclass
class FastMapModel:
    """Per-axis pivot pair (original-space vectors plus their own full
    projections) and the quantization range of each output axis."""

    pivot_a: np.ndarray          # (m, D)
    pivot_b: np.ndarray          # (m, D)
    proj_a: np.ndarray           # (m, m) projections of each level-a pivot
    proj_b: np.ndarray           # (m, m)
    axis_len: np.ndarray         # (m,) pivot distance per axis, 0 = degenerate
    mins: np.ndarray = None      # quantization, filled by build
    maxs: np.ndarray = None

    @property
    def num_axes(self) -> int:
        return int(self.pivot_a.shape[0])


def _residual_d2(points, proj, vec, vec_proj, level):
    """Squared residual distance from every row to one pivot at a level."""
    d2 = np.sum((points - vec) ** 2, axis=1)
    if level > 0:
        d2 = d2 - np.sum((proj[:, :level] - vec_proj[:level]) ** 2, axis=1)
    return np.maximum(d2, 0.0)


def select_reference_points(points: np.ndarray, proj: np.ndarray, level: int,
                            sweeps: int = 3) -> tuple[int, int]:
    """Farthest-pair heuristic in the residual space of the given level:
    start at row 0, repeatedly jump to the point farthest from the current
    anchor. Returns (a, b) row indices."""
    a = 0
    b = 0
    for _ in range(sweeps):
        d2 = _residual_d2(points, proj, points[a], proj[a], level)
        b = int(np.argmax(d2))
        if b == a:
            break
        a, b = b, a
    return (a, b) if a < b else (b, a)


def fastmap_fit(points: np.ndarray, num_axes: int) -> tuple[FastMapModel, np.ndarray]:
    """Project the corpus onto ``num_axes`` pivot lines with residual
    distances; returns the model and the (n, m) projections."""
    points = np.asarray(points, dtype=np.float64)
    n, dim = points.shape
    proj = np.zeros((n, num_axes))
    pa = np.zeros((num_axes, dim))
    pb = np.zeros((num_axes, dim))
    ia = np.zeros(num_axes, dtype=np.int64)
    ib = np.zeros(num_axes, dtype=np.int64)
    axis_len = np.zeros(num_axes)
    for level in range(num_axes):
        a, b = select_reference_points(points, proj, level)
        pa[level] = points[a]
        pb[level] = points[b]
        ia[level], ib[level] = a, b
        d2a = _residual_d2(points, proj, points[a], proj[a], level)
        d2b = _residual_d2(points, proj, points[b], proj[b], level)
        dab2 = d2a[b]
        if dab2 <= 1e-24:
            axis_len[level] = 0.0
            continue  # all remaining residual distances are ~0
        dab = np.sqrt(dab2)
        axis_len[level] = dab
        proj[:, level] = (d2a + dab2 - d2b) / (2.0 * dab)
    model = FastMapModel(pivot_a=pa, pivot_b=pb,
                         proj_a=proj[ia].copy(), proj_b=proj[ib].copy(),
                         axis_len=axis_len)
    return model, proj


def fastmap_project(model: FastMapModel, query: np.ndarray) -> np.ndarray:
    """Out-of-sample projection using the stored pivots, level by level."""
    query = np.asarray(query, dtype=np.float64)
    if query.shape[0] != model.pivot_a.shape[1]:
        raise DimensionMismatch(
            f"query has {query.shape[0]} dims, model expects {model.pivot_a.shape[1]}"
        )
    m = model.num_axes
    out = np.zeros(m)
    for level in range(m):
        if model.axis_len[level] == 0.0:
            continue
        d2a = float(np.sum((query - model.pivot_a[level]) ** 2))
        d2b = float(np.sum((query - model.pivot_b[level]) ** 2))
        if level > 0:
            d2a -= float(np.sum((out[:level] - model.proj_a[level, :level]) ** 2))
            d2b -= float(np.sum((out[:level] - model.proj_b[level, :level]) ** 2))
        d2a = max(d2a, 0.0)
        d2b = max(d2b, 0.0)
        dab = model.axis_len[level]
        out[level] = (d2a + dab * dab - d2b) / (2.0 * dab)
    return out


def fastmap_project_batch(model: FastMapModel, queries: np.ndarray) -> np.ndarray:
    """Project many augmented queries at once; same recurrence as the
    scalar path, vectorized across rows."""
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != model.pivot_a.shape[1]:
        raise DimensionMismatch(
            f"queries have {queries.shape[1]} dims, model expects "
            f"{model.pivot_a.shape[1]}"
        )
    m = model.num_axes
    out = np.zeros((queries.shape[0], m))
    for level in range(m):
        if model.axis_len[level] == 0.0:
            continue
        d2a = np.sum((queries - model.pivot_a[level]) ** 2, axis=1)
        d2b = np.sum((queries - model.pivot_b[level]) ** 2, axis=1)
        if level > 0:
            d2a -= np.sum((out[:, :level] - model.proj_a[level, :level]) ** 2,
                          axis=1)
            d2b -= np.sum((out[:, :level] - model.proj_b[level, :level]) ** 2,
                          axis=1)
        np.maximum(d2a, 0.0, out=d2a)
        np.maximum(d2b, 0.0, out=d2b)
        dab = model.axis_len[level]
        out[:, level] = (d2a + dab * dab - d2b) / (2.0 * dab)
    return out


def quantize_projections(proj: np.ndarray, model: FastMapModel, bits: int) -> np.ndarray:
    """Map projections into integer cells per axis using the stored min/max
    range; out-of-range queries clip to the boundary cells."""
    proj = np.atleast_2d(np.asarray(proj, dtype=np.float64))
    levels = (1 << bits) - 1
    span = np.maximum(model.maxs - model.mins, 1e-300)
    cells = np.floor((proj - model.mins) / span * levels + 0.5)
    return np.clip(cells, 0, levels).astype(np.uint64)


def compute_zorder(cells, bits: int) -> int:
    """Interleave the per-axis cell bits, dimension-major: bit b of axis j
    lands at position b * num_axes + j."""
    cells = np.asarray(cells, dtype=np.uint64).reshape(-1)
    m = cells.shape[0]
    if m * bits > 64:
        raise DimensionMismatch(f"{m} axes at {bits} bits exceed 64-bit keys")
    key = 0
    for bit in range(bits):
        for j in range(m):
            key |= ((int(cells[j]) >> bit) & 1) << (bit * m + j)
    return key


def compute_zorder_batch(cells: np.ndarray, bits: int) -> np.ndarray:
    """Z-order keys for many cell rows at once."""
    cells = np.atleast_2d(np.asarray(cells, dtype=np.uint64))
    m = cells.shape[1]
    if m * bits > 64:
        raise DimensionMismatch(f"{m} axes at {bits} bits exceed 64-bit keys")
    keys = np.zeros(cells.shape[0], dtype=np.uint64)
    one = np.uint64(1)
    for bit in range(bits):
        for j in range(m):
            keys |= ((cells[:, j] >> np.uint64(bit)) & one) \
                << np.uint64(bit * m + j)
    return keys


def hash_key(key: int, a: int, b: int, table_size: int) -> int:
    """Universal hash ((a*key + b) mod (2^61 - 1)) mod table_size."""
    return ((a * int(key) + b) % _MERSENNE61) % table_size


@dataclass
class Block:
    """Contiguous run of at most ``block_size`` key-ordered entries; prev and
    next are block list indices (-1 at the ends)."""

    lo: int
    hi: int
    min_key: int
    max_key: int
    prev: int = -1
    next: int = -1


@dataclass
class UgIndex:
    config: IndexConfig
    ids: list[str] = field(default_factory=list)
    features: np.ndarray = None      # (n, d) raw scoring features, key order
    keys: np.ndarray = None          # (n,) uint64, ascending
    blocks: list[Block] = field(default_factory=list)
    table: list[list[int]] = field(default_factory=list)
    fastmap: FastMapModel = None
    max_norm: float = 0.0
    hash_a: int = 1
    hash_b: int = 0

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else int(self.features.shape[1])

    def default_budget(self) -> int:
        d = max(self.feature_dim, 1)
        return int(np.ceil(self.config.budget_multiplier * self.config.block_size / d))

    def query_key(self, query: np.ndarray) -> int:
        if query.shape[0] != self.feature_dim:
            raise DimensionMismatch(
                f"query has {query.shape[0]} dims, index stores {self.feature_dim}"
            )
        proj = fastmap_project(self.fastmap, augment_query(query))
        cells = quantize_projections(proj, self.fastmap, self.config.bits_per_dim)[0]
        return compute_zorder(cells, self.config.bits_per_dim)


def _build_blocks(index: UgIndex) -> None:
    """Slice the key-ordered arrays into blocks and hash each block by its
    minimum key into the chained table."""
    cfg = index.config
    n = index.size
    index.blocks = []
    bsz = cfg.block_size
    for lo in range(0, n, bsz):
        hi = min(lo + bsz, n)
        index.blocks.append(Block(lo=lo, hi=hi,
                                  min_key=int(index.keys[lo]),
                                  max_key=int(index.keys[hi - 1])))
    for i, blk in enumerate(index.blocks):
        blk.prev = i - 1
        blk.next = i + 1 if i + 1 < len(index.blocks) else -1
    index.table = [[] for _ in range(cfg.table_size)]
    for i, blk in enumerate(index.blocks):
        bucket = hash_key(blk.min_key, index.hash_a, index.hash_b, cfg.table_size)
        index.table[bucket].append(i)


def build_index(group_ids, features: np.ndarray, config: IndexConfig) -> UgIndex:
    """Build the full index over raw scoring features.

    The key geometry comes from the L2-augmented vectors; scoring keeps the
    raw features so a scan computes exact inner products.
    """
    config.validate()
    group_ids = list(group_ids)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] != len(group_ids):
        raise DimensionMismatch("features must be (len(group_ids), d)")
    rng = np.random.default_rng(config.seed)
    index = UgIndex(config=config,
                    hash_a=int(rng.integers(1, _MERSENNE61)),
                    hash_b=int(rng.integers(0, _MERSENNE61)))
    if not group_ids:
        index.features = np.zeros((0, 0))
        index.keys = np.zeros(0, dtype=np.uint64)
        index.table = [[] for _ in range(config.table_size)]
        return index

    augmented, max_norm = mips_to_l2(features)
    model, proj = fastmap_fit(augmented, config.num_axes)
    model.mins = proj.min(axis=0)
    model.maxs = proj.max(axis=0)
    cells = quantize_projections(proj, model, config.bits_per_dim)
    keys = np.array([compute_zorder(c, config.bits_per_dim) for c in cells],
                    dtype=np.uint64)
    order = np.argsort(keys, kind="stable")
    index.ids = [group_ids[i] for i in order]
    index.features = np.ascontiguousarray(features[order])
    index.keys = keys[order]
    index.fastmap = model
    index.max_norm = max_norm
    _build_blocks(index)
    return index


def lookup_block(index: UgIndex, key: int) -> int:
    """Find the block whose key range covers ``key`` via the hash table,
    falling back to the linked list when the covering block's minimum key
    hashes elsewhere. Returns a block list index, or -1 when empty."""
    if not index.blocks:
        return -1
    pos = int(np.searchsorted(index.keys, np.uint64(key), side="right")) - 1
    if pos < 0:
        return 0
    target = pos // index.config.block_size
    bucket = hash_key(index.blocks[target].min_key, index.hash_a, index.hash_b,
                      index.config.table_size)
    for blk_idx in index.table[bucket]:
        blk = index.blocks[blk_idx]
        if blk.min_key <= key <= blk.max_key or blk_idx == target:
            return blk_idx
    return target


def query_knn(index: UgIndex, query: np.ndarray, k: int, budget=None):
    """Top-k entries by inner product among the scanned candidates.

    Scans at most ``budget`` entries (default ceil(mult * B / d)) outward
    from the query key, both directions, nearest key first. An empty index
    returns an empty list.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if index.size == 0:
        return []
    query = np.asarray(query, dtype=np.float64)
    qkey = index.query_key(query)
    start = int(np.searchsorted(index.keys, np.uint64(qkey), side="left"))
    if budget is None:
        budget = index.default_budget()
    pos, scores = _kernels.scan_topk(index.keys, index.features,
                                     qkey, query, start, int(budget), int(k))
    return [(index.ids[int(p)], float(s)) for p, s in zip(pos, scores)]


def batch_query(index: UgIndex, queries: np.ndarray, k: int, budget=None):
    """Answer many queries in one pass.

    Key computation is vectorized across the batch and the scans run inside
    one kernel call; queries that collide on the same key walk identical
    windows. Returns (results, stats) where stats counts the distinct
    windows.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if index.size == 0:
        return [[] for _ in range(queries.shape[0])], {
            "num_queries": int(queries.shape[0]), "unique_keys": 0, "scans": 0}
    if queries.shape[1] != index.feature_dim:
        raise DimensionMismatch(
            f"queries have {queries.shape[1]} dims, index stores "
            f"{index.feature_dim}"
        )
    if budget is None:
        budget = index.default_budget()
    augmented = np.hstack([queries, np.zeros((queries.shape[0], 1))])
    proj = fastmap_project_batch(index.fastmap, augmented)
    cells = quantize_projections(proj, index.fastmap, index.config.bits_per_dim)
    qkeys = compute_zorder_batch(cells, index.config.bits_per_dim)
    starts = np.searchsorted(index.keys, qkeys, side="left").astype(np.int64)
    pos, scores = _kernels.scan_topk_batch(index.keys, index.features, qkeys,
                                           queries, starts, int(budget),
                                           int(k))
    # bulk-convert once; per-element int()/float() calls dominate otherwise
    pos_rows = np.asarray(pos).tolist()
    score_rows = np.asarray(scores).tolist()
    ids = index.ids
    results = [[(ids[p], s) for p, s in zip(prow, srow) if p >= 0]
               for prow, srow in zip(pos_rows, score_rows)]
    unique = int(np.unique(qkeys).shape[0])
    return results, {"num_queries": int(queries.shape[0]),
                     "unique_keys": unique, "scans": unique}


def insert_entry(index: UgIndex, group_id: str, feature: np.ndarray) -> None:
    """Insert one entry in key order and re-slice the block layout.

    The key uses the frozen projection model, so inserts never move existing
    keys; heavy drift calls for a rebuild.
    """
    if index.size == 0:
        raise EmptyIndex("insert into an empty index is a rebuild")
    feature = np.asarray(feature, dtype=np.float64)
    if feature.shape[0] != index.feature_dim:
        raise DimensionMismatch(
            f"feature has {feature.shape[0]} dims, index stores {index.feature_dim}"
        )
    proj = fastmap_project(index.fastmap, augment_query(feature))
    cells = quantize_projections(proj, index.fastmap, index.config.bits_per_dim)[0]
    key = compute_zorder(cells, index.config.bits_per_dim)
    pos = int(np.searchsorted(index.keys, np.uint64(key), side="right"))
    index.keys = np.insert(index.keys, pos, np.uint64(key))
    index.features = np.insert(index.features, pos, feature, axis=0)
    index.ids.insert(pos, group_id)
    _build_blocks(index)


# -- persistence -----------------------------------------------------------

_MAGIC = b"UGIX\x00\x01\x00\x00"
_FORMAT_VERSION = 1


def _payload_checksum(payload: bytes) -> int:
    return int.from_bytes(
        hashlib.blake2b(payload, digest_size=8).digest(), "little")


def save_index(index: UgIndex, path) -> None:
    """Versioned binary dump with a 64-bit payload checksum."""
    header = {
        "config": {
            "num_axes": index.config.num_axes,
            "block_size": index.config.block_size,
            "table_size": index.config.table_size,
            "budget_multiplier": index.config.budget_multiplier,
            "seed": index.config.seed,
        },
        "ids": index.ids,
        "max_norm": index.max_norm,
        "hash_a": index.hash_a,
        "hash_b": index.hash_b,
        "n": index.size,
        "d": index.feature_dim,
        "has_model": index.fastmap is not None,
    }
    chunks = [json.dumps(header).encode("utf-8")]
    arrays = []
    if index.size:
        arrays.append(index.keys.astype("<u8"))
        arrays.append(np.ascontiguousarray(index.features, dtype="<f8"))
    if index.fastmap is not None:
        fm = index.fastmap
        header["model_dims"] = [int(fm.pivot_a.shape[0]), int(fm.pivot_a.shape[1])]
        chunks[0] = json.dumps(header).encode("utf-8")
        for arr in (fm.pivot_a, fm.pivot_b, fm.proj_a, fm.proj_b,
                    fm.axis_len, fm.mins, fm.maxs):
            arrays.append(np.ascontiguousarray(arr, dtype="<f8"))
    payload = b"".join([struct.pack("<I", len(chunks[0])), chunks[0]]
                       + [a.tobytes() for a in arrays])
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IQ", _FORMAT_VERSION, _payload_checksum(payload)))
        fh.write(payload)


def load_index(path) -> UgIndex:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise VersionMismatch(f"bad magic {magic!r}")
        version, checksum = struct.unpack("<IQ", fh.read(12))
        if version != _FORMAT_VERSION:
            raise VersionMismatch(f"unsupported index format version {version}")
        payload = fh.read()
    if _payload_checksum(payload) != checksum:
        raise ChecksumMismatch("index payload failed checksum validation")
    hlen = struct.unpack("<I", payload[:4])[0]
    header = json.loads(payload[4: 4 + hlen].decode("utf-8"))
    off = 4 + hlen

    def take(shape):
        nonlocal off
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=off)
        off += count * 8
        return arr.reshape(shape).copy()

    index = UgIndex(config=IndexConfig(**header["config"]))
    index.ids = list(header["ids"])
    index.max_norm = float(header["max_norm"])
    index.hash_a = int(header["hash_a"])
    index.hash_b = int(header["hash_b"])
    n, d = int(header["n"]), int(header["d"])
    if n:
        index.keys = np.frombuffer(payload, dtype="<u8", count=n, offset=off).copy()
        off += n * 8
        index.features = take((n, d))
    else:
        index.keys = np.zeros(0, dtype=np.uint64)
        index.features = np.zeros((0, d))
    if header.get("has_model"):
        m, dim = header["model_dims"]
        index.fastmap = FastMapModel(
            pivot_a=take((m, dim)), pivot_b=take((m, dim)),
            proj_a=take((m, m)), proj_b=take((m, m)),
            axis_len=take((m,)), mins=take((m,)), maxs=take((m,)),
        )
    if n:
        _build_blocks(index)
    else:
        index.table = [[] for _ in range(index.config.table_size)]
    return index
