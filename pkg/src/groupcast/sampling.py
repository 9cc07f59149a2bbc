"""Variance-aware edge sampling for the group graph.

Clusters nodes on their embeddings, partitions edges by cluster pair, and
draws a sparse subgraph with independent per-edge Bernoulli trials whose
probabilities minimize the variance of the aggregation estimator under a
fixed expected sample size. A cheap degree-only approximation and a
two-sided envelope around it support streaming use, where part of the
previous sample is carried over deterministically.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SamplerConfig",
    "EdgeSetPartition",
    "SampledSubgraph",
    "EmptyGraph",
    "InfeasibleSampleSize",
    "cluster_nodes",
    "partition_edges",
    "normalized_edge_weights",
    "edge_scores",
    "optimal_probabilities",
    "approximate_probabilities",
    "bound_envelope",
    "sample_edges",
    "sample_overlap",
    "run_ges",
    "estimator_node",
    "estimator_total",
    "estimator_variance",
]


class EmptyGraph(ValueError):
    """The graph has no edges to sample from."""


class InfeasibleSampleSize(ValueError):
    """Expected sample size is not in [0, number of edges]."""


@dataclass
class SamplerConfig:
    """Knobs for the streaming edge sampler.

    ``sample_fraction`` sets the expected sample size as a fraction of the
    edge count; ``overlap_fraction`` is the share of eligible previously
    sampled edges carried over with probability one.
    """

    num_clusters: int = 10
    sample_fraction: float = 0.5
    overlap_fraction: float = 0.5
    use_exact: bool = False
    kmeans_iters: int = 20
    seed: int = 0

    def validate(self):
        if self.num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        if not (0.0 < self.sample_fraction <= 1.0):
            raise ValueError("sample_fraction must lie in (0, 1]")
        if not (0.0 <= self.overlap_fraction <= 1.0):
            raise ValueError("overlap_fraction must lie in [0, 1]")
        if self.kmeans_iters < 1:
            raise ValueError("kmeans_iters must be >= 1")
        return self


@dataclass
class EdgeSetPartition:
    """Edges grouped by the (unordered) cluster pair of their endpoints."""

    labels: dict[str, int]
    edge_sets: dict[tuple[int, int], list[tuple[str, str]]]

    def set_of(self, edge: tuple[str, str]) -> tuple[int, int]:
        a, b = sorted((self.labels[edge[0]], self.labels[edge[1]]))
        return (a, b)


@dataclass
class SampledSubgraph:
    """A Bernoulli edge sample with everything needed for unbiased
    aggregation estimates: per-edge inclusion probabilities, the realized
    mask, and which edges were carried over (probability one)."""

    edges: list[tuple[str, str]]
    probabilities: np.ndarray
    mask: np.ndarray
    carried: np.ndarray
    partition: EdgeSetPartition | None = None
    scores: np.ndarray | None = None

    def sampled_edges(self) -> list[tuple[str, str]]:
        return [e for e, m in zip(self.edges, self.mask) if m]

    def size(self) -> int:
        return int(self.mask.sum())

    def expected_size(self) -> float:
        return float(self.probabilities.sum())


def cluster_nodes(points: np.ndarray, k: int, seed: int = 0, iters: int = 20) -> np.ndarray:
    """K-Means with D^2-weighted seeding; returns a label per row.

    With k >= number of rows every point gets its own cluster.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if k >= n:
        return np.arange(n, dtype=np.int64)
    rng = np.random.default_rng(seed)
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[c] = points[rng.integers(n)]
        else:
            centers[c] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centers[c]) ** 2, axis=1))
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        dists = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(dists, axis=1)
        if np.array_equal(new_labels, labels) and _ > 0:
            break
        labels = new_labels
        for c in range(k):
            members = points[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
            else:
                # reseed an empty cluster at the point farthest from its center
                far = int(np.argmax(np.min(dists, axis=1)))
                centers[c] = points[far]
    return labels.astype(np.int64)


def partition_edges(graph, labels: dict[str, int], edges=None) -> EdgeSetPartition:
    if edges is None:
        edges = graph.edge_list()
    sets: dict[tuple[int, int], list[tuple[str, str]]] = {}
    if edges:
        la = np.fromiter((labels[u] for u, _ in edges), dtype=np.int64,
                         count=len(edges))
        lb = np.fromiter((labels[v] for _, v in edges), dtype=np.int64,
                         count=len(edges))
        lo, hi = np.minimum(la, lb), np.maximum(la, lb)
        packed = lo * (hi.max() + 1) + hi
        order = np.argsort(packed, kind="stable")
        sorted_keys = packed[order]
        starts = np.concatenate([[0], np.flatnonzero(np.diff(sorted_keys)) + 1,
                                 [len(edges)]])
        for a, b in zip(starts[:-1], starts[1:]):
            run = order[a:b]
            sets[(int(lo[run[0]]), int(hi[run[0]]))] = [edges[i] for i in run]
    return EdgeSetPartition(labels=dict(labels), edge_sets=sets)


def normalized_edge_weights(graph, edges=None) -> np.ndarray:
    """Symmetric degree normalization 1/sqrt(deg_u * deg_v) per edge."""
    if edges is None:
        edges = graph.edge_list()
    deg: dict[str, float] = {}
    du = np.empty(len(edges))
    dv = np.empty(len(edges))
    for i, (u, v) in enumerate(edges):
        w = deg.get(u)
        if w is None:
            w = deg[u] = float(graph.degree(u))
        du[i] = w
        w = deg.get(v)
        if w is None:
            w = deg[v] = float(graph.degree(v))
        dv[i] = w
    return 1.0 / np.sqrt(du * dv)


def edge_scores(graph, layer_embeddings, node_index: dict[str, int], edges=None) -> np.ndarray:
    """Per-edge importance: the norm of the layer-summed aggregation message
    carried by the edge, ||sum_l lhat * (x^l_u + x^l_v)||."""
    if edges is None:
        edges = graph.edge_list()
    lhat = normalized_edge_weights(graph, edges)
    iu = np.fromiter((node_index[u] for u, _ in edges), dtype=np.int64,
                     count=len(edges))
    iv = np.fromiter((node_index[v] for _, v in edges), dtype=np.int64,
                     count=len(edges))
    total = np.zeros((len(edges), layer_embeddings[0].shape[1]))
    for emb in layer_embeddings:
        total += emb[iu]
        total += emb[iv]
    return lhat * np.linalg.norm(total, axis=1)


def _clamp_probabilities(raw: np.ndarray, n_s: float) -> np.ndarray:
    """Scale to expected size n_s, capping at 1 and redistributing the
    excess proportionally among uncapped edges (the KKT-optimal split)."""
    m = raw.shape[0]
    if not (0.0 <= n_s <= m):
        raise InfeasibleSampleSize(f"expected size {n_s} outside [0, {m}]")
    total = raw.sum()
    if total <= 0:
        return np.full(m, n_s / m)
    probs = np.zeros(m)
    capped = np.zeros(m, dtype=bool)
    budget = n_s
    for _ in range(m):
        free = ~capped
        scale = budget / raw[free].sum() if raw[free].sum() > 0 else 0.0
        probs[free] = raw[free] * scale
        over = free & (probs > 1.0)
        if not over.any():
            break
        probs[over] = 1.0
        capped |= over
        budget = n_s - capped.sum()
        if budget <= 0:
            probs[~capped] = 0.0
            break
    # edges with zero raw mass under a uniform remainder split
    zero = (raw == 0) & ~capped
    if zero.any() and probs[zero].sum() == 0 and n_s >= m:
        probs[zero] = 1.0
    return np.clip(probs, 0.0, 1.0)


def optimal_probabilities(scores: np.ndarray, n_s: float) -> np.ndarray:
    """Variance-minimizing inclusion probabilities proportional to the edge
    scores, clamped to one with proportional redistribution."""
    return _clamp_probabilities(np.asarray(scores, dtype=np.float64), float(n_s))


def approximate_probabilities(lhat: np.ndarray, n_s: float) -> np.ndarray:
    """Degree-only surrogate: proportional to the normalized edge weight,
    so no embeddings are touched on the streaming path."""
    return _clamp_probabilities(np.asarray(lhat, dtype=np.float64), float(n_s))


def bound_envelope(graph, layer_embeddings, node_index, n_s, edges=None):
    """Per-edge interval that contains both the exact and the approximate
    inclusion probability before clamping.

    Uses the spread of the layer-summed endpoint magnitudes: with
    y_e = ||sum_l (x^l_u + x^l_v)|| and rho = y_min / y_max, the exact
    probability differs from the approximate one by at most that ratio in
    either direction.
    """
    if edges is None:
        edges = graph.edge_list()
    lhat = normalized_edge_weights(graph, edges)
    total = np.zeros((len(edges), layer_embeddings[0].shape[1]))
    for emb in layer_embeddings:
        for i, (u, v) in enumerate(edges):
            total[i] += emb[node_index[u]] + emb[node_index[v]]
    y = np.linalg.norm(total, axis=1)
    approx = n_s * lhat / lhat.sum()
    if y.max() <= 0:
        return approx.copy(), approx.copy()
    positive = y[y > 0]
    rho = positive.min() / y.max()
    return approx * rho, approx / rho if rho > 0 else approx.copy()


def sample_edges(probabilities: np.ndarray, seed: int = 0) -> np.ndarray:
    """Independent Bernoulli draw per edge (Poisson sampling)."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    if ((probabilities < 0) | (probabilities > 1)).any():
        raise ValueError("probabilities must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    return rng.random(probabilities.shape[0]) < probabilities


def sample_overlap(prev_edges, changed_nodes, graph, fraction: float):
    """Deterministic carry-over between consecutive samples.

    Eligible edges are previously sampled edges that still exist and touch a
    node whose embedding drifted. The top ceil(fraction * eligible) by
    endpoint degree sum are kept, ties broken by edge id.
    """
    changed = set(changed_nodes)
    eligible = []
    for u, v in prev_edges:
        key = frozenset((u, v))
        if key not in graph.edges:
            continue
        if u in changed or v in changed:
            eligible.append(tuple(sorted((u, v))))
    if not eligible or fraction <= 0:
        return []
    eligible.sort(key=lambda e: (-(graph.degree(e[0]) + graph.degree(e[1])), e))
    keep = int(np.ceil(fraction * len(eligible)))
    return eligible[:keep]


def run_ges(graph, layer_embeddings, node_index, config: SamplerConfig,
            num_samples=None, prev_edges=None, changed_nodes=None) -> SampledSubgraph:
    """One sampling round: cluster, partition, choose probabilities, draw.

    Carried-over edges enter with probability one; fresh edges are drawn
    from the remaining pool with the remaining expected budget.
    """
    config.validate()
    edges = graph.edge_list()
    if not edges:
        raise EmptyGraph("graph has no edges")
    n_s = float(num_samples) if num_samples is not None else float(
        np.ceil(config.sample_fraction * len(edges))
    )
    if not (0.0 <= n_s <= len(edges)):
        raise InfeasibleSampleSize(f"expected size {n_s} outside [0, {len(edges)}]")

    labels_arr = cluster_nodes(layer_embeddings[0], config.num_clusters,
                               config.seed, config.kmeans_iters)
    ordered_nodes = sorted(node_index, key=node_index.get)
    labels = {node: int(labels_arr[node_index[node]]) for node in ordered_nodes
              if node_index[node] < len(labels_arr)}
    for node in graph.nodes:
        labels.setdefault(node, 0)
    partition = partition_edges(graph, labels, edges)

    carried_edges = []
    if prev_edges:
        carried_edges = sample_overlap(prev_edges, changed_nodes or [], graph,
                                       config.overlap_fraction)
    scores = (edge_scores(graph, layer_embeddings, node_index, edges)
              if config.use_exact else normalized_edge_weights(graph, edges))

    # edge_list and sample_overlap both emit (min, max) ordered tuples
    if carried_edges:
        carried_set = set(carried_edges)
        carried = np.array([e in carried_set for e in edges])
    else:
        carried = np.zeros(len(edges), dtype=bool)
    budget = max(n_s - carried.sum(), 0.0)
    fresh_idx = np.flatnonzero(~carried)
    probs = np.ones(len(edges))
    if fresh_idx.size:
        budget = min(budget, float(fresh_idx.size))
        probs[fresh_idx] = _clamp_probabilities(scores[fresh_idx], budget)

    mask = np.ones(len(edges), dtype=bool)
    fresh_mask = sample_edges(probs[fresh_idx], config.seed) if fresh_idx.size else []
    mask[fresh_idx] = fresh_mask
    return SampledSubgraph(edges=edges, probabilities=probs, mask=mask,
                           carried=carried, partition=partition,
                           scores=np.asarray(scores, dtype=np.float64))


def estimator_node(sample: SampledSubgraph, graph, layer_embeddings,
                   node_index, node: str, layer: int) -> np.ndarray:
    """Aggregation estimate for one node and layer from the sampled edges.

    Inverse-weighted by the conditional inclusion probability
    p_e / p_node, where p_node = 1 - prod(1 - p_e) over incident edges, so
    the estimate is unbiased conditional on the node being touched.
    """
    emb = layer_embeddings[layer]
    incident = [(i, e) for i, e in enumerate(sample.edges) if node in e]
    if not incident:
        return np.zeros(emb.shape[1])
    p_node = 1.0 - np.prod([1.0 - sample.probabilities[i] for i, _ in incident])
    if p_node <= 0:
        return np.zeros(emb.shape[1])
    out = np.zeros(emb.shape[1])
    for i, (u, v) in incident:
        if not sample.mask[i]:
            continue
        other = v if u == node else u
        lhat = 1.0 / np.sqrt(graph.degree(u) * graph.degree(v))
        alpha = sample.probabilities[i] / p_node
        out += lhat * emb[node_index[other]] / alpha
    return out


def estimator_total(sample: SampledSubgraph, graph, layer_embeddings,
                    node_index) -> np.ndarray:
    """Whole-graph estimate: sum over sampled edges and layers of the edge
    message divided by its inclusion probability. Unbiased for the full sum."""
    dim = layer_embeddings[0].shape[1]
    out = np.zeros(dim)
    for i, (u, v) in enumerate(sample.edges):
        if not sample.mask[i] or sample.probabilities[i] <= 0:
            continue
        lhat = 1.0 / np.sqrt(graph.degree(u) * graph.degree(v))
        msg = np.zeros(dim)
        for emb in layer_embeddings:
            msg += lhat * (emb[node_index[u]] + emb[node_index[v]])
        out += msg / sample.probabilities[i]
    return out


def estimator_variance(scores: np.ndarray, probabilities: np.ndarray) -> float:
    """Closed-form variance of the whole-graph estimator under independent
    Bernoulli sampling: sum ||b_e||^2 / p_e - sum ||b_e||^2."""
    scores = np.asarray(scores, dtype=np.float64)
    probabilities = np.asarray(probabilities, dtype=np.float64)
    var = 0.0
    for s, p in zip(scores, probabilities):
        if s == 0:
            continue
        if p <= 0:
            raise ValueError("zero probability on an edge with nonzero score")
        var += s * s / p - s * s
    return float(var)
