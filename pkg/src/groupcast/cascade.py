"""Item-conditioned influence cascades over the group graph.

Each undirected group-graph edge is mirrored into two directed propagation
edges. The influence probability of a directed edge fuses the source's
activity and willingness toward the item, the embedding similarity of the
two groups, and the target's willingness. Spread is simulated with
independent-cascade Monte Carlo (counter-based RNG, so runs are coupled
pathwise across probability changes) or with a fixed activation threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .model import ModelState, UnknownGroup, UnknownItem, sigmoid

__all__ = [
    "PropagationParams",
    "PropagationGraph",
    "CascadeResult",
    "InvalidParams",
    "activeness",
    "group_similarity",
    "willingness",
    "influence_probability",
    "build_propagation_graph",
    "update_propagation_graph",
    "simulate",
    "influence_score",
    "expected_spread_fraction",
]


class InvalidParams(ValueError):
    """Fusion weights out of range (each in [0,1], sum at most 1)."""


@dataclass
class PropagationParams:
    """Fusion weights and simulation settings for the cascade.

    gamma1 scales source activity times source willingness, gamma2 scales
    pairwise similarity, and the remainder goes to target willingness.
    """

    gamma1: float = 0.1
    gamma2: float = 0.7
    threshold: float = 0.5
    num_reps: int = 200
    seed: int = 0

    def validate(self):
        if not (0.0 <= self.gamma1 <= 1.0 and 0.0 <= self.gamma2 <= 1.0):
            raise InvalidParams("gamma1 and gamma2 must lie in [0, 1]")
        if self.gamma1 + self.gamma2 > 1.0:
            raise InvalidParams("gamma1 + gamma2 must not exceed 1")
        if not (0.0 <= self.threshold <= 1.0):
            raise InvalidParams("threshold must lie in [0, 1]")
        if self.num_reps < 1:
            raise InvalidParams("num_reps must be >= 1")
        return self


def activeness(recent: int, total: int) -> float:
    """Share of a group's interactions that fall in the recent window."""
    if total <= 0:
        return 0.0
    if recent < 0 or recent > total:
        raise ValueError("need 0 <= recent <= total")
    return recent / total


def group_similarity(eg_i: np.ndarray, eg_j: np.ndarray) -> float:
    """Cosine similarity mapped onto [0, 1]; zero vectors map to 0.5."""
    ni = np.linalg.norm(eg_i)
    nj = np.linalg.norm(eg_j)
    if ni == 0 or nj == 0:
        cos = 0.0
    else:
        cos = float(np.dot(eg_i, eg_j) / (ni * nj))
        cos = max(-1.0, min(1.0, cos))
    return (1.0 + cos) / 2.0


def willingness(e_v: np.ndarray, e_g: np.ndarray) -> float:
    """How receptive a group is to an item: sigmoid of the embedding dot."""
    return float(sigmoid(np.dot(e_v, e_g)))


def influence_probability(params: PropagationParams, activeness_i: float,
                          willingness_i: float, similarity_ij: float,
                          willingness_j: float) -> float:
    """Directed edge activation probability: the three-way fusion of source
    drive, pairwise similarity, and target receptiveness."""
    params.validate()
    return (params.gamma1 * activeness_i * willingness_i
            + params.gamma2 * similarity_ij
            + (1.0 - params.gamma1 - params.gamma2) * willingness_j)


@dataclass
class PropagationGraph:
    """Directed propagation graph for one item, in CSR form.

    Stores the ingredients (activity, willingness, per-edge similarity), so
    streamed updates can recompute only the touched probabilities.
    """

    item_id: str
    nodes: list[str]
    node_index: dict[str, int]
    indptr: np.ndarray
    indices: np.ndarray
    probs: np.ndarray
    similarity: np.ndarray          # aligned with indices
    node_activeness: np.ndarray
    node_willingness: np.ndarray
    activity: dict[str, tuple[int, int]] = field(default_factory=dict)
    params: PropagationParams = field(default_factory=PropagationParams)

    @property
    def num_edges(self) -> int:
        return int(self.indices.shape[0])

    def out_edges(self, node: str):
        i = self.node_index[node]
        for slot in range(self.indptr[i], self.indptr[i + 1]):
            yield int(self.indices[slot]), float(self.probs[slot])

    def _recompute_slot(self, src: int, slot: int) -> None:
        dst = int(self.indices[slot])
        self.probs[slot] = influence_probability(
            self.params,
            float(self.node_activeness[src]),
            float(self.node_willingness[src]),
            float(self.similarity[slot]),
            float(self.node_willingness[dst]),
        )

    def recompute_incident(self, node: str) -> None:
        """Refresh every directed edge into or out of the node."""
        i = self.node_index[node]
        for slot in range(self.indptr[i], self.indptr[i + 1]):
            self._recompute_slot(i, slot)
        for src in range(len(self.nodes)):
            for slot in range(self.indptr[src], self.indptr[src + 1]):
                if int(self.indices[slot]) == i:
                    self._recompute_slot(src, slot)


def build_propagation_graph(state: ModelState, graph, item_id: str,
                            activity: dict[str, tuple[int, int]],
                            params: PropagationParams,
                            item_vector: np.ndarray = None) -> PropagationGraph:
    """Mirror the group graph into a digraph with item-conditioned
    probabilities. ``activity`` maps group id to (recent, total) counts.

    ``item_vector`` substitutes for the stored item embedding; with it,
    ``item_id`` is only a label and need not be a known item.
    """
    params.validate()
    if item_vector is None:
        if item_id not in state.item_index:
            raise UnknownItem(item_id)
        e_v = state.Ev[state.item_index[item_id]]
    else:
        e_v = np.asarray(item_vector, dtype=np.float64)
    nodes = sorted(graph.nodes)
    for node in nodes:
        if node not in state.group_index:
            raise UnknownGroup(node)
    node_index = {n: i for i, n in enumerate(nodes)}

    act = np.zeros(len(nodes))
    will = np.zeros(len(nodes))
    for i, node in enumerate(nodes):
        recent, total = activity.get(node, (0, 0))
        act[i] = activeness(recent, total)
        will[i] = willingness(e_v, state.Eg[state.group_index[node]])

    adjacency = [sorted(node_index[m] for m in graph.neighbors(n)) for n in nodes]
    indptr = np.zeros(len(nodes) + 1, dtype=np.int64)
    for i, neigh in enumerate(adjacency):
        indptr[i + 1] = indptr[i] + len(neigh)
    indices = np.concatenate([np.asarray(a, dtype=np.int64) for a in adjacency]) \
        if indptr[-1] else np.zeros(0, dtype=np.int64)

    sim = np.zeros(indptr[-1])
    probs = np.zeros(indptr[-1])
    eg = {n: state.Eg[state.group_index[n]] for n in nodes}
    for i, node in enumerate(nodes):
        for slot in range(indptr[i], indptr[i + 1]):
            j = int(indices[slot])
            sim[slot] = group_similarity(eg[node], eg[nodes[j]])
            probs[slot] = influence_probability(params, act[i], will[i],
                                                sim[slot], will[j])
    return PropagationGraph(
        item_id=item_id, nodes=nodes, node_index=node_index,
        indptr=indptr, indices=indices, probs=probs, similarity=sim,
        node_activeness=act, node_willingness=will,
        activity=dict(activity), params=params,
    )


def update_propagation_graph(pgraph: PropagationGraph, state: ModelState,
                             interactions) -> PropagationGraph:
    """Streamed update for a batch of new interactions.

    Every interaction advances its group's activity counts; interactions on
    this graph's item additionally pin that group's willingness to one (it
    demonstrably wants the item). Only the touched groups' incident edges
    are recomputed.
    """
    touched = []
    for it in interactions:
        if it.group_id not in pgraph.node_index:
            continue
        recent, total = pgraph.activity.get(it.group_id, (0, 0))
        pgraph.activity[it.group_id] = (recent + 1, total + 1)
        i = pgraph.node_index[it.group_id]
        if it.item_id == pgraph.item_id:
            pgraph.node_willingness[i] = 1.0
        pgraph.node_activeness[i] = activeness(recent + 1, total + 1)
        if it.group_id not in touched:
            touched.append(it.group_id)
    for node in touched:
        pgraph.recompute_incident(node)
    return pgraph


@dataclass
class CascadeResult:
    """Simulation outcome: per-node activation frequency across
    replications, the spread (activated count) per replication, and the
    mean spread."""

    activation_frequency: np.ndarray
    spreads: np.ndarray
    num_reps: int

    @property
    def mean_spread(self) -> float:
        return float(self.spreads.mean()) if self.spreads.size else 0.0


def simulate(pgraph: PropagationGraph, seed_groups, params: PropagationParams,
             deterministic: bool = False) -> CascadeResult:
    """Run the cascade from the given seed groups.

    Monte Carlo mode draws one counter-keyed uniform per attempted edge and
    averages over ``params.num_reps`` replications. Deterministic mode
    activates across an edge iff its probability exceeds
    ``params.threshold`` (a single replication).
    """
    params.validate()
    for g in seed_groups:
        if g not in pgraph.node_index:
            raise UnknownGroup(g)
    n = len(pgraph.nodes)
    seeds = np.asarray(sorted(pgraph.node_index[g] for g in set(seed_groups)),
                       dtype=np.int64)
    if seeds.size == 0:
        return CascadeResult(np.zeros(n), np.zeros(0, dtype=np.int64), 0)
    if deterministic:
        probs = (pgraph.probs > params.threshold).astype(np.float64)
        counts, spreads = _kernels.cascade_counts(
            pgraph.indptr, pgraph.indices, probs, seeds, n, 1, params.seed)
        return CascadeResult(counts.astype(np.float64), spreads, 1)
    counts, spreads = _kernels.cascade_counts(
        pgraph.indptr, pgraph.indices, pgraph.probs, seeds, n,
        params.num_reps, params.seed)
    return CascadeResult(counts / params.num_reps, spreads, params.num_reps)


def influence_score(pgraph: PropagationGraph, result: CascadeResult,
                    group_id: str) -> float:
    """How often the group was activated by the simulated cascade."""
    if group_id not in pgraph.node_index:
        raise UnknownGroup(group_id)
    if result.num_reps == 0:
        return 0.0
    return float(result.activation_frequency[pgraph.node_index[group_id]])


def expected_spread_fraction(result: CascadeResult, num_nodes: int) -> float:
    """Mean spread normalized by graph size; 0 when nothing was simulated."""
    if num_nodes <= 0 or result.num_reps == 0:
        return 0.0
    return result.mean_spread / num_nodes
