"""End-to-end engine: snapshot training, temporal profiles, influence
cascades, index construction, streaming recommendation, and evaluation.

The engine trains the group model snapshot by snapshot (optionally on a
sampled edge subgraph), summarizes each group's embedding trajectory into
long- and short-term profiles, stores per-group influence scores from a
reference cascade, and serves top-K in both directions: items for a group
by brute-force scoring, groups for an item through the key-ordered index.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import _kernels, cascade, index as index_mod, sampling, temporal
from .ingest import Dataset, GroupGraph, build_group_graph, split_temporal
from .model import (GgcnConfig, ModelState, UnknownGroup, init_embeddings,
                    load_state, new_state, save_state, train)

__all__ = [
    "EngineConfig",
    "Engine",
    "parse_config",
    "config_hash",
    "run_training",
    "build_serving_index",
    "group_feature",
    "item_query",
    "recommend_items",
    "recommend_groups",
    "recommend_stream",
    "hr_at_k",
    "ndcg_at_k",
    "evaluate",
    "write_metrics_csv",
    "write_manifest",
    "save_engine",
    "load_engine",
]


@dataclass
class EngineConfig:
    """Flat engine configuration; every field can come from a key=value
    config file and be overridden by a same-named CLI flag."""

    seed: int = 0
    # group model
    embed_dim: int = 32
    latent_dim: int = 16
    attr_dim: int = 16
    num_layers: int = 2
    alpha_v: float = 0.8
    alpha_r: float = 1e-6
    lr_1: float = 1e-1
    lambda_1: float = 1e-6
    epochs: int = 40
    negatives_per_positive: int = 1
    # temporal split and profiles
    num_snapshots: int = 4
    train_fraction: float = 0.8
    hidden_dim: int = 16
    lr_2: float = 1e-2
    lambda_2: float = 1e-5
    rnn_epochs: int = 200
    short_window: int = 2
    # edge sampling
    use_ges: bool = True
    num_clusters: int = 10
    sample_fraction: float = 0.5
    overlap_fraction: float = 0.5
    use_exact_sampling: bool = False
    # influence cascade
    use_dyic: bool = True
    gamma1: float = 0.1
    gamma2: float = 0.7
    threshold: float = 0.5
    num_reps: int = 200
    sigma_items: int = 20
    # index
    use_index: bool = True
    num_axes: int = 8
    block_size: int = 64
    table_size: int = 1024
    budget_multiplier: float = 4.0
    # serving and graph construction
    top_k: int = 8
    min_shared_users: int = 1

    def ggcn(self) -> GgcnConfig:
        return GgcnConfig(
            embed_dim=self.embed_dim, latent_dim=self.latent_dim,
            attr_dim=self.attr_dim, num_layers=self.num_layers,
            alpha_v=self.alpha_v, alpha_r=self.alpha_r, lr_1=self.lr_1,
            lambda_1=self.lambda_1,
            negatives_per_positive=self.negatives_per_positive,
            seed=self.seed,
        )

    def rnn(self) -> temporal.RnnConfig:
        return temporal.RnnConfig(
            hidden_dim=self.hidden_dim, lr_2=self.lr_2, lambda_2=self.lambda_2,
            epochs=self.rnn_epochs, short_window=self.short_window,
            seed=self.seed,
        )

    def sampler(self) -> sampling.SamplerConfig:
        return sampling.SamplerConfig(
            num_clusters=self.num_clusters, sample_fraction=self.sample_fraction,
            overlap_fraction=self.overlap_fraction,
            use_exact=self.use_exact_sampling, seed=self.seed,
        )

    def propagation(self) -> cascade.PropagationParams:
        return cascade.PropagationParams(
            gamma1=self.gamma1, gamma2=self.gamma2, threshold=self.threshold,
            num_reps=self.num_reps, seed=self.seed,
        )

    def index(self) -> index_mod.IndexConfig:
        return index_mod.IndexConfig(
            num_axes=self.num_axes, block_size=self.block_size,
            table_size=self.table_size,
            budget_multiplier=self.budget_multiplier, seed=self.seed,
        )


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False,
               "yes": True, "no": False}


def _coerce(name: str, raw: str, kind) -> object:
    if kind is bool:
        word = raw.strip().lower()
        if word not in _BOOL_WORDS:
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return _BOOL_WORDS[word]
    return kind(raw)


def parse_config(path=None, overrides=None) -> EngineConfig:
    """Read key=value lines (# starts a comment) and apply overrides.

    Unknown keys fail loudly; values coerce to the field's declared type.
    """
    values: dict[str, object] = {}
    by_name = {f.name: f.type for f in fields(EngineConfig)}
    types = {"int": int, "float": float, "bool": bool, "str": str}
    if path is not None:
        with open(path) as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{line_no}: expected key=value")
                key, raw = (part.strip() for part in line.split("=", 1))
                if key not in by_name:
                    raise ValueError(f"{path}:{line_no}: unknown key {key!r}")
                values[key] = _coerce(key, raw, types[by_name[key]])
    for key, raw in (overrides or {}).items():
        if key not in by_name:
            raise ValueError(f"unknown config key {key!r}")
        kind = types[by_name[key]]
        values[key] = _coerce(key, raw, kind) if isinstance(raw, str) else raw
    return EngineConfig(**values)


def config_hash(config: EngineConfig) -> str:
    blob = json.dumps(dataclasses.asdict(config), sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class Engine:
    config: EngineConfig
    state: ModelState
    graph: GroupGraph
    long_model: temporal.RnnAutoencoder = None
    short_model: temporal.RnnAutoencoder = None
    profiles: dict[str, temporal.GroupProfile] = field(default_factory=dict)
    index: index_mod.UgIndex = None
    activity: dict[str, tuple[int, int]] = field(default_factory=dict)
    influence: np.ndarray = None        # per group index, reference cascade
    snapshot_sizes: list[int] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)


def _ges_subgraph(graph: GroupGraph, state: ModelState,
                  config: EngineConfig, prev_edges, changed_nodes,
                  round_num: int = 0):
    """Sampled copy of the group graph for one snapshot's training."""
    sampler = config.sampler()
    # offset the draw per round so consecutive snapshots explore fresh
    # edges instead of redrawing the same subset
    sampler.seed = sampler.seed + round_num
    sample = sampling.run_ges(
        graph, [state.Eg], state.group_index, sampler,
        prev_edges=prev_edges, changed_nodes=changed_nodes)
    sub = GroupGraph()
    for node in graph.nodes:
        sub.add_node(node)
    for (u, v), keep in zip(sample.edges, sample.mask):
        if keep:
            sub.add_edge(u, v, graph.edges[frozenset((u, v))])
    return sub, sample.sampled_edges()


def run_training(dataset: Dataset, config: EngineConfig,
                 graph: GroupGraph = None):
    """Train the full engine; returns (engine, split).

    Per snapshot: optionally sample the graph, train the group model, and
    record every group's embedding. Afterwards the trajectory autoencoder
    produces long/short profiles whose mean replaces the final group
    embeddings for serving.
    """
    t0 = time.perf_counter()
    timings: dict[str, float] = {}
    if graph is None:
        graph = build_group_graph(dataset, config.min_shared_users)
    split = split_temporal(dataset.interactions, config.train_fraction,
                           config.num_snapshots)
    state = new_state(dataset, config.ggcn())
    init_embeddings(state, graph)

    trajectory = []
    prev_edges: list = []
    changed: set = set()
    t_train = time.perf_counter()
    for round_num, snapshot in enumerate(split.snapshots):
        if config.use_ges and graph.edges:
            train_graph, prev_edges = _ges_subgraph(graph, state, config,
                                                    prev_edges, changed,
                                                    round_num)
        else:
            train_graph = graph
        before = state.Eg.copy()
        train(state, train_graph, snapshot, config.ggcn(), config.epochs)
        moved = np.linalg.norm(state.Eg - before, axis=1) > 1e-9
        changed = {state.group_ids[i] for i in np.flatnonzero(moved)}
        trajectory.append(state.Eg.copy())
    timings["train_s"] = time.perf_counter() - t_train

    t_rnn = time.perf_counter()
    batch = np.stack(trajectory, axis=1)  # (n_groups, T, d)
    long_model = temporal.new_autoencoder(config.embed_dim, config.rnn())
    temporal.train_snapshot_sequence(long_model, batch)
    short_model = temporal.fine_tune_short_term(long_model, batch)
    sequences = {g: batch[i] for i, g in enumerate(state.group_ids)}
    profiles = temporal.build_profiles(long_model, short_model, sequences)
    serving = np.stack([temporal.serving_embedding(profiles[g])
                        for g in state.group_ids])
    state.Eg = serving
    timings["temporal_s"] = time.perf_counter() - t_rnn

    activity = _activity_counts(split)
    engine = Engine(config=config, state=state, graph=graph,
                    long_model=long_model, short_model=short_model,
                    profiles=profiles, activity=activity,
                    snapshot_sizes=[len(s) for s in split.snapshots],
                    timings=timings)
    t_inf = time.perf_counter()
    engine.influence = _reference_influence(engine)
    timings["influence_s"] = time.perf_counter() - t_inf
    if config.use_index:
        t_idx = time.perf_counter()
        engine.index = build_serving_index(engine)
        timings["index_s"] = time.perf_counter() - t_idx
    timings["total_s"] = time.perf_counter() - t0
    return engine, split


def _activity_counts(split) -> dict[str, tuple[int, int]]:
    total: dict[str, int] = {}
    recent: dict[str, int] = {}
    for snap_i, snapshot in enumerate(split.snapshots):
        last = snap_i == len(split.snapshots) - 1
        for it in snapshot:
            total[it.group_id] = total.get(it.group_id, 0) + 1
            if last:
                recent[it.group_id] = recent.get(it.group_id, 0) + 1
    return {g: (recent.get(g, 0), total[g]) for g in total}


def _reference_influence(engine: Engine) -> np.ndarray:
    """Item-agnostic per-group influence: activation frequency under a
    cascade of the mean item embedding, seeded by the busiest recent groups
    (at most one tenth of the graph)."""
    state = engine.state
    n = state.num_groups
    if not engine.config.use_dyic or not engine.graph.edges or state.num_items == 0:
        return np.zeros(n)
    virtual = state.Ev.mean(axis=0)
    pgraph = cascade.build_propagation_graph(
        state, engine.graph, "__reference__", engine.activity,
        engine.config.propagation(), item_vector=virtual)
    ranked = sorted((g for g, (r, _) in engine.activity.items()
                     if r > 0 and g in pgraph.node_index),
                    key=lambda g: (-engine.activity[g][0], g))
    seeds = ranked[: max(1, len(pgraph.nodes) // 10)] if ranked else []
    if not seeds:
        return np.zeros(n)
    result = cascade.simulate(pgraph, seeds, engine.config.propagation())
    out = np.zeros(n)
    for node, i in pgraph.node_index.items():
        out[state.group_index[node]] = result.activation_frequency[i]
    return out


def group_feature(engine: Engine, group_id: str) -> np.ndarray:
    """Stored index feature: [history-augmented embedding | attributes |
    influence score]. Its inner product with :func:`item_query` equals the
    full relevance score."""
    state = engine.state
    if group_id not in state.group_index:
        raise UnknownGroup(group_id)
    g = state.group_index[group_id]
    z = _z_vector(state, g)
    s_g = _influence_of(engine, g)
    return np.concatenate([z, state.X[g], [s_g]])


def _influence_of(engine: Engine, g: int) -> float:
    if engine.influence is None or g >= len(engine.influence):
        return 0.0  # groups that arrived after the reference cascade
    return float(engine.influence[g])


def item_query(engine: Engine, item_vector: np.ndarray) -> np.ndarray:
    """Query twin of :func:`group_feature` for an item embedding."""
    cfg = engine.config
    pad = np.zeros(engine.state.X.shape[1])
    return np.concatenate([(1.0 - cfg.alpha_r) * np.asarray(item_vector),
                           pad, [cfg.alpha_r]])


def build_serving_index(engine: Engine) -> index_mod.UgIndex:
    feats = np.stack([group_feature(engine, g)
                      for g in engine.state.group_ids]) \
        if engine.state.num_groups else np.zeros((0, 0))
    return index_mod.build_index(engine.state.group_ids, feats,
                                 engine.config.index())


def _z_vector(state: ModelState, g: int) -> np.ndarray:
    z = state.Eg[g].copy()
    hist = state.history[g]
    if hist:
        z += np.sum(state.Ev[sorted(hist)], axis=0) / np.sqrt(len(hist))
    return z


def recommend_items(engine: Engine, group_id: str, k: int,
                    exclude_history: bool = True):
    """Top-k items for a group by exact scoring over all items."""
    state = engine.state
    if group_id not in state.group_index:
        raise UnknownGroup(group_id)
    g = state.group_index[group_id]
    cfg = engine.config
    z = _z_vector(state, g)
    s_g = _influence_of(engine, g)
    scores = (1.0 - cfg.alpha_r) * (state.Ev @ z) + cfg.alpha_r * s_g
    order = np.lexsort((np.arange(scores.shape[0]), -scores))
    out = []
    hist = state.history[g]
    for v in order:
        if exclude_history and int(v) in hist:
            continue
        out.append((state.item_ids[int(v)], float(scores[int(v)])))
        if len(out) == k:
            break
    return out


def recommend_groups(engine: Engine, item_id: str, k: int):
    """Top-k groups for an item: through the index when built, otherwise by
    brute-force scoring of every stored group feature."""
    state = engine.state
    if item_id not in state.item_index:
        raise KeyError(item_id)
    query = item_query(engine, state.Ev[state.item_index[item_id]])
    if engine.index is not None and engine.index.size:
        return index_mod.query_knn(engine.index, query, k)
    feats = np.stack([group_feature(engine, g) for g in state.group_ids])
    scores = feats @ query
    order = np.lexsort((np.arange(scores.shape[0]), -scores))[:k]
    return [(state.group_ids[int(i)], float(scores[int(i)])) for i in order]


def recommend_stream(engine: Engine, interactions, k: int = None):
    """Fold a batch of new interactions into the engine and answer: for each
    distinct new item, which groups should it be pushed to next.

    Updates group histories, the recent-group window, the dynamic item
    embeddings, the activity counts, and (when enabled) inserts previously
    unseen groups into the serving index.
    """
    from .model import extend_embeddings, update_item_embedding

    state = engine.state
    k = engine.config.top_k if k is None else k
    new_groups = []
    for it in interactions:
        if it.group_id not in state.group_index:
            new_groups.append(it.group_id)
        g = state.ensure_group(it.group_id)
        v = state.ensure_item(it.item_id)
        recent, total = engine.activity.get(it.group_id, (0, 0))
        engine.activity[it.group_id] = (recent + 1, total + 1)
        state.history[g].add(v)
    extend_embeddings(state)

    touched_items: list[str] = []
    window: dict[int, list[int]] = {}
    for it in interactions:
        g = state.group_index[it.group_id]
        v = state.item_index[it.item_id]
        groups = window.setdefault(v, [])
        if g not in groups:
            groups.append(g)
        if it.item_id not in touched_items:
            touched_items.append(it.item_id)
    state.recent_groups = window
    for item_id in touched_items:
        v = state.item_index[item_id]
        state.Ev[v] = update_item_embedding(state, item_id)

    if engine.index is not None and engine.index.size:
        for group_id in new_groups:
            index_mod.insert_entry(engine.index, group_id,
                                   group_feature(engine, group_id))
    return {item_id: recommend_groups(engine, item_id, k)
            for item_id in touched_items}


# -- evaluation ------------------------------------------------------------


def hr_at_k(ranked_ids, relevant_id, k: int) -> float:
    """1.0 when the relevant id appears in the first k, else 0.0."""
    return 1.0 if relevant_id in list(ranked_ids)[:k] else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    """Single-relevant-item NDCG: 1/log2(rank+1) within the cutoff, else 0.

    ``rank`` is 1-based.
    """
    if rank < 1:
        raise ValueError("rank is 1-based")
    if rank > k:
        return 0.0
    return 1.0 / float(np.log2(rank + 1))


def evaluate(engine: Engine, test_interactions, ks=(5, 10)) -> dict:
    """Leave-history-out ranking metrics plus the influence-spread fraction.

    For each test event the true item is ranked against every item outside
    the group's training history. Events whose group or item never appeared
    in training are skipped and counted.
    """
    state = engine.state
    cfg = engine.config
    per_k_hits = {k: [] for k in ks}
    per_k_ndcg = {k: [] for k in ks}
    skipped = 0
    for it in test_interactions:
        if it.group_id not in state.group_index or it.item_id not in state.item_index:
            skipped += 1
            continue
        g = state.group_index[it.group_id]
        v = state.item_index[it.item_id]
        z = _z_vector(state, g)
        s_g = _influence_of(engine, g)
        scores = (1.0 - cfg.alpha_r) * (state.Ev @ z) + cfg.alpha_r * s_g
        hist = state.history[g]
        mask = np.ones(scores.shape[0], dtype=bool)
        if hist:
            mask[sorted(hist)] = False
        mask[v] = True
        rank = 1 + int(np.sum(scores[mask] > scores[v]))
        for k in ks:
            per_k_hits[k].append(1.0 if rank <= k else 0.0)
            per_k_ndcg[k].append(ndcg_at_k(rank, k) if rank <= k else 0.0)

    metrics: dict[str, float] = {}
    n_eval = len(next(iter(per_k_hits.values()))) if ks else 0
    for k in ks:
        metrics[f"hr@{k}"] = float(np.mean(per_k_hits[k])) if per_k_hits[k] else 0.0
        metrics[f"ndcg@{k}"] = float(np.mean(per_k_ndcg[k])) if per_k_ndcg[k] else 0.0
    metrics["sigma_inf"] = _sigma_inf(engine, test_interactions)
    metrics["num_test_events"] = float(len(list(test_interactions)))
    metrics["num_evaluated"] = float(n_eval)
    metrics["num_skipped"] = float(skipped)
    return metrics


def _sigma_inf(engine: Engine, test_interactions) -> float:
    """Mean expected spread fraction over the first ``sigma_items`` distinct
    test items, cascading from the item's training groups."""
    if not engine.config.use_dyic or not engine.graph.edges:
        return 0.0
    state = engine.state
    items: list[str] = []
    for it in test_interactions:
        if it.item_id in state.item_index and it.item_id not in items:
            items.append(it.item_id)
        if len(items) >= engine.config.sigma_items:
            break
    fractions = []
    params = engine.config.propagation()
    for item_id in items:
        v = state.item_index[item_id]
        seeds = [state.group_ids[g] for g in range(state.num_groups)
                 if v in state.history[g]
                 and state.group_ids[g] in engine.graph.nodes]
        if not seeds:
            continue
        pgraph = cascade.build_propagation_graph(state, engine.graph, item_id,
                                                 engine.activity, params)
        result = cascade.simulate(pgraph, seeds, params)
        fractions.append(cascade.expected_spread_fraction(result, len(pgraph.nodes)))
    return float(np.mean(fractions)) if fractions else 0.0


def write_metrics_csv(metrics: dict, path) -> None:
    """Metric report: stable ordering, full-precision values, no timings, so
    identical runs produce identical bytes."""
    with open(path, "w", newline="") as fh:
        fh.write("metric,value\n")
        for name in sorted(metrics):
            fh.write(f"{name},{repr(float(metrics[name]))}\n")


def write_manifest(path, config: EngineConfig, timings: dict, extra=None) -> None:
    """Run manifest: config hash, kernel provenance, wall-clock timings.

    Timings vary run to run, which is why they live here and not in the
    metric report.
    """
    payload = {
        "config_hash": config_hash(config),
        "config": dataclasses.asdict(config),
        "compiled_kernels": _kernels.HAVE_COMPILED,
        "timings": {k: round(v, 6) for k, v in sorted(timings.items())},
    }
    payload.update(extra or {})
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


# -- persistence -----------------------------------------------------------


def save_engine(engine: Engine, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    save_state(engine.state, os.path.join(out_dir, "model.bin"))
    if engine.index is not None:
        index_mod.save_index(engine.index, os.path.join(out_dir, "index.bin"))
    temporal.export_profiles_csv(engine.profiles,
                                 os.path.join(out_dir, "profiles.csv"))
    meta = {
        "config": dataclasses.asdict(engine.config),
        "activity": {g: list(v) for g, v in engine.activity.items()},
        "influence": [] if engine.influence is None
        else [float(x) for x in engine.influence],
        "snapshot_sizes": engine.snapshot_sizes,
        "graph": {
            "nodes": sorted(engine.graph.nodes),
            "edges": [[u, v, engine.graph.edges[frozenset((u, v))]]
                      for u, v in engine.graph.edge_list()],
        },
    }
    with open(os.path.join(out_dir, "engine.json"), "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_engine(out_dir) -> Engine:
    with open(os.path.join(out_dir, "engine.json")) as fh:
        meta = json.load(fh)
    config = EngineConfig(**meta["config"])
    state = load_state(os.path.join(out_dir, "model.bin"))
    graph = GroupGraph()
    for node in meta["graph"]["nodes"]:
        graph.add_node(node)
    for u, v, w in meta["graph"]["edges"]:
        graph.add_edge(u, v, w)
    engine = Engine(config=config, state=state, graph=graph)
    engine.activity = {g: tuple(v) for g, v in meta["activity"].items()}
    engine.influence = np.asarray(meta["influence"], dtype=np.float64) \
        if meta["influence"] else np.zeros(state.num_groups)
    engine.snapshot_sizes = list(meta["snapshot_sizes"])
    profile_path = os.path.join(out_dir, "profiles.csv")
    if os.path.exists(profile_path):
        engine.profiles = temporal.load_profiles_csv(profile_path)
    index_path = os.path.join(out_dir, "index.bin")
    if os.path.exists(index_path):
        engine.index = index_mod.load_index(index_path)
    return engine
