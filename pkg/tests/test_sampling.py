"""Edge sampler: probability optimality, estimator unbiasedness by
exhaustive outcome enumeration, bounds, overlap carry-over."""

import itertools

import numpy as np
import pytest

from groupcast.ingest import GroupGraph
from groupcast.sampling import (EmptyGraph, InfeasibleSampleSize,
                                SamplerConfig, approximate_probabilities,
                                bound_envelope, cluster_nodes, edge_scores,
                                estimator_node, estimator_total,
                                estimator_variance, normalized_edge_weights,
                                optimal_probabilities, partition_edges,
                                run_ges, sample_edges, sample_overlap)


def triangle():
    g = GroupGraph()
    g.add_edge("a", "b", 1.0)
    g.add_edge("b", "c", 1.0)
    g.add_edge("a", "c", 1.0)
    return g, {"a": 0, "b": 1, "c": 2}


def star():
    g = GroupGraph()
    for leaf in ("x", "y", "z"):
        g.add_edge("hub", leaf, 1.0)
    return g


def embeddings(n, d, num_layers, seed, low=0.05, high=0.95):
    rng = np.random.default_rng(seed)
    return [rng.uniform(low, high, (n, d)) for _ in range(num_layers)]


def all_outcomes(probs):
    """Every Bernoulli outcome with its probability mass."""
    m = len(probs)
    for bits in itertools.product((False, True), repeat=m):
        w = 1.0
        for b, p in zip(bits, probs):
            w *= p if b else 1.0 - p
        yield np.array(bits, dtype=bool), w


def make_sample(edges, probs, mask):
    from groupcast.sampling import SampledSubgraph
    return SampledSubgraph(edges=list(edges),
                           probabilities=np.asarray(probs, dtype=np.float64),
                           mask=np.asarray(mask, dtype=bool),
                           carried=np.zeros(len(edges), dtype=bool))


# -- normalized weights and scores -------------------------------------------


def test_star_normalized_weight():
    g = star()
    lhat = normalized_edge_weights(g)
    np.testing.assert_allclose(lhat, 1.0 / np.sqrt(3.0))


def test_two_node_edge_score_is_endpoint_sum_norm():
    g = GroupGraph()
    g.add_edge("u", "v", 1.0)
    idx = {"u": 0, "v": 1}
    embs = embeddings(2, 4, 2, seed=1)
    scores = edge_scores(g, embs, idx)
    total = sum(e[0] + e[1] for e in embs)
    assert scores[0] == pytest.approx(np.linalg.norm(total), rel=1e-12)


# -- probability allocation ---------------------------------------------------


def test_equal_scores_split_sample_size_evenly():
    g, _ = triangle()
    lhat = normalized_edge_weights(g)
    probs = approximate_probabilities(lhat, 1.5)
    np.testing.assert_allclose(probs, 0.5)
    assert probs.sum() == pytest.approx(1.5)


def test_optimal_probabilities_proportional_when_uncapped():
    scores = np.array([4.0, 2.0, 1.0, 1.0])
    probs = optimal_probabilities(scores, 2.0)
    np.testing.assert_allclose(probs, scores / scores.sum() * 2.0)


def test_clamping_redistributes_proportionally():
    probs = optimal_probabilities(np.array([10.0, 1.0, 1.0]), 2.5)
    np.testing.assert_allclose(probs, [1.0, 0.75, 0.75])
    assert probs.sum() == pytest.approx(2.5)


def test_clamped_solution_minimizes_variance():
    # any feasible transfer of mass between edges must not reduce the
    # closed-form variance
    rng = np.random.default_rng(8)
    for _ in range(10):
        scores = rng.uniform(0.1, 5.0, size=6)
        n_s = float(rng.uniform(1.0, 5.5))
        p = optimal_probabilities(scores, n_s)
        base = estimator_variance(scores, p)
        for _ in range(60):
            i, j = rng.choice(6, size=2, replace=False)
            delta = rng.uniform(0, 0.2)
            q = p.copy()
            q[i] = min(q[i] + delta, 1.0)
            moved = q[i] - p[i]
            q[j] = p[j] - moved
            if moved <= 0 or q[j] <= 1e-9:
                continue
            assert estimator_variance(scores, q) >= base - 1e-9


def test_infeasible_sample_sizes():
    with pytest.raises(InfeasibleSampleSize):
        optimal_probabilities(np.ones(3), 4.0)
    with pytest.raises(InfeasibleSampleSize):
        optimal_probabilities(np.ones(3), -1.0)


def test_zero_scores_fall_back_to_uniform():
    probs = optimal_probabilities(np.zeros(4), 2.0)
    np.testing.assert_allclose(probs, 0.5)


# -- estimators by enumeration ------------------------------------------------


def test_total_estimator_unbiased_by_enumeration():
    g, idx = triangle()
    embs = embeddings(3, 3, 2, seed=2)
    edges = g.edge_list()
    probs = np.array([0.3, 0.55, 0.8])
    truth = np.zeros(3)
    for u, v in edges:
        lhat = 1.0 / np.sqrt(g.degree(u) * g.degree(v))
        for emb in embs:
            truth += lhat * (emb[idx[u]] + emb[idx[v]])
    expect = np.zeros(3)
    for mask, w in all_outcomes(probs):
        sample = make_sample(edges, probs, mask)
        expect += w * estimator_total(sample, g, embs, idx)
    np.testing.assert_allclose(expect, truth, rtol=1e-10)


def test_total_estimator_variance_matches_closed_form():
    g, idx = triangle()
    embs = embeddings(3, 3, 2, seed=3)
    edges = g.edge_list()
    probs = np.array([0.25, 0.6, 0.9])
    scores = edge_scores(g, embs, idx, edges)

    mean = np.zeros(3)
    second = 0.0
    for mask, w in all_outcomes(probs):
        est = estimator_total(make_sample(edges, probs, mask), g, embs, idx)
        mean += w * est
        second += w * float(est @ est)
    enumerated_var = second - float(mean @ mean)
    assert enumerated_var == pytest.approx(estimator_variance(scores, probs),
                                           rel=1e-10)


def test_node_estimator_unbiased_conditional_on_coverage():
    g, idx = triangle()
    embs = embeddings(3, 3, 2, seed=4)
    edges = g.edge_list()
    probs = np.array([0.4, 0.7, 0.2])
    node, layer = "b", 1
    truth = np.zeros(3)
    for u in sorted(g.neighbors(node)):
        lhat = 1.0 / np.sqrt(g.degree(node) * g.degree(u))
        truth += lhat * embs[layer][idx[u]]
    incident = [i for i, e in enumerate(edges) if node in e]
    p_node = 1.0 - np.prod([1.0 - probs[i] for i in incident])
    acc = np.zeros(3)
    for mask, w in all_outcomes(probs):
        if not any(mask[i] for i in incident):
            continue
        acc += w * estimator_node(make_sample(edges, probs, mask), g, embs,
                                  idx, node, layer)
    np.testing.assert_allclose(acc / p_node, truth, rtol=1e-10)


def test_carried_edges_add_no_variance():
    scores = np.array([2.0, 3.0])
    assert estimator_variance(scores, np.ones(2)) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        estimator_variance(np.array([1.0]), np.array([0.0]))


# -- bound envelope -----------------------------------------------------------


def test_envelope_contains_exact_and_approximate():
    rng = np.random.default_rng(11)
    for trial in range(10):
        g = GroupGraph()
        n = int(rng.integers(4, 9))
        names = [f"n{i}" for i in range(n)]
        for i in range(n - 1):
            g.add_edge(names[i], names[i + 1], 1.0)
        for _ in range(n):
            a, b = rng.choice(n, size=2, replace=False)
            if a != b:
                try:
                    g.add_edge(names[int(a)], names[int(b)], 1.0)
                except ValueError:
                    pass
        idx = {name: i for i, name in enumerate(names)}
        embs = embeddings(n, 4, 2, seed=int(rng.integers(1e6)))
        edges = g.edge_list()
        lhat = normalized_edge_weights(g, edges)
        scores = edge_scores(g, embs, idx, edges)
        exact = scores / scores.sum()          # n_s = 1: no clamping
        approx = lhat / lhat.sum()
        lo, hi = bound_envelope(g, embs, idx, 1.0, edges)
        assert (lo <= exact + 1e-12).all() and (exact <= hi + 1e-12).all()
        assert (lo <= approx + 1e-12).all() and (approx <= hi + 1e-12).all()


# -- Bernoulli draws and overlap ----------------------------------------------


def test_sample_edges_deterministic_and_calibrated():
    probs = np.array([0.1, 0.5, 0.9, 1.0, 0.0])
    m1 = sample_edges(probs, seed=7)
    m2 = sample_edges(probs, seed=7)
    np.testing.assert_array_equal(m1, m2)
    assert m1[3] and not m1[4]  # p=1 always in, p=0 never
    hits = np.zeros(5)
    for seed in range(400):
        hits += sample_edges(probs, seed=seed)
    np.testing.assert_allclose(hits / 400, probs, atol=0.08)
    with pytest.raises(ValueError):
        sample_edges(np.array([1.5]))


def test_sample_overlap_picks_top_degree_drifted_survivors():
    g = star()
    g.add_edge("x", "y", 1.0)  # x,y now have degree 2
    prev = [("hub", "x"), ("hub", "y"), ("hub", "z"), ("x", "nogone")]
    carried = sample_overlap(prev, changed_nodes={"x", "y", "z"}, graph=g,
                             fraction=0.5)
    # eligible: hub-x, hub-y, hub-z (hub-nogone edge no longer exists);
    # degree sums: hub-x=5, hub-y=5, hub-z=4; keep ceil(1.5)=2
    assert carried == [("hub", "x"), ("hub", "y")]
    assert sample_overlap(prev, {"x"}, g, 0.0) == []
    # untouched previous edges are not eligible
    assert sample_overlap([("hub", "z")], {"x"}, g, 1.0) == []


# -- clustering ---------------------------------------------------------------


def test_cluster_nodes_separates_blobs():
    rng = np.random.default_rng(21)
    a = rng.normal(0.0, 0.05, (20, 3))
    b = rng.normal(5.0, 0.05, (20, 3))
    labels = cluster_nodes(np.vstack([a, b]), 2, seed=3)
    assert len(set(labels[:20])) == 1
    assert len(set(labels[20:])) == 1
    assert labels[0] != labels[20]


def test_cluster_nodes_small_and_degenerate():
    pts = np.arange(6, dtype=float).reshape(3, 2)
    np.testing.assert_array_equal(cluster_nodes(pts, 5, seed=0), [0, 1, 2])
    same = cluster_nodes(np.ones((4, 2)), 2, seed=0)
    assert same.shape == (4,)
    np.testing.assert_array_equal(cluster_nodes(pts, 2, seed=1),
                                  cluster_nodes(pts, 2, seed=1))


# -- full sampling round --------------------------------------------------------


def test_run_ges_respects_budget_and_carries():
    rng = np.random.default_rng(17)
    g = GroupGraph()
    names = [f"n{i}" for i in range(12)]
    for i in range(12):
        for j in range(i + 1, 12):
            if rng.random() < 0.4:
                g.add_edge(names[i], names[j], 1.0)
    idx = {n: i for i, n in enumerate(names)}
    embs = embeddings(12, 4, 1, seed=9)
    cfg = SamplerConfig(num_clusters=3, sample_fraction=0.5, seed=5)
    sample = run_ges(g, embs, idx, cfg)
    n_edges = len(g.edge_list())
    assert sample.expected_size() == pytest.approx(np.ceil(0.5 * n_edges))
    # partition covers every edge exactly once
    covered = [e for edges in sample.partition.edge_sets.values() for e in edges]
    assert sorted(covered) == g.edge_list()

    prev = sample.sampled_edges()
    again = run_ges(g, embs, idx, cfg, prev_edges=prev,
                    changed_nodes=set(names))
    carried_idx = np.flatnonzero(again.carried)
    assert carried_idx.size > 0
    np.testing.assert_allclose(again.probabilities[carried_idx], 1.0)
    assert again.mask[carried_idx].all()
    assert again.expected_size() == pytest.approx(np.ceil(0.5 * n_edges))


def test_run_ges_error_conditions():
    g = GroupGraph()
    g.add_node("solo")
    cfg = SamplerConfig()
    with pytest.raises(EmptyGraph):
        run_ges(g, [np.zeros((1, 2))], {"solo": 0}, cfg)
    g2, idx = triangle()
    with pytest.raises(InfeasibleSampleSize):
        run_ges(g2, [np.zeros((3, 2))], idx, cfg, num_samples=7)


def test_run_ges_deterministic():
    g, idx = triangle()
    embs = embeddings(3, 4, 1, seed=2)
    cfg = SamplerConfig(num_clusters=2, sample_fraction=0.7, seed=12)
    s1 = run_ges(g, embs, idx, cfg)
    s2 = run_ges(g, embs, idx, cfg)
    np.testing.assert_array_equal(s1.mask, s2.mask)
    np.testing.assert_allclose(s1.probabilities, s2.probabilities)


def test_partition_groups_by_cluster_pair():
    g, _ = triangle()
    labels = {"a": 0, "b": 0, "c": 1}
    part = partition_edges(g, labels)
    assert part.edge_sets[(0, 0)] == [("a", "b")]
    assert sorted(part.edge_sets[(0, 1)]) == [("a", "c"), ("b", "c")]
    assert part.set_of(("a", "c")) == (0, 1)
