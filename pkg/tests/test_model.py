"""Group model: forward equations against scalar-loop oracles, hand
gradients against finite differences, training behavior, persistence."""

import numpy as np
import pytest

from groupcast.ingest import Dataset, GroupGraph, Interaction
from groupcast.model import (DimensionMismatch, GgcnConfig, NonFiniteLoss,
                             UnknownGroup, UnknownItem, VersionMismatch,
                             bpr_loss, check_gradients, extend_embeddings,
                             init_embeddings, load_state, new_state,
                             predict_relevance, propagate, save_state,
                             sigmoid, train, update_item_embedding)


def sigmoid_scalar(x):
    return 1.0 / (1.0 + np.exp(-x))


def small_config(**kw):
    base = dict(embed_dim=6, latent_dim=3, attr_dim=3, num_layers=2,
                lr_1=0.05, seed=13)
    base.update(kw)
    return GgcnConfig(**base)


def triangle_setup(config=None, extra_isolated=True):
    """Three connected groups (one isolated), four items, seeded state."""
    ds = Dataset(
        interactions=[
            Interaction("ga", "v1", 1), Interaction("gb", "v2", 2),
            Interaction("gc", "v1", 3), Interaction("ga", "v3", 4),
        ],
        group_members={"ga": {"u1", "u2"}, "gb": {"u2", "u3"},
                       "gc": {"u1", "u3"}, "gd": {"u9"}},
        item_tags={"v1": ["x"], "v2": ["y"], "v3": ["x", "y"], "v4": []},
    )
    graph = GroupGraph()
    graph.add_edge("ga", "gb", 1.0)
    graph.add_edge("gb", "gc", 1.0)
    graph.add_edge("ga", "gc", 1.0)
    if extra_isolated:
        graph.add_node("gd")
    state = new_state(ds, config or small_config())
    return ds, graph, state


# -- initial embeddings -----------------------------------------------------


def test_init_embeddings_zero_weights_give_half():
    _, graph, state = triangle_setup()
    state.params["W0"][:] = 0.0
    state.params["b0"][:] = 0.0
    init_embeddings(state, graph)
    np.testing.assert_allclose(state.E0g, 0.5)


def test_init_embeddings_matches_scalar_oracle():
    _, graph, state = triangle_setup()
    init_embeddings(state, graph)
    W0, b0 = state.params["W0"], state.params["b0"]
    H0, beta0 = state.params["H0"], state.params["beta0"]
    for g in range(state.num_groups):
        u = np.concatenate([state.P[g], state.X[g]])
        for d in range(state.config.embed_dim):
            want = sigmoid_scalar(float(W0[d] @ u) + b0[d])
            assert state.E0g[g, d] == pytest.approx(want, rel=1e-12)
    for v in range(state.num_items):
        s = np.concatenate([state.Q[v], state.Y[v]])
        for d in range(state.config.embed_dim):
            want = sigmoid_scalar(float(H0[d] @ s) + beta0[d])
            assert state.E0v[v, d] == pytest.approx(want, rel=1e-12)


def test_init_embeddings_dimension_mismatch():
    _, graph, state = triangle_setup()
    state.params["W0"] = state.params["W0"][:, :-1]
    with pytest.raises(DimensionMismatch):
        init_embeddings(state, graph)


def test_entity_rows_do_not_depend_on_registration_order():
    ds, _, _ = triangle_setup()
    cfg = small_config()
    s1 = new_state(ds, cfg)
    ds_rev = Dataset(interactions=list(reversed(ds.interactions)),
                     group_members=ds.group_members, item_tags=ds.item_tags)
    s2 = new_state(ds_rev, cfg)
    for g in s1.group_index:
        np.testing.assert_array_equal(s1.P[s1.group_index[g]],
                                      s2.P[s2.group_index[g]])


# -- propagation ------------------------------------------------------------


def oracle_propagate(state, graph, num_layers):
    """Scalar-loop forward: agg with 1/sqrt(deg_g * deg_g') weights."""
    ids = state.group_ids
    E = {g: state.E0g[state.group_index[g]].copy() for g in ids}
    d = state.config.embed_dim
    for layer in range(1, num_layers + 1):
        W = state.params[f"W{layer}"]
        nxt = {}
        for g in ids:
            agg = np.zeros(d)
            for h in sorted(graph.neighbors(g)):
                agg += E[h] / np.sqrt(graph.degree(g) * graph.degree(h))
            nxt[g] = sigmoid(W @ np.concatenate([E[g], agg]))
        E = nxt
    return E


def test_propagate_matches_scalar_oracle():
    _, graph, state = triangle_setup()
    state = propagate(state, graph)
    want = oracle_propagate(state, graph, state.config.num_layers)
    for g, idx in state.group_index.items():
        np.testing.assert_allclose(state.Eg[idx], want[g], rtol=1e-10)


def test_propagate_zero_layers_is_identity():
    _, graph, state = triangle_setup(small_config(num_layers=0))
    state = propagate(state, graph)
    np.testing.assert_array_equal(state.Eg, state.E0g)


def test_propagate_isolated_node_aggregates_zero():
    _, graph, state = triangle_setup()
    state = propagate(state, graph)
    gd = state.group_index["gd"]
    W1 = state.params["W1"]
    W2 = state.params["W2"]
    e1 = sigmoid(W1 @ np.concatenate([state.E0g[gd], np.zeros(6)]))
    want = sigmoid(W2 @ np.concatenate([e1, np.zeros(6)]))
    np.testing.assert_allclose(state.Eg[gd], want, rtol=1e-10)


# -- dynamic item update ----------------------------------------------------


def test_update_item_embedding_two_group_blend():
    _, graph, state = triangle_setup(small_config(alpha_v=0.8))
    state = propagate(state, graph)
    v = state.item_index["v1"]
    g1, g2 = state.group_index["ga"], state.group_index["gb"]
    state.recent_groups = {v: [g1, g2]}
    got = update_item_embedding(state, "v1")
    want = 0.8 * state.E0v[v] + 0.1 * (state.Eg[g1] + state.Eg[g2])
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_update_item_embedding_without_recent_groups_is_initial():
    _, graph, state = triangle_setup()
    state = propagate(state, graph)
    np.testing.assert_array_equal(update_item_embedding(state, "v4"),
                                  state.E0v[state.item_index["v4"]])


def test_update_item_embedding_unknown_item():
    _, graph, state = triangle_setup()
    state = propagate(state, graph)
    with pytest.raises(UnknownItem):
        update_item_embedding(state, "nope")


# -- relevance --------------------------------------------------------------


def test_predict_relevance_matches_formula():
    _, graph, state = triangle_setup(small_config(alpha_r=0.25))
    state = propagate(state, graph)
    g = state.group_index["ga"]
    hist = {state.item_index["v1"], state.item_index["v3"]}
    state.history[g] = set(hist)
    score = predict_relevance(state, "ga", "v2", influence_score=0.6)
    z = state.Eg[g] + sum(state.Ev[v] for v in hist) / np.sqrt(2)
    want = 0.75 * float(state.Ev[state.item_index["v2"]] @ z) + 0.25 * 0.6
    assert score == pytest.approx(want, rel=1e-12)


def test_predict_relevance_unknown_ids():
    _, graph, state = triangle_setup()
    state = propagate(state, graph)
    with pytest.raises(UnknownGroup):
        predict_relevance(state, "zz", "v1")
    with pytest.raises(UnknownItem):
        predict_relevance(state, "ga", "zz")


# -- ranking loss -----------------------------------------------------------


def test_bpr_loss_equal_scores_is_ln_two():
    _, graph, state = triangle_setup(small_config(lambda_1=0.0))
    state = propagate(state, graph)
    loss = bpr_loss(state, graph, [("ga", "v1", "v1")])
    assert loss == pytest.approx(np.log(2.0), rel=1e-12)


def test_bpr_loss_adds_l2_penalty():
    _, graph, state = triangle_setup(small_config(lambda_1=0.0))
    state = propagate(state, graph)
    base = bpr_loss(state, graph, [("ga", "v1", "v2")])
    state.config.lambda_1 = 1e-3
    reg = sum(float(np.sum(a * a)) for a in state.trainable().values())
    with_reg = bpr_loss(state, graph, [("ga", "v1", "v2")])
    assert with_reg == pytest.approx(base + 1e-3 * reg, rel=1e-10)


def test_bpr_loss_prefers_separated_scores():
    # Whichever ordering puts the higher-scoring item first loses less, and
    # the pair of orderings always brackets the equal-score loss ln 2.
    _, graph, state = triangle_setup(small_config(lambda_1=0.0))
    state = propagate(state, graph)
    fwd = bpr_loss(state, graph, [("ga", "v1", "v2")])
    rev = bpr_loss(state, graph, [("ga", "v2", "v1")])
    assert min(fwd, rev) < np.log(2.0) < max(fwd, rev)
    assert fwd + rev > 2.0 * np.log(2.0)


# -- gradients --------------------------------------------------------------


def test_gradients_match_finite_differences():
    _, graph, state = triangle_setup()
    state = propagate(state, graph)
    g = state.group_index
    v = state.item_index
    state.history[g["ga"]] = {v["v1"], v["v3"]}
    state.history[g["gb"]] = {v["v2"]}
    state.recent_groups = {v["v1"]: [g["ga"], g["gc"]], v["v2"]: [g["gb"]]}
    triples = [("ga", "v1", "v2"), ("gb", "v2", "v4"), ("gc", "v1", "v3")]
    err = check_gradients(state, graph, triples, epsilon=1e-5)
    assert err < 1e-6


def test_gradients_with_influence_and_alpha_r():
    _, graph, state = triangle_setup(small_config(alpha_r=0.3))
    state = propagate(state, graph)
    triples = [("ga", "v1", "v2"), ("gb", "v3", "v4")]
    err = check_gradients(state, graph, triples, epsilon=1e-5)
    assert err < 1e-6


def test_gradients_subset_of_parameters():
    _, graph, state = triangle_setup()
    state = propagate(state, graph)
    err = check_gradients(state, graph, [("ga", "v1", "v2")],
                          epsilon=1e-5, param_names=["b0", "beta0"])
    assert err < 1e-6


def test_check_gradients_epsilon_range():
    _, graph, state = triangle_setup()
    state = propagate(state, graph)
    with pytest.raises(ValueError):
        check_gradients(state, graph, [("ga", "v1", "v2")], epsilon=1.0)


# -- training ---------------------------------------------------------------


def train_corpus(seed=5):
    from groupcast.ingest import build_group_graph, synthetic_dataset
    ds = synthetic_dataset(num_groups=12, num_items=15, num_users=24,
                           num_interactions=120, seed=seed, num_communities=3)
    graph = build_group_graph(ds)
    return ds, graph


def test_train_reduces_ranking_loss():
    ds, graph = train_corpus()
    cfg = small_config()
    state = new_state(ds, cfg)
    init_embeddings(state, graph)
    fixed = [(it.group_id, it.item_id, "v0000") for it in ds.interactions[:30]
             if it.item_id != "v0000"]
    state_before = state.copy()
    train(state, graph, ds.interactions, cfg, epochs=40)
    # evaluate both states on the same fixed triples and histories
    state_before.history = [set(h) for h in state.history]
    state_before.recent_groups = {k: list(vals)
                                  for k, vals in state.recent_groups.items()}
    before = bpr_loss(propagate(state_before, graph), graph, fixed)
    after = bpr_loss(state, graph, fixed)
    assert after < before


def test_train_is_deterministic():
    ds, graph = train_corpus()
    cfg = small_config()
    runs = []
    for _ in range(2):
        state = new_state(ds, cfg)
        init_embeddings(state, graph)
        train(state, graph, ds.interactions, cfg, epochs=8)
        runs.append(state)
    np.testing.assert_array_equal(runs[0].Eg, runs[1].Eg)
    np.testing.assert_array_equal(runs[0].Ev, runs[1].Ev)
    for name in runs[0].params:
        np.testing.assert_array_equal(runs[0].params[name],
                                      runs[1].params[name])


def test_train_zero_epochs_is_noop():
    ds, graph = train_corpus()
    cfg = small_config()
    state = new_state(ds, cfg)
    init_embeddings(state, graph)
    before = state.Eg.copy()
    out = train(state, graph, ds.interactions, cfg, epochs=0)
    assert out is state
    np.testing.assert_array_equal(state.Eg, before)


def test_train_registers_unseen_ids():
    ds, graph = train_corpus()
    cfg = small_config()
    state = new_state(ds, cfg)
    init_embeddings(state, graph)
    events = [Interaction("brand_new", "also_new", 10)]
    train(state, graph, list(ds.interactions[:20]) + events, cfg, epochs=2)
    assert "brand_new" in state.group_index
    assert "also_new" in state.item_index


def test_train_raises_on_nonfinite_state():
    ds, graph = train_corpus()
    cfg = small_config()
    state = new_state(ds, cfg)
    init_embeddings(state, graph)
    state.P[:] = np.nan
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteLoss):
        train(state, graph, ds.interactions, cfg, epochs=1)


def test_negative_sampling_avoids_history():
    from groupcast.model import _sample_triples
    ds, graph = train_corpus()
    cfg = small_config()
    state = new_state(ds, cfg)
    g = state.group_index[ds.groups()[0]]
    # history covers every item except one: only that item can be a negative
    open_item = state.num_items - 1
    state.history[g] = set(range(state.num_items)) - {open_item}
    rng = np.random.default_rng(0)
    triples = _sample_triples(state, [(g, 0)] * 10, state.num_items, 1, rng)
    assert triples is not None
    np.testing.assert_array_equal(triples[2], open_item)


# -- cold-start extension and persistence ------------------------------------


def test_extend_embeddings_preserves_existing_rows():
    ds, graph = train_corpus()
    cfg = small_config()
    state = new_state(ds, cfg)
    init_embeddings(state, graph)
    train(state, graph, ds.interactions, cfg, epochs=3)
    old_eg = state.Eg.copy()
    state.ensure_group("late_arrival")
    extend_embeddings(state)
    assert state.Eg.shape[0] == old_eg.shape[0] + 1
    np.testing.assert_array_equal(state.Eg[:-1], old_eg)
    # the new row is its sigmoid initial embedding
    u = np.concatenate([state.P[-1], state.X[-1]])
    want = sigmoid(state.params["W0"] @ u + state.params["b0"])
    np.testing.assert_allclose(state.Eg[-1], want, rtol=1e-12)


def test_save_load_round_trip(tmp_path):
    ds, graph = train_corpus()
    cfg = small_config()
    state = new_state(ds, cfg)
    init_embeddings(state, graph)
    train(state, graph, ds.interactions, cfg, epochs=4)
    path = tmp_path / "model.bin"
    save_state(state, path)
    loaded = load_state(path)
    assert loaded.group_ids == state.group_ids
    assert loaded.item_ids == state.item_ids
    assert loaded.history == state.history
    assert loaded.recent_groups == state.recent_groups
    assert loaded.config == state.config
    np.testing.assert_array_equal(loaded.Eg, state.Eg)
    np.testing.assert_array_equal(loaded.Ev, state.Ev)
    for name in state.params:
        np.testing.assert_array_equal(loaded.params[name], state.params[name])


def test_load_rejects_bad_magic_and_version(tmp_path):
    ds, graph = train_corpus()
    state = new_state(ds, small_config())
    init_embeddings(state, graph)
    path = tmp_path / "model.bin"
    save_state(state, path)
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatch):
        load_state(bad)
    blob = bytearray(path.read_bytes())
    blob[8] = 99  # format version field
    bad2 = tmp_path / "bad2.bin"
    bad2.write_bytes(bytes(blob))
    with pytest.raises(VersionMismatch):
        load_state(bad2)
