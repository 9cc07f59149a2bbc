"""Group graph-convolution model: embedding initialization, neighbor
propagation, dynamic item updates, pairwise ranking loss, and Adam training
with hand-written gradients.

All gradients are derived manually (reverse-mode, stage by stage) and
validated against central finite differences by :func:`check_gradients`;
no autodiff framework is involved.
"""

from __future__ import annotations

import copy
import hashlib
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .ingest import GroupGraph, Interaction, featurize_tags

__all__ = [
    "GgcnConfig",
    "ModelState",
    "DimensionMismatch",
    "UnknownGroup",
    "UnknownItem",
    "NonFiniteLoss",
    "VersionMismatch",
    "new_state",
    "init_embeddings",
    "propagate",
    "update_item_embedding",
    "predict_relevance",
    "bpr_loss",
    "train",
    "check_gradients",
    "save_state",
    "load_state",
    "sigmoid",
]


class DimensionMismatch(ValueError):
    """Concatenated input length does not match a weight matrix."""


class UnknownGroup(KeyError):
    pass


class UnknownItem(KeyError):
    pass


class NonFiniteLoss(FloatingPointError):
    """Training loss became NaN/Inf; usually means lr_1 is too high."""


class VersionMismatch(ValueError):
    """Persisted model has the wrong magic or format version."""


def sigmoid(x):
    # expit is overflow-safe on both tails and runs in a single pass
    return expit(np.asarray(x, dtype=np.float64))


@dataclass
class GgcnConfig:
    """Hyperparameters for the group model.

    Defaults follow the tuned operating point: two propagation layers,
    lr_1 = 1e-1 with Adam, lambda_1 = 1e-6, alpha_v = 0.8 and
    alpha_r = 1e-6.
    """

    embed_dim: int = 32
    latent_dim: int = 16
    attr_dim: int = 16
    num_layers: int = 2
    alpha_v: float = 0.8
    alpha_r: float = 1e-6
    lr_1: float = 1e-1
    lambda_1: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    negatives_per_positive: int = 1
    seed: int = 0

    def validate(self):
        if min(self.embed_dim, self.latent_dim, self.attr_dim) < 1:
            raise ValueError("dims must be >= 1")
        if self.num_layers < 0:
            raise ValueError("num_layers must be >= 0")
        for name in ("alpha_v", "alpha_r"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.lr_1 <= 0:
            raise ValueError("lr_1 must be positive")
        if self.lambda_1 < 0:
            raise ValueError("lambda_1 must be >= 0")
        if self.negatives_per_positive < 1:
            raise ValueError("negatives_per_positive must be >= 1")
        return self


def _id_rng(seed: int, namespace: str, entity_id: str) -> np.random.Generator:
    # Per-entity stream: rows do not depend on registration order.
    digest = hashlib.blake2b(
        f"{namespace}:{entity_id}".encode("utf-8"),
        digest_size=8,
        key=str(seed).encode("utf-8"),
    ).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))


@dataclass
class ModelState:
    """All trainable parameters plus derived embeddings at a time point.

    Trainables: W0, b0, H0, beta0, the per-layer matrices Ws, and the latent
    matrices P (groups) and Q (items). X and Y hold fixed attribute features.
    Eg/Ev caches are refreshed by :func:`propagate` and :func:`train`.
    """

    config: GgcnConfig
    group_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)
    group_index: dict[str, int] = field(default_factory=dict)
    item_index: dict[str, int] = field(default_factory=dict)
    P: np.ndarray = None
    Q: np.ndarray = None
    X: np.ndarray = None
    Y: np.ndarray = None
    params: dict[str, np.ndarray] = field(default_factory=dict)
    E0g: np.ndarray = None
    Eg: np.ndarray = None
    E0v: np.ndarray = None
    Ev: np.ndarray = None
    history: list[set[int]] = field(default_factory=list)   # V_g, per group index
    recent_groups: dict[int, list[int]] = field(default_factory=dict)  # G_new, per item index

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    # -- registration ------------------------------------------------------

    def ensure_group(self, group_id: str, tags=None) -> int:
        if group_id in self.group_index:
            return self.group_index[group_id]
        cfg = self.config
        idx = len(self.group_ids)
        self.group_ids.append(group_id)
        self.group_index[group_id] = idx
        latent = _id_rng(cfg.seed, "group", group_id).uniform(-0.1, 0.1, cfg.latent_dim)
        attr = featurize_tags(tags or [], cfg.attr_dim, cfg.seed)
        self.P = latent[None, :] if self.P is None else np.vstack([self.P, latent])
        self.X = attr[None, :] if self.X is None else np.vstack([self.X, attr])
        self.history.append(set())
        return idx

    def ensure_item(self, item_id: str, tags=None) -> int:
        if item_id in self.item_index:
            return self.item_index[item_id]
        cfg = self.config
        idx = len(self.item_ids)
        self.item_ids.append(item_id)
        self.item_index[item_id] = idx
        latent = _id_rng(cfg.seed, "item", item_id).uniform(-0.1, 0.1, cfg.latent_dim)
        attr = featurize_tags(tags or [], cfg.attr_dim, cfg.seed)
        self.Q = latent[None, :] if self.Q is None else np.vstack([self.Q, latent])
        self.Y = attr[None, :] if self.Y is None else np.vstack([self.Y, attr])
        return idx

    @property
    def num_groups(self) -> int:
        return len(self.group_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    def trainable(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out["P"] = self.P
        out["Q"] = self.Q
        return out

    def group_embedding(self, group_id: str) -> np.ndarray:
        if group_id not in self.group_index:
            raise UnknownGroup(group_id)
        return self.Eg[self.group_index[group_id]]

    def item_embedding(self, item_id: str) -> np.ndarray:
        if item_id not in self.item_index:
            raise UnknownItem(item_id)
        return self.Ev[self.item_index[item_id]]


def new_state(dataset, config: GgcnConfig) -> ModelState:
    """Build a ModelState registering every group and item in the dataset.

    Latents are seeded per entity id; attributes come from hashed tag
    featurization. Layer weights are seeded uniform(-0.1, 0.1).
    """
    config.validate()
    state = ModelState(config=config)
    for g in dataset.groups():
        state.ensure_group(g, dataset.group_tags.get(g))
    for v in dataset.items():
        state.ensure_item(v, dataset.item_tags.get(v))
    rng = np.random.default_rng(config.seed)
    d, dl, da = config.embed_dim, config.latent_dim, config.attr_dim
    state.params["W0"] = rng.uniform(-0.1, 0.1, (d, dl + da))
    state.params["b0"] = rng.uniform(-0.1, 0.1, d)
    state.params["H0"] = rng.uniform(-0.1, 0.1, (d, dl + da))
    state.params["beta0"] = rng.uniform(-0.1, 0.1, d)
    for layer in range(1, config.num_layers + 1):
        state.params[f"W{layer}"] = rng.uniform(-0.1, 0.1, (d, 2 * d))
    return state


def normalized_adjacency(state: ModelState, graph: GroupGraph) -> sp.csr_matrix:
    """Symmetric degree-normalized adjacency 1/sqrt(|N_g||N_g'|) over the
    state's group index. Unknown graph nodes are ignored; isolated nodes get
    zero rows."""
    n = state.num_groups
    gi = state.group_index
    edges = graph.edge_list()
    rows = np.empty(len(edges), dtype=np.int64)
    cols = np.empty(len(edges), dtype=np.int64)
    degs: dict[str, float] = {}
    m = 0
    for a, b in edges:
        ia = gi.get(a)
        ib = gi.get(b)
        if ia is None or ib is None:
            continue
        rows[m] = ia
        cols[m] = ib
        if a not in degs:
            degs[a] = graph.degree(a)
        if b not in degs:
            degs[b] = graph.degree(b)
        m += 1
    rows, cols = rows[:m], cols[:m]
    deg_arr = np.zeros(n, dtype=np.float64)
    for node, w in degs.items():
        deg_arr[gi[node]] = w
    vals = 1.0 / np.sqrt(deg_arr[rows] * deg_arr[cols])
    return sp.csr_matrix(
        (np.concatenate([vals, vals]),
         (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
        shape=(n, n))


# -- forward pass ----------------------------------------------------------


def _interaction_operators(state: ModelState):
    """Sparse operators derived from the merged interactions.

    K averages recent-group embeddings into each blended item, H sums
    normalized history embeddings into each group's score vector. Constant
    between ``_merge_interactions`` calls, so ``train`` builds them once and
    threads them through every epoch.
    """
    cfg = state.config
    nv, ng = state.num_items, state.num_groups
    blend = np.zeros(nv, dtype=bool)
    k_rows = []
    k_cols = []
    k_vals = []
    for v_idx, g_list in state.recent_groups.items():
        if not g_list:
            continue
        blend[v_idx] = True
        k_rows.append(np.full(len(g_list), v_idx, dtype=np.int64))
        k_cols.append(np.fromiter(g_list, dtype=np.int64, count=len(g_list)))
        k_vals.append(np.full(len(g_list),
                              (1.0 - cfg.alpha_v) / len(g_list)))
    K = sp.csr_matrix(
        (np.concatenate(k_vals) if k_vals else [],
         (np.concatenate(k_rows) if k_rows else [],
          np.concatenate(k_cols) if k_cols else [])),
        shape=(nv, ng))

    h_rows = []
    h_cols = []
    h_vals = []
    for g_idx, items in enumerate(state.history):
        if not items:
            continue
        h_rows.append(np.full(len(items), g_idx, dtype=np.int64))
        h_cols.append(np.fromiter(items, dtype=np.int64, count=len(items)))
        h_vals.append(np.full(len(items), 1.0 / np.sqrt(len(items))))
    H = sp.csr_matrix(
        (np.concatenate(h_vals) if h_vals else [],
         (np.concatenate(h_rows) if h_rows else [],
          np.concatenate(h_cols) if h_cols else [])),
        shape=(ng, nv))
    return K, H, blend


def _forward(state: ModelState, a_hat: sp.csr_matrix, params: dict[str, np.ndarray],
             ops=None):
    """Full forward pass; returns caches needed for the backward pass."""
    cfg = state.config
    d, dl, da = cfg.embed_dim, cfg.latent_dim, cfg.attr_dim
    Ug = np.hstack([params["P"], state.X])
    Sv = np.hstack([params["Q"], state.Y])
    if params["W0"].shape[1] != dl + da:
        raise DimensionMismatch(
            f"W0 expects {params['W0'].shape[1]} inputs, got {dl + da}"
        )
    A0g = Ug @ params["W0"].T + params["b0"]
    E0g = sigmoid(A0g)
    C0v = Sv @ params["H0"].T + params["beta0"]
    E0v = sigmoid(C0v)

    layer_inputs = []  # per layer: (E_prev, Agg, M, El)
    E = E0g
    for layer in range(1, cfg.num_layers + 1):
        Agg = a_hat @ E
        M = np.hstack([E, Agg])
        El = sigmoid(M @ params[f"W{layer}"].T)
        layer_inputs.append((E, M, El))
        E = El
    Eg = E

    # Item update: alpha_v blend with the mean embedding of recently
    # interacting groups; items with no recent groups keep E0v.
    K, H, blend = _interaction_operators(state) if ops is None else ops
    Ev = E0v.copy()
    if blend.any():
        Ev[blend] = cfg.alpha_v * E0v[blend]
        Ev += K @ Eg

    # Group-side score vector: embedding plus normalized history sum.
    Z = Eg + H @ Ev

    return {
        "Ug": Ug, "Sv": Sv, "E0g": E0g, "E0v": E0v,
        "layers": layer_inputs, "Eg": Eg, "Ev": Ev, "Z": Z,
        "K": K, "H": H, "blend": blend,
    }


def _scatter_rows(n_rows: int, idx: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Sum ``values`` rows into an (n_rows, d) array at positions ``idx``.

    A sparse selector product; several times faster than ``np.add.at`` at
    the batch sizes the trainer sees."""
    b = idx.shape[0]
    sel = sp.csr_matrix((np.ones(b), (idx, np.arange(b))), shape=(n_rows, b))
    return sel @ values


def _loss_and_grads(state, a_hat, params, triples, influence=None, want_grads=True,
                    ops=None):
    """Ranking loss and, optionally, gradients for every trainable array.

    ``triples`` is (g_idx, pos_idx, neg_idx) int arrays. ``influence`` is an
    optional pair of arrays with per-triple influence scores for the positive
    and negative item; they are treated as constants.
    """
    cfg = state.config
    fwd = _forward(state, a_hat, params, ops=ops)
    Ev, Z = fwd["Ev"], fwd["Z"]
    gi, ui, vi = triples
    w = 1.0 - cfg.alpha_r

    dot_pos = np.einsum("ij,ij->i", Ev[ui], Z[gi])
    dot_neg = np.einsum("ij,ij->i", Ev[vi], Z[gi])
    x = w * (dot_pos - dot_neg)
    if influence is not None:
        s_pos, s_neg = influence
        x = x + cfg.alpha_r * (s_pos - s_neg)
    loss = float(np.sum(np.logaddexp(0.0, -x)))
    reg = 0.0
    for arr in params.values():
        reg += float(np.sum(arr * arr))
    loss += cfg.lambda_1 * reg
    if not want_grads:
        return loss, None

    grads = {name: np.zeros_like(arr) for name, arr in params.items()}
    t = sigmoid(x) - 1.0  # d(-ln sigma(x))/dx

    wt = (w * t)[:, None]
    zg = Z[gi]
    diff = Ev[ui] - Ev[vi]
    dZ = _scatter_rows(Z.shape[0], gi, wt * diff)
    # signed selector: +row for the positive item, -row for the negative,
    # one sparse product instead of stacking a doubled dense batch
    b = gi.shape[0]
    sign = np.concatenate([np.ones(b), -np.ones(b)])
    sel = sp.csr_matrix(
        (sign, (np.concatenate([ui, vi]), np.tile(np.arange(b), 2))),
        shape=(Ev.shape[0], b))
    dEv = sel @ (wt * zg)

    # Z = Eg + H @ Ev
    dEg = dZ.copy()
    dEv += fwd["H"].T @ dZ

    # Ev = coef * E0v + K @ Eg, coef = alpha_v where blended else 1
    coef = np.where(fwd["blend"], cfg.alpha_v, 1.0)[:, None]
    dE0v = coef * dEv
    dEg += fwd["K"].T @ dEv

    # propagation layers, last to first
    dE = dEg
    for layer in range(cfg.num_layers, 0, -1):
        E_prev, M, El = fwd["layers"][layer - 1]
        dA = dE * El * (1.0 - El)
        grads[f"W{layer}"] += dA.T @ M
        dM = dA @ params[f"W{layer}"]
        d = cfg.embed_dim
        dE = dM[:, :d] + a_hat @ dM[:, d:]  # a_hat is symmetric
    dE0g = dE

    E0g, E0v = fwd["E0g"], fwd["E0v"]
    dA0 = dE0g * E0g * (1.0 - E0g)
    grads["W0"] += dA0.T @ fwd["Ug"]
    grads["b0"] += dA0.sum(axis=0)
    grads["P"] += (dA0 @ params["W0"])[:, : cfg.latent_dim]

    dC0 = dE0v * E0v * (1.0 - E0v)
    grads["H0"] += dC0.T @ fwd["Sv"]
    grads["beta0"] += dC0.sum(axis=0)
    grads["Q"] += (dC0 @ params["H0"])[:, : cfg.latent_dim]

    for name, arr in params.items():
        grads[name] += 2.0 * cfg.lambda_1 * arr
    return loss, grads


# -- public operations -----------------------------------------------------


def init_embeddings(state: ModelState, graph: GroupGraph) -> ModelState:
    """Compute the sigmoid initial embeddings for every group and item."""
    cfg = state.config
    expected = cfg.latent_dim + cfg.attr_dim
    for name in ("W0", "H0"):
        if state.params[name].shape[1] != expected:
            raise DimensionMismatch(
                f"{name} has {state.params[name].shape[1]} columns, expected {expected}"
            )
    Ug = np.hstack([state.P, state.X])
    Sv = np.hstack([state.Q, state.Y])
    state.E0g = sigmoid(Ug @ state.params["W0"].T + state.params["b0"])
    state.E0v = sigmoid(Sv @ state.params["H0"].T + state.params["beta0"])
    state.Eg = state.E0g.copy()
    state.Ev = state.E0v.copy()
    return state


def propagate(state: ModelState, graph: GroupGraph, num_layers=None) -> ModelState:
    """Run the layer-wise neighbor aggregation and refresh all caches.

    With zero layers the final group embedding equals the initial one.
    Isolated nodes aggregate a zero vector.
    """
    cfg = state.config
    if num_layers is not None and num_layers != cfg.num_layers:
        cfg = copy.copy(cfg)
        cfg.num_layers = num_layers
        state = state.copy()
        state.config = cfg
        for layer in range(1, num_layers + 1):
            if f"W{layer}" not in state.params:
                rng = np.random.default_rng(cfg.seed + layer)
                state.params[f"W{layer}"] = rng.uniform(
                    -0.1, 0.1, (cfg.embed_dim, 2 * cfg.embed_dim)
                )
    a_hat = normalized_adjacency(state, graph)
    fwd = _forward(state, a_hat, state.trainable())
    state.E0g, state.E0v = fwd["E0g"], fwd["E0v"]
    state.Eg, state.Ev = fwd["Eg"], fwd["Ev"]
    return state


def extend_embeddings(state: ModelState) -> ModelState:
    """Append initial-embedding rows for entities registered after the last
    forward pass, leaving already-computed rows untouched."""
    ng_cached = 0 if state.E0g is None else state.E0g.shape[0]
    if state.num_groups > ng_cached:
        Ug = np.hstack([state.P[ng_cached:], state.X[ng_cached:]])
        rows = sigmoid(Ug @ state.params["W0"].T + state.params["b0"])
        state.E0g = rows if state.E0g is None else np.vstack([state.E0g, rows])
        state.Eg = rows.copy() if state.Eg is None else np.vstack([state.Eg, rows])
    nv_cached = 0 if state.E0v is None else state.E0v.shape[0]
    if state.num_items > nv_cached:
        Sv = np.hstack([state.Q[nv_cached:], state.Y[nv_cached:]])
        rows = sigmoid(Sv @ state.params["H0"].T + state.params["beta0"])
        state.E0v = rows if state.E0v is None else np.vstack([state.E0v, rows])
        state.Ev = rows.copy() if state.Ev is None else np.vstack([state.Ev, rows])
    return state


def update_item_embedding(state: ModelState, item_id: str) -> np.ndarray:
    """Blend the item's initial embedding with the mean embedding of the
    groups that recently interacted with it."""
    if item_id not in state.item_index:
        raise UnknownItem(item_id)
    cfg = state.config
    v_idx = state.item_index[item_id]
    recent = state.recent_groups.get(v_idx, [])
    base = state.E0v[v_idx]
    if not recent:
        return base.copy()
    mean = np.mean(state.Eg[list(recent)], axis=0)
    return cfg.alpha_v * base + (1.0 - cfg.alpha_v) * mean


def predict_relevance(state: ModelState, group_id: str, item_id: str,
                      influence_score: float = 0.0) -> float:
    """Interaction score: preference dot product blended with the supplied
    influence score by alpha_r."""
    if group_id not in state.group_index:
        raise UnknownGroup(group_id)
    if item_id not in state.item_index:
        raise UnknownItem(item_id)
    cfg = state.config
    g = state.group_index[group_id]
    v = state.item_index[item_id]
    z = state.Eg[g].copy()
    hist = state.history[g]
    if hist:
        z += np.sum(state.Ev[sorted(hist)], axis=0) / np.sqrt(len(hist))
    pref = float(state.Ev[v] @ z)
    return (1.0 - cfg.alpha_r) * pref + cfg.alpha_r * float(influence_score)


def bpr_loss(state: ModelState, graph: GroupGraph, triples, influence=None) -> float:
    """Pairwise ranking loss over (group, positive, negative) id triples,
    plus the L2 penalty over all trainable parameters."""
    idx = _triples_to_indices(state, triples)
    a_hat = normalized_adjacency(state, graph)
    loss, _ = _loss_and_grads(state, a_hat, state.trainable(), idx,
                              influence=influence, want_grads=False)
    return loss


def _triples_to_indices(state, triples):
    gi, ui, vi = [], [], []
    for g, u, v in triples:
        if g not in state.group_index:
            raise UnknownGroup(g)
        for item in (u, v):
            if item not in state.item_index:
                raise UnknownItem(item)
        gi.append(state.group_index[g])
        ui.append(state.item_index[u])
        vi.append(state.item_index[v])
    return np.asarray(gi), np.asarray(ui), np.asarray(vi)


class Adam:
    """Plain Adam over a dict of parameter arrays."""

    def __init__(self, params, lr, beta1, beta2, eps):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * (g * g)
            params[k] -= self.lr * (self.m[k] / bias1) / (
                np.sqrt(self.v[k] / bias2) + self.eps
            )


def _merge_interactions(state: ModelState, interactions) -> list[tuple[int, int]]:
    """Register ids, extend per-group histories, and reset the recent-group
    window to this batch. Returns (group_idx, item_idx) positives."""
    positives = []
    for it in interactions:
        g = state.ensure_group(it.group_id)
        v = state.ensure_item(it.item_id)
        positives.append((g, v))
    recent: dict[int, list[int]] = {}
    for g, v in positives:
        groups = recent.setdefault(v, [])
        if g not in groups:
            groups.append(g)
    state.recent_groups = recent
    for g, v in positives:
        state.history[g].add(v)
    return positives


def train(state: ModelState, graph: GroupGraph, interactions, config: GgcnConfig,
          epochs: int) -> ModelState:
    """Optimize the ranking loss with Adam; one full-batch step per epoch
    with negatives resampled every epoch.

    Mutates and returns ``state`` with refreshed embeddings. ``epochs=0``
    returns the state untouched. Deterministic given ``config.seed``.
    """
    config.validate()
    if epochs == 0:
        return state
    state.config = config
    _merge_interactions(state, interactions)
    a_hat = normalized_adjacency(state, graph)
    ops = _interaction_operators(state)
    params = state.trainable()
    optimizer = Adam(params, config.lr_1, config.adam_beta1,
                     config.adam_beta2, config.adam_eps)
    rng = np.random.default_rng(config.seed)
    positives = [(state.group_index[it.group_id], state.item_index[it.item_id])
                 for it in interactions]
    n_items = state.num_items
    hist = _history_mask(state)

    for _ in range(epochs):
        triples = _sample_triples(state, positives, n_items,
                                  config.negatives_per_positive, rng,
                                  hist=hist)
        if triples is None:
            break
        loss, grads = _loss_and_grads(state, a_hat, params, triples, ops=ops)
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"loss became {loss}; try a lower lr_1")
        optimizer.step(params, grads)

    state.P, state.Q = params["P"], params["Q"]
    for name in state.params:
        state.params[name] = params[name]
    fwd = _forward(state, a_hat, params, ops=ops)
    state.E0g, state.E0v = fwd["E0g"], fwd["E0v"]
    state.Eg, state.Ev = fwd["Eg"], fwd["Ev"]
    return state


def _history_mask(state) -> np.ndarray:
    """Dense (groups, items) membership mask over the merged history."""
    hist = np.zeros((state.num_groups, state.num_items), dtype=bool)
    for g, items in enumerate(state.history):
        if items:
            hist[g, list(items)] = True
    return hist


def _sample_triples(state, positives, n_items, negatives_per_positive, rng,
                    hist=None):
    # vectorized rejection sampling; each negative is uniform over the items
    # absent from the group's history, groups with full histories drop out
    usable = [(g, v) for g, v in positives if len(state.history[g]) < n_items]
    if not usable:
        return None
    base_g = np.array([g for g, _ in usable], dtype=np.int64)
    base_v = np.array([v for _, v in usable], dtype=np.int64)
    gi = np.repeat(base_g, negatives_per_positive)
    ui = np.repeat(base_v, negatives_per_positive)
    if hist is None:
        hist = _history_mask(state)
    vi = rng.integers(0, n_items, size=gi.shape[0])
    bad = hist[gi, vi]
    while bad.any():
        vi[bad] = rng.integers(0, n_items, size=int(bad.sum()))
        bad = hist[gi, vi]
    return gi, ui, vi


def check_gradients(state: ModelState, graph: GroupGraph, triples,
                    epsilon: float = 1e-5, param_names=None) -> float:
    """Max relative error between analytic gradients and central finite
    differences of the ranking loss, over the selected parameter arrays.

    Relative error uses max(|analytic|, |numeric|, 1e-3) as denominator so
    near-zero coordinates are compared absolutely.
    """
    if not (1e-7 <= epsilon <= 1e-3):
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    idx = _triples_to_indices(state, triples)
    a_hat = normalized_adjacency(state, graph)
    params = {k: v.copy() for k, v in state.trainable().items()}
    _, grads = _loss_and_grads(state, a_hat, params, idx)
    names = list(params) if param_names is None else list(param_names)
    worst = 0.0
    for name in names:
        arr = params[name]
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lo_plus, _ = _loss_and_grads(state, a_hat, params, idx, want_grads=False)
            flat[i] = orig - epsilon
            lo_minus, _ = _loss_and_grads(state, a_hat, params, idx, want_grads=False)
            flat[i] = orig
            numeric = (lo_plus - lo_minus) / (2.0 * epsilon)
            analytic = grads[name].reshape(-1)[i]
            denom = max(abs(analytic), abs(numeric), 1e-3)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


# -- persistence -----------------------------------------------------------

_MAGIC = b"GRPCAST1"
_FORMAT_VERSION = 1


def save_state(state: ModelState, path) -> None:
    """Write a versioned little-endian binary snapshot of the model."""
    header = {
        "config": asdict(state.config),
        "group_ids": state.group_ids,
        "item_ids": state.item_ids,
        "history": [sorted(h) for h in state.history],
        "recent_groups": {str(k): v for k, v in state.recent_groups.items()},
        "arrays": [],
    }
    arrays = []
    ordered = [("P", state.P), ("Q", state.Q), ("X", state.X), ("Y", state.Y)]
    ordered += sorted(state.params.items())
    ordered += [("E0g", state.E0g), ("Eg", state.Eg),
                ("E0v", state.E0v), ("Ev", state.Ev)]
    for name, arr in ordered:
        if arr is None:
            continue
        arr = np.ascontiguousarray(arr, dtype="<f8")
        header["arrays"].append({"name": name, "shape": list(arr.shape)})
        arrays.append(arr)
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(arr.tobytes())


def load_state(path) -> ModelState:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _MAGIC:
            raise VersionMismatch(f"bad magic {magic!r}")
        version, blob_len = struct.unpack("<II", fh.read(8))
        if version != _FORMAT_VERSION:
            raise VersionMismatch(f"unsupported model format version {version}")
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        state = ModelState(config=GgcnConfig(**header["config"]))
        state.group_ids = list(header["group_ids"])
        state.item_ids = list(header["item_ids"])
        state.group_index = {g: i for i, g in enumerate(state.group_ids)}
        state.item_index = {v: i for i, v in enumerate(state.item_ids)}
        state.history = [set(h) for h in header["history"]]
        state.recent_groups = {int(k): list(v)
                               for k, v in header["recent_groups"].items()}
        for meta in header["arrays"]:
            shape = tuple(meta["shape"])
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape).copy()
            name = meta["name"]
            if name in ("P", "Q", "X", "Y", "E0g", "Eg", "E0v", "Ev"):
                setattr(state, name, arr)
            else:
                state.params[name] = arr
    return state
