"""Temporal group profiles from snapshot embedding sequences.

Each group's embedding trajectory across training snapshots feeds a small
recurrent autoencoder: a tanh encoder summarizes the sequence, a linear head
reconstructs the current embedding, and a second head predicts the next one.
The long-term profile is the prediction from the full history; the
short-term profile comes from a copy fine-tuned on the recent window. Both
BPTT gradients are hand-derived and finite-difference checked in the tests.
"""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field

import numpy as np

from .model import Adam

__all__ = [
    "RnnConfig",
    "RnnAutoencoder",
    "GroupProfile",
    "EmptySequence",
    "DimensionMismatch",
    "new_autoencoder",
    "train_snapshot_sequence",
    "fine_tune_short_term",
    "predict_next",
    "build_profiles",
    "serving_embedding",
    "rnn_check_gradients",
    "export_profiles_csv",
    "load_profiles_csv",
]


class EmptySequence(ValueError):
    """A snapshot sequence must contain at least one embedding."""


class DimensionMismatch(ValueError):
    pass


@dataclass
class RnnConfig:
    hidden_dim: int = 16
    lr_2: float = 1e-2
    lambda_2: float = 1e-5
    epochs: int = 200
    short_window: int = 2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self):
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if self.lr_2 <= 0:
            raise ValueError("lr_2 must be positive")
        if self.lambda_2 < 0:
            raise ValueError("lambda_2 must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.short_window < 1:
            raise ValueError("short_window must be >= 1")
        return self


@dataclass
class RnnAutoencoder:
    """Elman encoder with linear reconstruction and next-step heads.

    Parameters: W (input to hidden), U (hidden to hidden), b, R/r
    (reconstruction head), V/c (prediction head).
    """

    config: RnnConfig
    input_dim: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "RnnAutoencoder":
        return copy.deepcopy(self)


def new_autoencoder(input_dim: int, config: RnnConfig) -> RnnAutoencoder:
    config.validate()
    if input_dim < 1:
        raise DimensionMismatch("input_dim must be >= 1")
    rng = np.random.default_rng(config.seed)
    dh, d = config.hidden_dim, input_dim
    scale_in = 1.0 / np.sqrt(d)
    scale_h = 1.0 / np.sqrt(dh)
    params = {
        "W": rng.uniform(-scale_in, scale_in, (dh, d)),
        "U": rng.uniform(-scale_h, scale_h, (dh, dh)),
        "b": np.zeros(dh),
        "R": rng.uniform(-scale_h, scale_h, (d, dh)),
        "r": np.zeros(d),
        "V": rng.uniform(-scale_h, scale_h, (d, dh)),
        "c": np.zeros(d),
    }
    return RnnAutoencoder(config=config, input_dim=input_dim, params=params)


def _as_batch(sequences) -> np.ndarray:
    """Accept (T, d) or (n, T, d); returns (n, T, d)."""
    arr = np.asarray(sequences, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :]
    if arr.ndim != 3:
        raise DimensionMismatch("sequences must be (T, d) or (n, T, d)")
    if arr.shape[1] < 1:
        raise EmptySequence("need at least one snapshot embedding")
    return arr


def _forward(model: RnnAutoencoder, batch: np.ndarray):
    p = model.params
    n, T, d = batch.shape
    dh = model.config.hidden_dim
    if d != model.input_dim:
        raise DimensionMismatch(f"sequences have dim {d}, model expects {model.input_dim}")
    H = np.zeros((T + 1, n, dh))
    recon = np.zeros((T, n, d))
    pred = np.zeros((T, n, d))
    for t in range(T):
        a = batch[:, t] @ p["W"].T + H[t] @ p["U"].T + p["b"]
        H[t + 1] = np.tanh(a)
        recon[t] = H[t + 1] @ p["R"].T + p["r"]
        pred[t] = H[t + 1] @ p["V"].T + p["c"]
    return H, recon, pred


def _loss_and_grads(model: RnnAutoencoder, batch: np.ndarray, want_grads=True):
    """Reconstruction plus one-step-ahead prediction loss with L2 penalty."""
    p = model.params
    cfg = model.config
    n, T, d = batch.shape
    H, recon, pred = _forward(model, batch)

    recon_err = recon - np.transpose(batch, (1, 0, 2))
    loss = float(np.sum(recon_err**2)) / (n * T)
    pred_scale = 0.0
    if T > 1:
        pred_err = pred[: T - 1] - np.transpose(batch, (1, 0, 2))[1:]
        pred_scale = 1.0 / (n * (T - 1))
        loss += float(np.sum(pred_err**2)) * pred_scale
    reg = sum(float(np.sum(v * v)) for v in p.values())
    loss += cfg.lambda_2 * reg
    if not want_grads:
        return loss, None

    grads = {k: np.zeros_like(v) for k, v in p.items()}
    da_next = None
    for t in range(T - 1, -1, -1):
        g_recon = (2.0 / (n * T)) * recon_err[t]            # (n, d)
        grads["R"] += g_recon.T @ H[t + 1]
        grads["r"] += g_recon.sum(axis=0)
        dh = g_recon @ p["R"]
        if T > 1 and t < T - 1:
            g_pred = 2.0 * pred_scale * pred_err[t]
            grads["V"] += g_pred.T @ H[t + 1]
            grads["c"] += g_pred.sum(axis=0)
            dh += g_pred @ p["V"]
        if da_next is not None:
            dh += da_next @ p["U"]
        da = dh * (1.0 - H[t + 1] ** 2)
        grads["W"] += da.T @ batch[:, t]
        grads["U"] += da.T @ H[t]
        grads["b"] += da.sum(axis=0)
        da_next = da
    for k, v in p.items():
        grads[k] += 2.0 * cfg.lambda_2 * v
    return loss, grads


def train_snapshot_sequence(model: RnnAutoencoder, sequences, epochs=None) -> list[float]:
    """Full-batch Adam over all group trajectories; returns per-epoch losses.

    ``sequences`` is (n_groups, T, d) or a single (T, d) trajectory.
    """
    cfg = model.config
    batch = _as_batch(sequences)
    n_epochs = cfg.epochs if epochs is None else int(epochs)
    optimizer = Adam(model.params, cfg.lr_2, cfg.adam_beta1, cfg.adam_beta2,
                     cfg.adam_eps)
    losses = []
    for _ in range(n_epochs):
        loss, grads = _loss_and_grads(model, batch)
        if not np.isfinite(loss):
            raise FloatingPointError(f"loss became {loss}; try a lower lr_2")
        optimizer.step(model.params, grads)
        losses.append(loss)
    return losses


def fine_tune_short_term(model: RnnAutoencoder, sequences, window=None,
                         epochs=None) -> RnnAutoencoder:
    """Fine-tune a copy on the trailing ``window`` snapshots only; the
    original model is left untouched."""
    cfg = model.config
    batch = _as_batch(sequences)
    w = cfg.short_window if window is None else int(window)
    w = min(w, batch.shape[1])
    tuned = model.copy()
    train_snapshot_sequence(tuned, batch[:, -w:],
                            epochs=cfg.epochs if epochs is None else epochs)
    return tuned


def predict_next(model: RnnAutoencoder, sequence) -> np.ndarray:
    """Next-embedding prediction from the final encoder state.

    Accepts one (T, d) trajectory or an (n, T, d) batch; returns (d,) or
    (n, d) accordingly.
    """
    batch = _as_batch(sequence)
    H, _, pred = _forward(model, batch)
    out = pred[-1]
    return out[0] if np.asarray(sequence).ndim == 2 else out


@dataclass
class GroupProfile:
    """Long- and short-horizon next-embedding predictions for one group."""

    group_id: str
    long_term: np.ndarray
    short_term: np.ndarray


def serving_embedding(profile: GroupProfile) -> np.ndarray:
    """Embedding used at serving time: mean of the two horizons."""
    return 0.5 * (profile.long_term + profile.short_term)


def build_profiles(long_model: RnnAutoencoder, short_model: RnnAutoencoder,
                   sequences: dict[str, np.ndarray], window=None) -> dict[str, GroupProfile]:
    """Profiles for every group: long-term prediction from the full history,
    short-term from the fine-tuned model on the trailing window."""
    w = long_model.config.short_window if window is None else int(window)
    profiles = {}
    ids = list(sequences)
    if not ids:
        return profiles
    batch = np.stack([np.asarray(sequences[g], dtype=np.float64) for g in ids])
    long_pred = predict_next(long_model, batch)
    short_pred = predict_next(short_model, batch[:, -min(w, batch.shape[1]):])
    for i, g in enumerate(ids):
        profiles[g] = GroupProfile(group_id=g, long_term=long_pred[i],
                                   short_term=short_pred[i])
    return profiles


def rnn_check_gradients(model: RnnAutoencoder, sequences, epsilon=1e-5) -> float:
    """Max relative error of the hand BPTT against central differences."""
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    batch = _as_batch(sequences)
    _, grads = _loss_and_grads(model, batch)
    worst = 0.0
    for name, arr in model.params.items():
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            lp, _ = _loss_and_grads(model, batch, want_grads=False)
            flat[i] = orig - epsilon
            lm, _ = _loss_and_grads(model, batch, want_grads=False)
            flat[i] = orig
            numeric = (lp - lm) / (2 * epsilon)
            analytic = grads[name].reshape(-1)[i]
            denom = max(abs(analytic), abs(numeric), 1e-3)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def export_profiles_csv(profiles: dict[str, GroupProfile], path) -> None:
    """Deterministic CSV: one row per group, full-precision floats."""
    ids = sorted(profiles)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if not ids:
            writer.writerow(["group_id"])
            return
        d = profiles[ids[0]].long_term.shape[0]
        header = (["group_id"]
                  + [f"long_{j}" for j in range(d)]
                  + [f"short_{j}" for j in range(d)])
        writer.writerow(header)
        for g in ids:
            prof = profiles[g]
            row = [g] + [repr(float(x)) for x in prof.long_term] \
                      + [repr(float(x)) for x in prof.short_term]
            writer.writerow(row)


def load_profiles_csv(path) -> dict[str, GroupProfile]:
    profiles = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = sum(1 for h in header if h.startswith("long_"))
        for row in reader:
            g = row[0]
            vals = np.array([float(x) for x in row[1:]], dtype=np.float64)
            profiles[g] = GroupProfile(group_id=g, long_term=vals[:d],
                                       short_term=vals[d:])
    return profiles
