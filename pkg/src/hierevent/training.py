"""Gradients, Adam and the mini-batch training loop with early stopping."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .events import EncodedSequence
from .metrics import UndefinedMetricError, roc_auc
from .network import (
    PROB_CLIP,
    Batch,
    BatchTrace,
    ModelParams,
    batch_loss,
    forward_batch,
    make_batch,
    normalize_mode,
)
from .segmentation import Segmentation

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Raised when a mini-batch loss is not finite."""


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    mode: str = "full"
    segmentation: str = "adaptive"
    max_groups: int = 32
    group_size: int = 8
    embedding_dim: int = 32
    attention_dim: int = 64
    hidden_dim: int = 64

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.segmentation not in ("adaptive", "fixed"):
            raise ValueError(f"unknown segmentation {self.segmentation!r}")
        self.mode = normalize_mode(self.mode)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Gradients:
    """Dense gradient per parameter plus the embedding rows each batch touched."""

    arrays: dict[str, np.ndarray]
    touched: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]


def backward(trace: BatchTrace, batch: Batch, params: ModelParams) -> Gradients:
    """Gradients of the summed, clamped NLL of a batch with respect to every parameter."""
    mode = trace.mode
    B, T, n = batch.shape
    S = params.gru_Uz.shape[0]
    grads = {name: np.zeros_like(a) for name, a in params.items()}

    y = trace.y
    inside = (y > PROB_CLIP) & (y < 1.0 - PROB_CLIP)
    dlogit = np.where(inside, y - batch.labels, 0.0)
    grads["w_p"] = dlogit @ trace.s
    grads["b_p"] = np.array([dlogit.sum()])
    ds = dlogit[:, None] * params.w_p

    dhidden = np.zeros((B, T, S))
    if mode == "no_temporal_attn":
        dhidden[:, T - 1] += ds
    else:
        beta = trace.beta
        dhidden += beta[:, :, None] * ds[:, None, :]
        dbeta = np.einsum("bts,bs->bt", trace.hidden, ds)
        dlog = beta * (dbeta - np.sum(beta * dbeta, axis=1, keepdims=True))
        grads["w_temporal"] = np.einsum("bt,bts->s", dlog, trace.hidden)
        dhidden += dlog[:, :, None] * params.w_temporal

    Wx = np.concatenate([params.gru_Wz, params.gru_Wr, params.gru_Wc])
    U = np.concatenate([params.gru_Uz, params.gru_Ur, params.gru_Uc])
    dWx = np.zeros_like(Wx)
    dU = np.zeros_like(U)
    dbg = np.zeros(3 * S)
    dV = np.zeros_like(trace.V)
    gmask = batch.group_mask.astype(np.float64)
    event_attn = mode != "no_event_attn"
    if event_attn:
        dE_pre = np.zeros(trace.u.shape[1:2] + (T,) + trace.u.shape[2:])  # [B, T, n, H]
        dW_h = np.zeros_like(params.W_h)
        db_h = np.zeros_like(params.b_h)
        dw_q = np.zeros_like(params.w_q)

    dh = np.zeros((B, S))
    for i in reversed(range(T)):
        d_out = dhidden[:, i] + dh
        m = gmask[:, i:i + 1]
        hp = trace.h_prev[i]
        z, r, c, huc = trace.z[i], trace.r[i], trace.c[i], trace.hu_c[i]
        dhn = m * d_out
        dhp = (1.0 - m) * d_out + dhn * (1.0 - z)
        dpc = dhn * z * (1.0 - c * c)
        dpz = dhn * (c - hp) * z * (1.0 - z)
        dpr = dpc * huc * r * (1.0 - r)
        dxg = np.concatenate([dpz, dpr, dpc], axis=1)
        dhu = np.concatenate([dpz, dpr, dpc * r], axis=1)
        dWx += dxg.T @ trace.g[i]
        dU += dhu.T @ hp
        dbg += dxg.sum(axis=0)
        dg = dxg @ Wx
        dhp += dhu @ U

        a = trace.alpha[i]
        dV[:, i] += a[:, :, None] * dg[:, None, :]
        if event_attn:
            da = (trace.V[:, i] @ dg[:, :, None])[:, :, 0]
            dq = a * (da - np.sum(a * da, axis=1, keepdims=True))
            u = trace.u[i]
            dw_q += dq.reshape(-1) @ u.reshape(-1, u.shape[-1])
            dpre = dq[:, :, None] * params.w_q * (1.0 - u * u)
            dE_pre[:, i] = dpre
            dhh = dpre.sum(axis=1)
            dW_h += dhh.T @ hp
            db_h += dhh.sum(axis=0)
            dhp += dhh @ params.W_h
        dh = dhp

    grads["gru_Wz"], grads["gru_Wr"], grads["gru_Wc"] = np.split(dWx, 3)
    grads["gru_Uz"], grads["gru_Ur"], grads["gru_Uc"] = np.split(dU, 3)
    grads["gru_bz"], grads["gru_br"], grads["gru_bc"] = np.split(dbg, 3)
    if event_attn:
        grads["W_e"] = np.einsum("btnh,btnd->hd", dE_pre, trace.V)
        grads["W_h"], grads["b_h"], grads["w_q"] = dW_h, db_h, dw_q
        dV += dE_pre @ params.W_e

    dV_flat = dV[batch.pos_b, batch.pos_g, batch.pos_p]
    np.add.at(grads["type_table"], batch.type_ids, dV_flat)
    np.add.at(grads["cat_table"], batch.cat_ids, dV_flat[batch.cat_event])
    np.add.at(grads["num_directions"], batch.num_slot,
              batch.num_z[:, None] * dV_flat[batch.num_event])
    touched = {
        "type_table": np.unique(batch.type_ids),
        "cat_table": np.unique(batch.cat_ids),
        "num_directions": np.unique(batch.num_slot),
    }
    return Gradients(arrays=grads, touched=touched)


@dataclass
class AdamState:
    """First/second moments, a global step for dense tensors and per-row steps for embeddings."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    row_steps: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: ModelParams) -> AdamState:
        return cls(
            m={k: np.zeros_like(a) for k, a in params.items()},
            v={k: np.zeros_like(a) for k, a in params.items()},
            row_steps={k: np.zeros(getattr(params, k).shape[0], dtype=np.int64)
                       for k in ModelParams.EMBEDDING_NAMES},
        )


def adam_step(params: ModelParams, grads: Gradients, state: AdamState, config: TrainConfig):
    """One Adam update in place; embedding rows move only when the batch touched them."""
    b1, b2, lr, eps = config.beta1, config.beta2, config.learning_rate, config.eps
    state.step += 1
    for name, p in params.items():
        g = grads.arrays[name]
        m, v = state.m[name], state.v[name]
        if name in state.row_steps and name in grads.touched:
            rows = grads.touched[name]
            if rows.size == 0:
                continue
            state.row_steps[name][rows] += 1
            t = state.row_steps[name][rows][:, None]
            m[rows] = b1 * m[rows] + (1.0 - b1) * g[rows]
            v[rows] = b2 * v[rows] + (1.0 - b2) * g[rows] ** 2
            m_hat = m[rows] / (1.0 - b1 ** t)
            v_hat = v[rows] / (1.0 - b2 ** t)
            p[rows] -= lr * m_hat / (np.sqrt(v_hat) + eps)
        else:
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** state.step)
            v_hat = v / (1.0 - b2 ** state.step)
            p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


# ---------------------------------------------------------------- loop


def predict_proba_encoded(
    params: ModelParams,
    encoded: Sequence[EncodedSequence],
    segmentations: Sequence[Segmentation],
    mode: str = "full",
    chunk: int = 128,
) -> np.ndarray:
    """Probabilities for many sequences, batched by similar group counts."""
    out = np.empty(len(encoded))
    order = sorted(range(len(encoded)), key=lambda i: (segmentations[i].n_groups, i))
    for start in range(0, len(order), chunk):
        idx = order[start:start + chunk]
        batch = make_batch([encoded[i] for i in idx], [segmentations[i] for i in idx])
        out[idx] = forward_batch(params, batch, mode).y
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss_sum: float
    train_loss_mean: float
    val_auc: float | None
    wall_ms: float

    def to_dict(self) -> dict:
        return asdict(self)


def _validation_score(params, val, mode):
    enc, segs, labels = val
    y = predict_proba_encoded(params, enc, segs, mode)
    try:
        return roc_auc(y, labels)
    except UndefinedMetricError:
        # single-class validation split: fall back to (negated) mean loss
        return -batch_loss(y, labels) / len(labels)


def fit_params(
    params: ModelParams,
    train: tuple[Sequence[EncodedSequence], Sequence[Segmentation], np.ndarray],
    config: TrainConfig,
    val: tuple[Sequence[EncodedSequence], Sequence[Segmentation], np.ndarray] | None = None,
    verbose: bool = False,
):
    """Train ``params`` with Adam on shuffled mini-batches.

    With a validation set, returns the parameters of the epoch with the best
    validation AUC, stopping once ``patience`` epochs pass without a strict
    improvement. Without one, runs ``max_epochs`` and returns the last.
    Returns ``(params, log, best_epoch)``.
    """
    enc, segs, labels = train
    labels = np.asarray(labels, dtype=np.float64)
    n = len(enc)
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    state = AdamState.create(params)
    log: list[EpochRecord] = []
    best_score, best_params, best_epoch = -np.inf, params.copy(), 0
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            batch = make_batch([enc[i] for i in idx], [segs[i] for i in idx], labels[idx])
            trace = forward_batch(params, batch, config.mode)
            loss = batch_loss(trace.y, batch.labels)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite batch loss at epoch {epoch}, batch starting at {start}"
                )
            total += loss
            adam_step(params, backward(trace, batch, params), state, config)
        score = _validation_score(params, val, config.mode) if val is not None else None
        rec = EpochRecord(epoch, total, total / n, score, (time.perf_counter() - t0) * 1000.0)
        log.append(rec)
        if verbose:
            logger.info("epoch %d loss %.4f val_auc %s", epoch, rec.train_loss_mean, score)
        if val is None:
            best_params, best_epoch = params.copy(), epoch
            continue
        if score > best_score:
            best_score, best_params, best_epoch = score, params.copy(), epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    return best_params, log, best_epoch


def train(dataset, config: TrainConfig):
    """Train on a cohort's train split with early stopping on its validation split.

    The cohort's vocabulary and z-stats (fitted on its train split) are used
    as-is. Returns ``(fitted estimator, log)``; the estimator's ``params_``
    are the best-epoch parameters.
    """
    from .estimator import HierarchicalEventClassifier

    clf = HierarchicalEventClassifier.from_config(config)
    train_seqs = dataset.split("train")
    val_seqs = dataset.split("validation")
    clf.fit(
        train_seqs,
        [s.label for s in train_seqs],
        X_val=val_seqs or None,
        y_val=[s.label for s in val_seqs] if val_seqs else None,
        vocab=dataset.vocab,
        zstats=dataset.zstats,
    )
    return clf, clf.training_log_
