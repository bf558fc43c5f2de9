"""Hierarchical attention network over segmented event sequences.

Low level: within each group, event attention conditioned on the previous
GRU state pools event embeddings into a group vector. High level: a GRU
runs over the group vectors and temporal attention pools its outputs into
the sequence vector that feeds a logistic output unit.

The single-sequence functions (:func:`event_attention`, :func:`gru_step`,
:func:`temporal_attention`) are the reference operations. Training uses
:func:`forward_batch`, which evaluates the same equations on a padded,
masked mini-batch and keeps the intermediates needed for backprop.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from .events import EmbeddingTables, EncodedSequence, EventVocabulary, init_tables
from .segmentation import Segmentation

MODES = ("full", "no_event_attn", "no_temporal_attn")
PROB_CLIP = 1e-7


def normalize_mode(mode: str) -> str:
    m = mode.replace("-", "_")
    if m not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {', '.join(MODES)}")
    return m


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def softmax(x, mask=None, axis=-1):
    """Softmax with max subtraction; masked entries get weight 0."""
    x = np.asarray(x, dtype=np.float64)
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    x = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(x)
    return e / np.sum(e, axis=axis, keepdims=True)


@dataclass
class ModelParams:
    """All learnable tensors.

    GRU weights are stored per gate: ``gru_W*`` act on the group vector,
    ``gru_U*`` on the previous state, for the update (z), reset (r) and
    candidate (c) gates.
    """

    type_table: np.ndarray
    cat_table: np.ndarray
    num_directions: np.ndarray
    W_e: np.ndarray
    W_h: np.ndarray
    b_h: np.ndarray
    w_q: np.ndarray
    gru_Wz: np.ndarray
    gru_Wr: np.ndarray
    gru_Wc: np.ndarray
    gru_Uz: np.ndarray
    gru_Ur: np.ndarray
    gru_Uc: np.ndarray
    gru_bz: np.ndarray
    gru_br: np.ndarray
    gru_bc: np.ndarray
    w_temporal: np.ndarray
    w_p: np.ndarray
    b_p: np.ndarray

    EMBEDDING_NAMES = ("type_table", "cat_table", "num_directions")

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def items(self):
        return [(n, getattr(self, n)) for n in self.names()]

    def copy(self) -> ModelParams:
        return ModelParams(**{n: a.copy() for n, a in self.items()})

    @property
    def dims(self) -> dict[str, int]:
        return {
            "embedding_dim": self.type_table.shape[1],
            "attention_dim": self.W_e.shape[0],
            "hidden_dim": self.gru_Uz.shape[0],
        }

    @property
    def tables(self) -> EmbeddingTables:
        return EmbeddingTables(self.type_table, self.cat_table, self.num_directions)

    def n_parameters(self) -> int:
        return sum(a.size for _, a in self.items())

    def validate(self):
        N, H, S = (self.dims[k] for k in ("embedding_dim", "attention_dim", "hidden_dim"))
        expected = {
            "W_e": (H, N), "W_h": (H, S), "b_h": (H,), "w_q": (H,),
            "gru_Wz": (S, N), "gru_Wr": (S, N), "gru_Wc": (S, N),
            "gru_Uz": (S, S), "gru_Ur": (S, S), "gru_Uc": (S, S),
            "gru_bz": (S,), "gru_br": (S,), "gru_bc": (S,),
            "w_temporal": (S,), "w_p": (S,), "b_p": (1,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in self.EMBEDDING_NAMES:
            if getattr(self, name).shape[1] != N:
                raise ValueError(f"{name} width does not match embedding_dim {N}")
        for name, a in self.items():
            if not np.all(np.isfinite(a)):
                raise ValueError(f"{name} contains non-finite values")


def _glorot(rng, fan_out, fan_in):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def init_params(
    vocab: EventVocabulary,
    embedding_dim: int = 32,
    attention_dim: int = 64,
    hidden_dim: int = 64,
    rng: np.random.Generator | int | None = 0,
) -> ModelParams:
    rng = np.random.default_rng(rng)
    N, H, S = embedding_dim, attention_dim, hidden_dim
    tables = init_tables(vocab, N, rng)
    return ModelParams(
        type_table=tables.type_table,
        cat_table=tables.cat_table,
        num_directions=tables.num_directions,
        W_e=_glorot(rng, H, N),
        W_h=_glorot(rng, H, S),
        b_h=np.zeros(H),
        w_q=_glorot(rng, 1, H)[0],
        gru_Wz=_glorot(rng, S, N),
        gru_Wr=_glorot(rng, S, N),
        gru_Wc=_glorot(rng, S, N),
        gru_Uz=_orthogonal(rng, S),
        gru_Ur=_orthogonal(rng, S),
        gru_Uc=_orthogonal(rng, S),
        gru_bz=np.zeros(S),
        gru_br=np.zeros(S),
        gru_bc=np.zeros(S),
        w_temporal=_glorot(rng, 1, S)[0],
        w_p=_glorot(rng, 1, S)[0],
        b_p=np.zeros(1),
    )


# ---------------------------------------------------------------- reference ops


def event_attention(group: np.ndarray, h_prev: np.ndarray, params: ModelParams):
    """Attention weights over one group's event vectors ``[n, N]`` and the pooled vector."""
    group = np.atleast_2d(np.asarray(group, dtype=np.float64))
    hidden = np.tanh(group @ params.W_e.T + (params.W_h @ h_prev + params.b_h))
    alpha = softmax(hidden @ params.w_q)
    return alpha, alpha @ group


def gru_step(h_prev: np.ndarray, g: np.ndarray, params: ModelParams) -> np.ndarray:
    z = sigmoid(params.gru_Wz @ g + params.gru_Uz @ h_prev + params.gru_bz)
    r = sigmoid(params.gru_Wr @ g + params.gru_Ur @ h_prev + params.gru_br)
    c = np.tanh(params.gru_Wc @ g + r * (params.gru_Uc @ h_prev) + params.gru_bc)
    return (1.0 - z) * h_prev + z * c


def temporal_attention(outputs: np.ndarray, w_temporal: np.ndarray):
    """Weights over the columns of the ``[S, T]`` output matrix and their weighted sum."""
    outputs = np.asarray(outputs, dtype=np.float64)
    beta = softmax(w_temporal @ outputs)
    return beta, outputs @ beta


def loss(y: float, label: int) -> float:
    """Negative log-likelihood of one prediction, with clamped probability."""
    y = float(np.clip(y, PROB_CLIP, 1.0 - PROB_CLIP))
    return -(label * np.log(y) + (1 - label) * np.log(1.0 - y))


def batch_loss(y: np.ndarray, labels: np.ndarray) -> float:
    y = np.clip(np.asarray(y, dtype=np.float64), PROB_CLIP, 1.0 - PROB_CLIP)
    labels = np.asarray(labels, dtype=np.float64)
    return float(-np.sum(labels * np.log(y) + (1.0 - labels) * np.log(1.0 - y)))


# ---------------------------------------------------------------- batched engine


@dataclass
class Batch:
    """Padded mini-batch.

    Events of all sequences are flattened (length ``E``); ``pos_b``,
    ``pos_g``, ``pos_p`` give each flat event's (sequence, group, slot)
    coordinates in the padded ``[B, T, n]`` grid.
    """

    type_ids: np.ndarray
    cat_event: np.ndarray
    cat_ids: np.ndarray
    num_event: np.ndarray
    num_slot: np.ndarray
    num_z: np.ndarray
    pos_b: np.ndarray
    pos_g: np.ndarray
    pos_p: np.ndarray
    event_mask: np.ndarray
    group_mask: np.ndarray
    labels: np.ndarray

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.event_mask.shape

    @property
    def n_events(self) -> int:
        return len(self.type_ids)


def make_batch(
    encoded: Sequence[EncodedSequence],
    segmentations: Sequence[Segmentation],
    labels=None,
) -> Batch:
    if len(encoded) != len(segmentations):
        raise ValueError("need one segmentation per sequence")
    if not encoded:
        raise ValueError("empty batch")
    B = len(encoded)
    T = max(s.n_groups for s in segmentations)
    n = max(max(s.sizes) for s in segmentations)
    parts = {k: [] for k in ("type_ids", "cat_event", "cat_ids", "num_event", "num_slot",
                             "num_z", "pos_b", "pos_g", "pos_p")}
    group_mask = np.zeros((B, T), dtype=bool)
    offset = 0
    for b, (enc, seg) in enumerate(zip(encoded, segmentations)):
        L = len(enc)
        if seg.groups[-1][1] != L:
            raise ValueError(f"segmentation of sequence {b} does not cover its {L} events")
        gidx = seg.group_index()
        starts = np.repeat([a for a, _ in seg.groups], seg.sizes)
        parts["type_ids"].append(enc.type_ids)
        parts["cat_event"].append(enc.cat_event + offset)
        parts["cat_ids"].append(enc.cat_ids)
        parts["num_event"].append(enc.num_event + offset)
        parts["num_slot"].append(enc.num_slot)
        parts["num_z"].append(enc.num_z)
        parts["pos_b"].append(np.full(L, b, dtype=np.int64))
        parts["pos_g"].append(gidx)
        parts["pos_p"].append(np.arange(L) - starts)
        group_mask[b, : seg.n_groups] = True
        offset += L
    cat = {k: np.concatenate(v) for k, v in parts.items()}
    event_mask = np.zeros((B, T, n), dtype=bool)
    event_mask[cat["pos_b"], cat["pos_g"], cat["pos_p"]] = True
    if labels is None:
        labels = np.zeros(B)
    return Batch(event_mask=event_mask, group_mask=group_mask,
                 labels=np.asarray(labels, dtype=np.float64), **cat)


@dataclass
class BatchTrace:
    """Forward intermediates of one mini-batch, indexed ``[T, B, ...]`` per step."""

    mode: str
    V_flat: np.ndarray       # [E, N]
    V: np.ndarray            # [B, T, n, N]
    attn_mask: np.ndarray    # [B, T, n]
    alpha: np.ndarray        # [T, B, n]
    u: np.ndarray | None     # [T, B, n, H] tanh hidden layer of event attention
    g: np.ndarray            # [T, B, N]
    h_prev: np.ndarray       # [T, B, S]
    z: np.ndarray
    r: np.ndarray
    c: np.ndarray
    hu_c: np.ndarray         # [T, B, S] recurrent term of the candidate
    hidden: np.ndarray       # [B, T, S]
    beta: np.ndarray         # [B, T]
    s: np.ndarray            # [B, S]
    logit: np.ndarray        # [B]
    y: np.ndarray            # [B]


def embed_batch(params: ModelParams, batch: Batch) -> np.ndarray:
    v = params.type_table[batch.type_ids].copy()
    np.add.at(v, batch.cat_event, params.cat_table[batch.cat_ids])
    np.add.at(v, batch.num_event, batch.num_z[:, None] * params.num_directions[batch.num_slot])
    return v


def forward_batch(params: ModelParams, batch: Batch, mode: str = "full") -> BatchTrace:
    mode = normalize_mode(mode)
    B, T, n = batch.shape
    N = params.type_table.shape[1]
    S = params.gru_Uz.shape[0]

    V_flat = embed_batch(params, batch)
    V = np.zeros((B, T, n, N))
    V[batch.pos_b, batch.pos_g, batch.pos_p] = V_flat
    # padded groups get one zero-vector dummy event so softmax stays defined;
    # the group mask later discards the GRU update they produce
    attn_mask = batch.event_mask.copy()
    attn_mask[:, :, 0] |= ~batch.group_mask
    gmask = batch.group_mask.astype(np.float64)

    Wx = np.concatenate([params.gru_Wz, params.gru_Wr, params.gru_Wc])
    U = np.concatenate([params.gru_Uz, params.gru_Ur, params.gru_Uc])
    bg = np.concatenate([params.gru_bz, params.gru_br, params.gru_bc])

    use_event_attn = mode != "no_event_attn"
    if use_event_attn:
        E_pre = V @ params.W_e.T  # [B, T, n, H]
        u_all = np.empty((T, B, n, params.W_e.shape[0]))
    else:
        u_all = None
        counts = attn_mask.sum(axis=2, keepdims=True)
        mean_w = attn_mask / counts

    alpha = np.empty((T, B, n))
    g_all = np.empty((T, B, N))
    hp_all = np.empty((T, B, S))
    z_all = np.empty((T, B, S))
    r_all = np.empty((T, B, S))
    c_all = np.empty((T, B, S))
    huc_all = np.empty((T, B, S))
    hidden = np.empty((B, T, S))

    h = np.zeros((B, S))
    for i in range(T):
        hp_all[i] = h
        Vi = V[:, i]
        if use_event_attn:
            u = np.tanh(E_pre[:, i] + (h @ params.W_h.T + params.b_h)[:, None, :])
            u_all[i] = u
            a = softmax(u @ params.w_q, mask=attn_mask[:, i])
        else:
            a = mean_w[:, i]
        alpha[i] = a
        g = (a[:, None, :] @ Vi)[:, 0]
        g_all[i] = g

        xg = g @ Wx.T
        hu = h @ U.T
        z = sigmoid(xg[:, :S] + hu[:, :S] + bg[:S])
        r = sigmoid(xg[:, S:2 * S] + hu[:, S:2 * S] + bg[S:2 * S])
        huc = hu[:, 2 * S:]
        c = np.tanh(xg[:, 2 * S:] + r * huc + bg[2 * S:])
        z_all[i], r_all[i], c_all[i], huc_all[i] = z, r, c, huc
        h_new = (1.0 - z) * h + z * c
        m = gmask[:, i:i + 1]
        h = m * h_new + (1.0 - m) * h
        hidden[:, i] = h

    if mode == "no_temporal_attn":
        beta = np.zeros((B, T))
        beta[np.arange(B), batch.group_mask.sum(axis=1) - 1] = 1.0
        s = h
    else:
        beta = softmax(hidden @ params.w_temporal, mask=batch.group_mask)
        s = np.einsum("bt,bts->bs", beta, hidden)
    logit = s @ params.w_p + params.b_p[0]
    y = sigmoid(logit)
    return BatchTrace(
        mode=mode, V_flat=V_flat, V=V, attn_mask=attn_mask, alpha=alpha, u=u_all,
        g=g_all, h_prev=hp_all, z=z_all, r=r_all, c=c_all, hu_c=huc_all,
        hidden=hidden, beta=beta, s=s, logit=logit, y=y,
    )


def predict_batch(params: ModelParams, batch: Batch, mode: str = "full") -> np.ndarray:
    return forward_batch(params, batch, mode).y


@dataclass
class ForwardTrace:
    """Forward intermediates of one sequence."""

    alphas: list[np.ndarray]
    group_vectors: np.ndarray  # [T, N]
    hidden: np.ndarray         # [T, S], rows are h_1..h_T
    beta: np.ndarray           # [T]
    s: np.ndarray              # [S]
    y: float

    @property
    def outputs(self) -> np.ndarray:
        """The ``[S, T]`` output matrix."""
        return self.hidden.T


def trace_from_batch(trace: BatchTrace, batch: Batch, segmentations: Sequence[Segmentation]) -> list[ForwardTrace]:
    out = []
    for b, seg in enumerate(segmentations):
        T = seg.n_groups
        out.append(ForwardTrace(
            alphas=[trace.alpha[i, b, :size].copy() for i, size in enumerate(seg.sizes)],
            group_vectors=trace.g[:T, b].copy(),
            hidden=trace.hidden[b, :T].copy(),
            beta=trace.beta[b, :T].copy(),
            s=trace.s[b].copy(),
            y=float(trace.y[b]),
        ))
    return out


def forward(
    seq: EncodedSequence, params: ModelParams, mode: str = "full", segmentation: Segmentation | None = None
) -> ForwardTrace:
    if segmentation is None:
        from .segmentation import segment_adaptive
        segmentation = segment_adaptive(seq.times)
    batch = make_batch([seq], [segmentation])
    return trace_from_batch(forward_batch(params, batch, mode), batch, [segmentation])[0]
