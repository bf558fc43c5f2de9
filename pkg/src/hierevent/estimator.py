"""Scikit-learn style classifier over :class:`~hierevent.events.EventSequence` inputs."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.multiclass import type_of_target
from sklearn.utils.validation import check_is_fitted

from .events import EventSequence, EventVocabulary, ZStats, build_vocab, encode_sequence, fit_zstats
from .network import ForwardTrace, init_params, make_batch, forward_batch, normalize_mode, trace_from_batch
from .segmentation import make_segmenter
from .training import TrainConfig, fit_params, predict_proba_encoded


def check_sequences(X) -> list[EventSequence]:
    if isinstance(X, EventSequence):
        raise TypeError("expected a collection of EventSequence, got a single sequence")
    X = list(X)
    for i, s in enumerate(X):
        if not isinstance(s, EventSequence):
            raise TypeError(f"element {i} is {type(s).__name__}, expected EventSequence")
    return X


def check_binary_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if len(y) != n:
        raise ValueError(f"found {n} sequences but {len(y)} labels")
    if n and (type_of_target(y) not in ("binary", "multiclass") or not np.all(np.isin(y, (0, 1)))):
        raise ValueError("labels must be 0/1")
    return y.astype(np.int64)


class HierarchicalEventClassifier(ClassifierMixin, BaseEstimator):
    """Binary classifier with adaptive segmentation and hierarchical attention.

    Parameters
    ----------
    embedding_dim, attention_dim, hidden_dim : int
        Event embedding size, event-attention hidden layer size and GRU state size.
    mode : {"full", "no_event_attn", "no_temporal_attn"}
        ``no_event_attn`` mean-pools each group; ``no_temporal_attn`` uses the
        final GRU state as the sequence vector.
    segmentation : {"adaptive", "fixed"}
        Adaptive minimax-span groups (at most ``max_groups``) or fixed chunks
        of ``group_size`` events.
    validation_fraction : float
        Share of the training data held out for early stopping when no
        explicit validation set is passed to :meth:`fit`.
    """

    def __init__(
        self,
        embedding_dim: int = 32,
        attention_dim: int = 64,
        hidden_dim: int = 64,
        mode: str = "full",
        segmentation: str = "adaptive",
        max_groups: int = 32,
        group_size: int = 8,
        batch_size: int = 32,
        learning_rate: float = 1e-3,
        max_epochs: int = 50,
        patience: int = 5,
        validation_fraction: float = 0.1,
        min_type_frequency: int = 0,
        random_state: int = 0,
        verbose: bool = False,
    ):
        self.embedding_dim = embedding_dim
        self.attention_dim = attention_dim
        self.hidden_dim = hidden_dim
        self.mode = mode
        self.segmentation = segmentation
        self.max_groups = max_groups
        self.group_size = group_size
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.min_type_frequency = min_type_frequency
        self.random_state = random_state
        self.verbose = verbose

    @classmethod
    def from_config(cls, config: TrainConfig, **kwargs) -> HierarchicalEventClassifier:
        return cls(
            embedding_dim=config.embedding_dim,
            attention_dim=config.attention_dim,
            hidden_dim=config.hidden_dim,
            mode=config.mode,
            segmentation=config.segmentation,
            max_groups=config.max_groups,
            group_size=config.group_size,
            batch_size=config.batch_size,
            learning_rate=config.learning_rate,
            max_epochs=config.max_epochs,
            patience=config.patience,
            random_state=config.seed,
            **kwargs,
        )

    def to_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.random_state,
            mode=self.mode,
            segmentation=self.segmentation,
            max_groups=self.max_groups,
            group_size=self.group_size,
            embedding_dim=self.embedding_dim,
            attention_dim=self.attention_dim,
            hidden_dim=self.hidden_dim,
        )

    def _segmenter(self):
        return make_segmenter(self.segmentation, self.max_groups, self.group_size)

    def _prepare(self, X: Sequence[EventSequence]):
        encoded = [encode_sequence(s, self.vocab_, self.zstats_) for s in X]
        segs = self._segmenter().transform(X)
        return encoded, segs

    def fit(self, X, y, X_val=None, y_val=None, vocab: EventVocabulary | None = None,
            zstats: ZStats | None = None):
        X = check_sequences(X)
        y = check_binary_labels(y, len(X))
        config = self.to_config()
        if X_val is None and self.validation_fraction > 0 and len(X) > 1:
            counts = np.bincount(y, minlength=2)
            stratify = y if counts.min() >= 2 else None
            X, X_val, y, y_val = train_test_split(
                X, y, test_size=self.validation_fraction,
                random_state=self.random_state, stratify=stratify,
            )
        self.classes_ = np.array([0, 1])
        self.vocab_ = vocab if vocab is not None else build_vocab(X, self.min_type_frequency)
        self.zstats_ = zstats if zstats is not None else fit_zstats(X, self.vocab_)

        train = (*self._prepare(X), y)
        val = None
        if X_val is not None:
            X_val = check_sequences(X_val)
            y_val = check_binary_labels(y_val, len(X_val))
            val = (*self._prepare(X_val), y_val)
        params = init_params(self.vocab_, self.embedding_dim, self.attention_dim,
                             self.hidden_dim, rng=self.random_state)
        self.params_, log, self.best_epoch_ = fit_params(params, train, config, val, self.verbose)
        self.training_log_ = [r.to_dict() for r in log]
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_sequences(X)
        if not X:
            return np.empty((0, 2))
        enc, segs = self._prepare(X)
        p = predict_proba_encoded(self.params_, enc, segs, normalize_mode(self.mode))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def traces(self, X, chunk: int = 64) -> list[ForwardTrace]:
        """Per-sequence forward traces (attention weights, hidden states, prediction)."""
        check_is_fitted(self, "params_")
        X = check_sequences(X)
        enc, segs = self._prepare(X)
        out: list[ForwardTrace] = []
        for start in range(0, len(X), chunk):
            e, s = enc[start:start + chunk], segs[start:start + chunk]
            batch = make_batch(e, s)
            out.extend(trace_from_batch(forward_batch(self.params_, batch, self.mode), batch, s))
        return out

    def segment(self, X):
        return self._segmenter().transform(check_sequences(X))
