"""Bag-of-events presence vectors and an L2-regularized logistic regression baseline."""

from __future__ import annotations

import warnings

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.pipeline import make_pipeline
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .events import EventSequence, EventVocabulary, build_vocab
from .metrics import pr_auc, roc_auc


def bow_vectorize(seq: EventSequence, vocab: EventVocabulary) -> np.ndarray:
    """0/1 presence of each in-vocabulary event type (OOV ignored)."""
    x = np.zeros(vocab.n_types - 1)
    for e in seq.events:
        k = vocab.type_index(e.type)
        if k:
            x[k - 1] = 1.0
    return x


class BagOfEventsVectorizer(TransformerMixin, BaseEstimator):
    def __init__(self, min_frequency: int = 0):
        self.min_frequency = min_frequency

    def fit(self, X, y=None):
        self.vocab_ = build_vocab(list(X), self.min_frequency)
        return self

    def transform(self, X):
        check_is_fitted(self, "vocab_")
        X = list(X)
        out = np.zeros((len(X), self.vocab_.n_types - 1))
        for i, s in enumerate(X):
            out[i] = bow_vectorize(s, self.vocab_)
        return out

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "vocab_")
        return np.array(self.vocab_.types[1:], dtype=object)


class LogisticRegressionGD(ClassifierMixin, BaseEstimator):
    """Logistic regression minimizing ``sum NLL + l2/2 * ||w||^2`` (intercept unpenalized).

    Solved with damped Newton steps (backtracking line search) until the
    gradient norm drops below ``tol`` or ``max_iter`` iterations pass; warns
    with the final gradient norm if it did not converge.
    """

    def __init__(self, l2: float = 1.0, tol: float = 1e-6, max_iter: int = 2000):
        self.l2 = l2
        self.tol = tol
        self.max_iter = max_iter

    def _objective(self, wb, X, y):
        w, b = wb[:-1], wb[-1]
        z = X @ w + b
        # log(1 + e^z) - y z, computed stably
        nll = np.sum(np.logaddexp(0.0, z) - y * z)
        err = expit(z) - y
        grad = np.r_[X.T @ err + self.l2 * w, err.sum()]
        return nll + 0.5 * self.l2 * (w @ w), grad

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        if not np.all(np.isin(self.classes_, (0, 1))):
            raise ValueError("labels must be 0/1")
        y = y.astype(np.float64)
        Xb = np.column_stack([X, np.ones(len(X))])
        ridge = np.r_[np.full(X.shape[1], self.l2), 0.0]
        wb = np.zeros(X.shape[1] + 1)
        f, g = self._objective(wb, X, y)
        it = 0
        while it < self.max_iter and np.linalg.norm(g) >= self.tol:
            p = expit(Xb @ wb)
            hess = (Xb * (p * (1.0 - p))[:, None]).T @ Xb + np.diag(ridge)
            # a tiny jitter keeps the unpenalized intercept direction solvable
            step = np.linalg.solve(hess + 1e-12 * np.eye(len(wb)), g)
            t = 1.0
            while True:
                f_new, g_new = self._objective(wb - t * step, X, y)
                if f_new <= f - 1e-4 * t * (g @ step) or t < 1e-10:
                    break
                t *= 0.5
            wb, f, g = wb - t * step, f_new, g_new
            it += 1
        self.coef_ = wb[:-1]
        self.intercept_ = float(wb[-1])
        self.grad_norm_ = float(np.linalg.norm(g))
        self.n_iter_ = it
        if self.grad_norm_ >= self.tol:
            warnings.warn(
                f"logistic regression stopped after {self.n_iter_} iterations "
                f"with gradient norm {self.grad_norm_:.3g}",
                ConvergenceWarning,
                stacklevel=2,
            )
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_ + self.intercept_

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.decision_function(X) >= 0).astype(np.int64)


def make_bow_baseline(l2: float = 1.0):
    return make_pipeline(BagOfEventsVectorizer(), LogisticRegressionGD(l2=l2))


def train_lr_baseline(dataset, l2: float = 1.0):
    """Fit the presence-vector baseline on a cohort's train split.

    Returns ``(pipeline, metrics)`` with AUC/AUPRC on the validation and test
    splits (splits lacking a class are reported as ``None``).
    """
    model = make_bow_baseline(l2)
    model.fit(dataset.split("train"), dataset.labels("train"))
    metrics = {}
    for name in ("validation", "test"):
        seqs = dataset.split(name)
        if not seqs:
            continue
        labels = dataset.labels(name)
        p = model.predict_proba(seqs)[:, 1]
        try:
            metrics[name] = {"auc": roc_auc(p, labels), "auprc": pr_auc(p, labels)}
        except ValueError:
            metrics[name] = None
    return model, metrics
