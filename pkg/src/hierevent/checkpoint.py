"""Self-describing JSON checkpoints for fitted classifiers."""

from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .estimator import HierarchicalEventClassifier
from .events import EventVocabulary, ZStats
from .network import ModelParams

FORMAT = "hierevent-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    """Unreadable, unsupported or internally inconsistent checkpoint."""


class IncompatibleVocabularyError(ValueError):
    """Data cannot be scored with a checkpoint's vocabulary."""


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def checkpoint_dict(clf: HierarchicalEventClassifier, cohort: dict | None = None, extra: dict | None = None) -> dict:
    params = {n: {"shape": list(a.shape), "data": a.ravel().tolist()} for n, a in clf.params_.items()}
    return {
        "format": FORMAT,
        "version": VERSION,
        "dims": clf.params_.dims,
        "estimator": clf.get_params(),
        "vocab": clf.vocab_.to_dict(),
        "zstats": {"mean": clf.zstats_.mean.tolist(), "std": clf.zstats_.std.tolist()},
        "params": params,
        "best_epoch": int(getattr(clf, "best_epoch_", 0)),
        "cohort": cohort or {},
        "extra": extra or {},
    }


def save_checkpoint(clf: HierarchicalEventClassifier, path, cohort: dict | None = None,
                    extra: dict | None = None) -> None:
    atomic_write_text(path, json.dumps(checkpoint_dict(clf, cohort, extra), sort_keys=True))


def load_checkpoint(path) -> tuple[HierarchicalEventClassifier, dict]:
    """Rebuild a fitted classifier; returns ``(classifier, raw checkpoint dict)``."""
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(d, dict) or d.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if d.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {d.get('version')!r} (expected {VERSION})")
    try:
        arrays = {n: np.asarray(p["data"], dtype=np.float64).reshape(p["shape"])
                  for n, p in d["params"].items()}
        params = ModelParams(**arrays)
        params.validate()
        vocab = EventVocabulary.from_dict(d["vocab"])
        zstats = ZStats(np.asarray(d["zstats"]["mean"], dtype=np.float64),
                        np.asarray(d["zstats"]["std"], dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if params.type_table.shape[0] != vocab.n_types or params.cat_table.shape[0] != vocab.n_cat_values \
            or params.num_directions.shape[0] != vocab.n_num_slots:
        raise CheckpointError(f"{path}: embedding tables do not match the stored vocabulary")
    if len(zstats.mean) != vocab.n_num_slots:
        raise CheckpointError(f"{path}: z-stats do not match the numerical slots")
    clf = HierarchicalEventClassifier(**d["estimator"])
    clf.params_ = params
    clf.vocab_ = vocab
    clf.zstats_ = zstats
    clf.classes_ = np.array([0, 1])
    clf.best_epoch_ = d.get("best_epoch", 0)
    return clf, d


def check_vocabulary(clf: HierarchicalEventClassifier, sequences) -> None:
    """Raise if none of the data's event types are known to the model."""
    seen = {e.type for s in sequences for e in s.events}
    if seen and not any(t in clf.vocab_ for t in seen):
        sample = ", ".join(sorted(seen)[:5])
        raise IncompatibleVocabularyError(
            f"none of the {len(seen)} event types in the data (e.g. {sample}) "
            f"appear in the checkpoint vocabulary of {clf.vocab_.n_types - 1} types"
        )
