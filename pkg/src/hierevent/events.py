"""Clinical events, sequences, vocabularies and the additive event embedding.

An event embeds as the sum of its type vector, one lookup row per
categorical attribute value, and one learned direction per numerical
attribute slot scaled by the z-standardized value.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

OOV = "<oov>"
INIT_SCALE = 0.05


class EmptyVocabularyError(ValueError):
    """Raised when no event type survives the frequency threshold."""


@dataclass(frozen=True)
class ClinicalEvent:
    """A single timestamped record.

    ``cat`` holds ``(slot, value)`` pairs and ``num`` holds ``(slot, value)``
    pairs. Both are stored sorted by slot so attribute order never matters.
    """

    type: str
    time: int
    cat: tuple[tuple[str, str], ...] = ()
    num: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        if isinstance(self.time, bool) or not isinstance(self.time, (int, np.integer)):
            raise TypeError(f"event time must be an integer, got {self.time!r}")
        if self.time < 0:
            raise ValueError(f"event time must be >= 0, got {self.time}")
        object.__setattr__(self, "time", int(self.time))
        cat = tuple(sorted((str(k), str(v)) for k, v in self.cat))
        num = tuple(sorted((str(k), float(v)) for k, v in self.num))
        for kind, pairs in (("categorical", cat), ("numerical", num)):
            slots = [k for k, _ in pairs]
            if len(set(slots)) != len(slots):
                raise ValueError(f"duplicate {kind} attribute slot in event {self.type!r}")
        if any(not np.isfinite(v) for _, v in num):
            raise ValueError(f"non-finite numerical attribute in event {self.type!r}")
        object.__setattr__(self, "cat", cat)
        object.__setattr__(self, "num", num)


@dataclass(frozen=True)
class EventSequence:
    """One episode of a patient: time-sorted events plus an optional label."""

    patient_id: str
    events: tuple[ClinicalEvent, ...]
    label: int | None = None
    window_end: int | None = None

    def __post_init__(self):
        events = tuple(self.events)
        if not events:
            raise ValueError(f"sequence for patient {self.patient_id!r} has no events")
        # sorted() is stable, so ties keep their input order
        events = tuple(sorted(events, key=lambda e: e.time))
        object.__setattr__(self, "events", events)
        if self.label is not None:
            if self.label not in (0, 1):
                raise ValueError(f"label must be 0 or 1, got {self.label!r}")
            object.__setattr__(self, "label", int(self.label))
        if self.window_end is not None and events[-1].time > self.window_end:
            raise ValueError("event after window_end")

    def __len__(self):
        return len(self.events)

    @property
    def times(self) -> np.ndarray:
        return np.fromiter((e.time for e in self.events), dtype=np.int64, count=len(self.events))


def _ranked(counter: Counter, min_frequency: int) -> list:
    kept = [(k, c) for k, c in counter.items() if c >= min_frequency]
    kept.sort(key=lambda kc: (-kc[1], kc[0]))
    return [k for k, _ in kept]


@dataclass
class EventVocabulary:
    """Index maps for event types, categorical values and numerical slots.

    Index 0 of ``types`` and ``cat_values`` is the reserved OOV entry.
    """

    types: list[str]
    cat_values: list[tuple[str, str]]
    num_slots: list[str]
    type_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self._type_index = {t: i for i, t in enumerate(self.types)}
        self._cat_index = {tuple(cv): i for i, cv in enumerate(self.cat_values)}
        self._num_index = {s: i for i, s in enumerate(self.num_slots)}

    @property
    def n_types(self) -> int:
        return len(self.types)

    @property
    def n_cat_values(self) -> int:
        return len(self.cat_values)

    @property
    def n_num_slots(self) -> int:
        return len(self.num_slots)

    def type_index(self, name: str) -> int:
        return self._type_index.get(name, 0)

    def cat_index(self, slot: str, value: str) -> int:
        return self._cat_index.get((slot, value), 0)

    def num_index(self, slot: str) -> int | None:
        return self._num_index.get(slot)

    def __contains__(self, name: str) -> bool:
        return name in self._type_index and name != OOV

    def to_dict(self) -> dict:
        return {
            "types": list(self.types),
            "cat_values": [list(cv) for cv in self.cat_values],
            "num_slots": list(self.num_slots),
            "type_counts": dict(self.type_counts),
        }

    @classmethod
    def from_dict(cls, d: dict) -> EventVocabulary:
        return cls(
            types=list(d["types"]),
            cat_values=[tuple(cv) for cv in d["cat_values"]],
            num_slots=list(d["num_slots"]),
            type_counts={k: int(v) for k, v in d.get("type_counts", {}).items()},
        )


def build_vocab(sequences: Sequence[EventSequence], min_frequency: int = 0) -> EventVocabulary:
    """Build vocabularies from a corpus.

    Event types occurring fewer than ``min_frequency`` times are left out
    (they embed through the OOV row). Indices are assigned by descending
    frequency, ties broken lexicographically. Categorical values and
    numerical slots are collected from events of surviving types only.
    """
    if not sequences:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if min_frequency < 0:
        raise ValueError("min_frequency must be >= 0")
    type_counts = Counter(e.type for s in sequences for e in s.events)
    types = _ranked(type_counts, max(min_frequency, 1))
    if not types:
        raise EmptyVocabularyError(
            f"no event type occurs at least {min_frequency} times "
            f"({len(type_counts)} types observed)"
        )
    kept = set(types)
    cat_counts: Counter = Counter()
    num_slots: set[str] = set()
    for s in sequences:
        for e in s.events:
            if e.type in kept:
                cat_counts.update(e.cat)
                num_slots.update(k for k, _ in e.num)
    return EventVocabulary(
        types=[OOV] + types,
        cat_values=[(OOV, OOV)] + _ranked(cat_counts, 1),
        num_slots=sorted(num_slots),
        type_counts={t: type_counts[t] for t in types},
    )


@dataclass
class ZStats:
    """Per-slot mean and standard deviation of numerical attributes."""

    mean: np.ndarray
    std: np.ndarray

    def standardize(self, slot: int, value: float) -> float:
        sd = self.std[slot]
        if sd == 0:
            return 0.0
        return float((value - self.mean[slot]) / sd)


def fit_zstats(sequences: Iterable[EventSequence], vocab: EventVocabulary) -> ZStats:
    values: list[list[float]] = [[] for _ in range(vocab.n_num_slots)]
    for s in sequences:
        for e in s.events:
            for slot, v in e.num:
                k = vocab.num_index(slot)
                if k is not None:
                    values[k].append(v)
    mean = np.array([np.mean(v) if v else 0.0 for v in values], dtype=np.float64)
    std = np.array([np.std(v) if v else 0.0 for v in values], dtype=np.float64)
    return ZStats(mean=mean, std=std)


@dataclass
class EmbeddingTables:
    type_table: np.ndarray
    cat_table: np.ndarray
    num_directions: np.ndarray

    @property
    def dim(self) -> int:
        return self.type_table.shape[1]


def init_tables(vocab: EventVocabulary, dim: int, rng: np.random.Generator) -> EmbeddingTables:
    if dim <= 0:
        raise ValueError("embedding dimension must be positive")

    def u(rows):
        return rng.uniform(-INIT_SCALE, INIT_SCALE, size=(rows, dim))

    return EmbeddingTables(u(vocab.n_types), u(vocab.n_cat_values), u(vocab.n_num_slots))


@dataclass
class EncodedSequence:
    """Integer-coded form of an :class:`EventSequence`.

    Attributes are flattened into parallel arrays: ``cat_event[j]`` is the
    event position owning categorical row ``cat_ids[j]``, and likewise for
    the numerical arrays.
    """

    type_ids: np.ndarray
    times: np.ndarray
    cat_event: np.ndarray
    cat_ids: np.ndarray
    num_event: np.ndarray
    num_slot: np.ndarray
    num_z: np.ndarray

    def __len__(self):
        return len(self.type_ids)


def encode_sequence(seq: EventSequence, vocab: EventVocabulary, zstats: ZStats) -> EncodedSequence:
    type_ids, cat_event, cat_ids = [], [], []
    num_event, num_slot, num_z = [], [], []
    for i, e in enumerate(seq.events):
        type_ids.append(vocab.type_index(e.type))
        for slot, value in e.cat:
            cat_event.append(i)
            cat_ids.append(vocab.cat_index(slot, value))
        for slot, value in e.num:
            k = vocab.num_index(slot)
            if k is None:
                continue
            num_event.append(i)
            num_slot.append(k)
            num_z.append(zstats.standardize(k, value))
    return EncodedSequence(
        type_ids=np.asarray(type_ids, dtype=np.int64),
        times=seq.times,
        cat_event=np.asarray(cat_event, dtype=np.int64),
        cat_ids=np.asarray(cat_ids, dtype=np.int64),
        num_event=np.asarray(num_event, dtype=np.int64),
        num_slot=np.asarray(num_slot, dtype=np.int64),
        num_z=np.asarray(num_z, dtype=np.float64),
    )


def embed_encoded(enc: EncodedSequence, tables: EmbeddingTables) -> np.ndarray:
    """Embed every event of an encoded sequence, shape ``[L, N]``."""
    v = tables.type_table[enc.type_ids].copy()
    np.add.at(v, enc.cat_event, tables.cat_table[enc.cat_ids])
    np.add.at(v, enc.num_event, enc.num_z[:, None] * tables.num_directions[enc.num_slot])
    return v


def embed_event(
    event: ClinicalEvent, tables: EmbeddingTables, vocab: EventVocabulary, zstats: ZStats
) -> np.ndarray:
    v = tables.type_table[vocab.type_index(event.type)].copy()
    for slot, value in event.cat:
        v += tables.cat_table[vocab.cat_index(slot, value)]
    for slot, value in event.num:
        k = vocab.num_index(slot)
        if k is not None:
            v += zstats.standardize(k, value) * tables.num_directions[k]
    return v
