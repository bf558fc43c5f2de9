"""Event-log ingestion, cohort construction and synthetic data generation.

Events file (JSON Lines, one event per line)::

    {"patient": "p1", "t": 1500000000, "type": "lab:ph", "cat": {"flag": "abnormal"}, "num": {"value": 7.1}}

Labels file (JSON Lines, one outcome per line)::

    {"patient": "p1", "outcome_t": 1500300000, "label": 1}
"""

from __future__ import annotations

import json
import math
import os
import warnings
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .events import ClinicalEvent, EventSequence, EventVocabulary, ZStats, build_vocab, fit_zstats

HOUR = 3600
# 2500 occurrences out of ~20.3M events in the death-prediction corpus
DEFAULT_MIN_EVENT_RATE = 2500 / 20_290_879 * 1e6


class SchemaError(ValueError):
    """Raised for malformed input lines; ``errors`` holds ``(line_no, message)`` pairs."""

    def __init__(self, path, errors):
        self.path = str(path)
        self.errors = list(errors)
        head = "; ".join(f"line {n}: {m}" for n, m in self.errors[:5])
        more = f" (+{len(self.errors) - 5} more)" if len(self.errors) > 5 else ""
        super().__init__(f"{self.path}: {len(self.errors)} malformed line(s): {head}{more}")


class EmptyCohortError(ValueError):
    """Raised when the cohort filters remove every sample."""


# ---------------------------------------------------------------- file formats


def _parse_event(obj) -> tuple[str, ClinicalEvent]:
    if not isinstance(obj, dict):
        raise ValueError("line is not a JSON object")
    missing = [k for k in ("patient", "t", "type") if k not in obj]
    if missing:
        raise ValueError(f"missing field(s) {', '.join(missing)}")
    patient, t, etype = obj["patient"], obj["t"], obj["type"]
    if not isinstance(patient, (str, int)) or isinstance(patient, bool):
        raise ValueError("'patient' must be a string")
    if not isinstance(etype, str) or not etype:
        raise ValueError("'type' must be a non-empty string")
    if isinstance(t, bool) or not isinstance(t, (int, float)) or not math.isfinite(t):
        raise ValueError("'t' must be a number of seconds")
    cat = obj.get("cat") or {}
    num = obj.get("num") or {}
    if not isinstance(cat, dict) or not isinstance(num, dict):
        raise ValueError("'cat' and 'num' must be objects")
    for k, v in num.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ValueError(f"numerical attribute {k!r} is not a number")
    event = ClinicalEvent(
        type=etype,
        time=int(math.floor(t)),
        cat=tuple((k, str(v)) for k, v in cat.items()),
        num=tuple((k, float(v)) for k, v in num.items()),
    )
    return str(patient), event


def _read_jsonl(path, parse, skip_bad_lines: bool):
    path = Path(path)
    rows, errors = [], []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rows.append(parse(json.loads(line)))
            except (ValueError, TypeError) as exc:
                errors.append((line_no, str(exc)))
    if errors:
        if not skip_bad_lines:
            raise SchemaError(path, errors)
        warnings.warn(str(SchemaError(path, errors)), stacklevel=3)
    return rows


def ingest(path, skip_bad_lines: bool = False) -> list[EventSequence]:
    """Read an events file into unlabeled, time-sorted sequences, one per patient.

    Patients are returned sorted by id; events with equal times keep their
    file order.
    """
    rows = _read_jsonl(path, _parse_event, skip_bad_lines)
    if not rows:
        warnings.warn(f"{path}: no events found", stacklevel=2)
        return []
    by_patient: dict[str, list[ClinicalEvent]] = defaultdict(list)
    for patient, event in rows:
        by_patient[patient].append(event)
    return [EventSequence(p, tuple(by_patient[p])) for p in sorted(by_patient)]


def _event_obj(patient: str, e: ClinicalEvent) -> dict:
    obj = {"patient": patient, "t": e.time, "type": e.type}
    if e.cat:
        obj["cat"] = dict(e.cat)
    if e.num:
        obj["num"] = dict(e.num)
    return obj


def export_events(sequences: Iterable[EventSequence], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in sequences:
            for e in s.events:
                fh.write(json.dumps(_event_obj(s.patient_id, e), sort_keys=True) + "\n")


@dataclass(frozen=True)
class OutcomeLabel:
    patient: str
    outcome_t: int
    label: int


def _parse_label(obj) -> OutcomeLabel:
    if not isinstance(obj, dict):
        raise ValueError("line is not a JSON object")
    missing = [k for k in ("patient", "outcome_t", "label") if k not in obj]
    if missing:
        raise ValueError(f"missing field(s) {', '.join(missing)}")
    t, label = obj["outcome_t"], obj["label"]
    if isinstance(t, bool) or not isinstance(t, (int, float)) or not math.isfinite(t):
        raise ValueError("'outcome_t' must be a number of seconds")
    if label not in (0, 1) or isinstance(label, bool):
        raise ValueError("'label' must be 0 or 1")
    return OutcomeLabel(str(obj["patient"]), int(math.floor(t)), int(label))


def read_labels(path, skip_bad_lines: bool = False) -> list[OutcomeLabel]:
    return _read_jsonl(path, _parse_label, skip_bad_lines)


def write_labels(labels: Iterable[OutcomeLabel], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for lab in labels:
            fh.write(json.dumps(asdict(lab), sort_keys=True) + "\n")


# ---------------------------------------------------------------- cohort


@dataclass(frozen=True)
class Admission:
    """Raw events of one labeled outcome. ``start_t`` is fixed at creation so
    later event filtering cannot change the admission span."""

    patient: str
    events: tuple[ClinicalEvent, ...]
    outcome_t: int
    label: int
    start_t: int


def make_admissions(sequences: Sequence[EventSequence], labels: Sequence[OutcomeLabel]):
    """Pair outcome labels with patient events; returns ``(admissions, n_without_events)``."""
    by_patient = {s.patient_id: s for s in sequences}
    out, missing = [], 0
    for lab in labels:
        seq = by_patient.get(lab.patient)
        if seq is None:
            missing += 1
            continue
        out.append(Admission(lab.patient, seq.events, lab.outcome_t, lab.label, seq.events[0].time))
    return out, missing


def drop_short_admissions(admissions: Iterable[Admission], min_span_hours: float) -> list[Admission]:
    limit = min_span_hours * HOUR
    return [a for a in admissions if a.outcome_t - a.start_t >= limit]


def drop_rare_types(admissions: Iterable[Admission], kept_types: set[str] | None) -> list[Admission]:
    """Remove events whose type is not in ``kept_types`` (``None`` keeps everything)."""
    if kept_types is None:
        return list(admissions)
    return [
        Admission(a.patient, tuple(e for e in a.events if e.type in kept_types),
                  a.outcome_t, a.label, a.start_t)
        for a in admissions
    ]


def frequent_types(admissions: Iterable[Admission], min_event_rate: float) -> set[str] | None:
    """Types whose share of all events is at least ``min_event_rate`` per million."""
    if min_event_rate <= 0:
        return None
    counts = Counter(e.type for a in admissions for e in a.events)
    threshold = min_event_rate * sum(counts.values()) / 1e6
    return {t for t, c in counts.items() if c >= threshold}


def to_episode(a: Admission, window_hours: float) -> EventSequence | None:
    """Events strictly before ``outcome_t - window``; ``None`` if nothing remains."""
    cutoff = a.outcome_t - int(round(window_hours * HOUR))
    events = tuple(e for e in a.events if e.time < cutoff)
    if not events:
        return None
    return EventSequence(a.patient, events, label=a.label, window_end=cutoff)


def split_patients(patients: Iterable[str], ratios=(0.7, 0.1, 0.2), seed: int = 0):
    """Seeded patient-level split into train/validation/test id sets."""
    patients = sorted(set(patients))
    if not np.isclose(sum(ratios), 1.0):
        raise ValueError("split ratios must sum to 1")
    perm = np.random.default_rng(seed).permutation(len(patients))
    n_train = int(round(ratios[0] * len(patients)))
    n_val = int(round(ratios[1] * len(patients)))
    ordered = [patients[i] for i in perm]
    return (set(ordered[:n_train]), set(ordered[n_train:n_train + n_val]),
            set(ordered[n_train + n_val:]))


@dataclass
class CohortDataset:
    sequences: list[EventSequence]
    train_idx: list[int]
    val_idx: list[int]
    test_idx: list[int]
    vocab: EventVocabulary
    zstats: ZStats
    report: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    SPLITS = ("train", "validation", "test")

    def indices(self, name: str) -> list[int]:
        return {"train": self.train_idx, "validation": self.val_idx, "test": self.test_idx}[name]

    def split(self, name: str) -> list[EventSequence]:
        return [self.sequences[i] for i in self.indices(name)]

    def labels(self, name: str) -> np.ndarray:
        return np.array([s.label for s in self.split(name)], dtype=np.int64)

    def split_patients(self) -> dict[str, list[str]]:
        return {n: sorted({self.sequences[i].patient_id for i in self.indices(n)}) for n in self.SPLITS}


def build_cohort(
    sequences: Sequence[EventSequence],
    outcome_labels: Sequence[OutcomeLabel],
    min_event_rate: float = DEFAULT_MIN_EVENT_RATE,
    min_span_hours: float = 36.0,
    window_hours: float = 24.0,
    ratios=(0.7, 0.1, 0.2),
    seed: int = 0,
    kept_types: set[str] | None = None,
    split: bool = True,
) -> CohortDataset:
    """Assemble labeled episodes and a patient-level split.

    Event-type frequencies are counted on the raw events of train-split
    patients only. Pass ``kept_types`` to reuse a fitted type set (e.g. at
    evaluation time); ``split=False`` puts every sample in the test split.
    """
    admissions, missing = make_admissions(sequences, outcome_labels)
    report = {"labels": len(outcome_labels), "dropped_no_events": missing}
    if split:
        train_p, val_p, test_p = split_patients([a.patient for a in admissions], ratios, seed)
    else:
        train_p, val_p, test_p = set(), set(), {a.patient for a in admissions}
    if kept_types is None:
        kept_types = frequent_types([a for a in admissions if a.patient in train_p], min_event_rate)
    n0 = len(admissions)
    admissions = drop_short_admissions(admissions, min_span_hours)
    report["dropped_short_span"] = n0 - len(admissions)
    n_events = sum(len(a.events) for a in admissions)
    admissions = drop_rare_types(admissions, kept_types)
    report["dropped_rare_events"] = n_events - sum(len(a.events) for a in admissions)

    episodes, empty = [], 0
    for a in admissions:
        ep = to_episode(a, window_hours)
        if ep is None:
            empty += 1
        else:
            episodes.append(ep)
    report["dropped_empty_episode"] = empty
    if not episodes:
        raise EmptyCohortError(
            "cohort is empty after filtering: "
            + ", ".join(f"{k}={v}" for k, v in report.items())
        )
    idx = {"train": [], "validation": [], "test": []}
    for i, ep in enumerate(episodes):
        name = "train" if ep.patient_id in train_p else "validation" if ep.patient_id in val_p else "test"
        idx[name].append(i)
    report.update({f"n_{k}": len(v) for k, v in idx.items()})
    fit_on = [episodes[i] for i in idx["train"]] or episodes
    vocab = build_vocab(fit_on, 0)
    return CohortDataset(
        sequences=episodes,
        train_idx=idx["train"],
        val_idx=idx["validation"],
        test_idx=idx["test"],
        vocab=vocab,
        zstats=fit_zstats(fit_on, vocab),
        report=report,
        settings={
            "min_event_rate": min_event_rate,
            "min_span_hours": min_span_hours,
            "window_hours": window_hours,
            "ratios": list(ratios),
            "seed": seed,
            "kept_types": sorted(kept_types) if kept_types is not None else None,
        },
    )


# ---------------------------------------------------------------- synthetic data


@dataclass
class GeneratorSpec:
    """Synthetic cohort with bursty, irregular event timing and planted label rules.

    Each patient gets one rule. ``cooccurrence``: the label is positive when
    the two ``cooc_types`` fall in the same burst within ``cooc_window``
    seconds, negative when they are neighbours in event order but straddle
    the quiet gap between two consecutive bursts.
    ``order``: positive when an ``order_types[0]`` burst precedes an
    ``order_types[1]`` burst, negative when reversed. Both critical types of
    a rule are present in every sample governed by it, so event presence
    alone carries no label information. Labels are flipped with probability
    ``noise``.

    Bursts behave like lab panels: with ``burst_spread=0`` every event of a
    burst shares one timestamp, otherwise within-burst gaps are log-uniform
    up to ``burst_spread`` seconds. A ``near_burst_fraction`` share of the
    background events trails a burst by one second to an hour, the rest is
    uniform over the horizon.
    """

    seed: int = 0
    n_patients: int = 1000
    vocab_size: int = 40
    positive_rate: float = 0.5
    noise: float = 0.05
    rule_mix: dict = field(default_factory=lambda: {"cooccurrence": 0.5, "order": 0.5})
    cooc_types: tuple[str, str] = ("crit_a", "crit_b")
    cooc_window: int = 30
    order_types: tuple[str, str] = ("order_x", "order_y")
    n_bursts: tuple[int, int] = (8, 14)
    burst_size: tuple[int, int] = (4, 12)
    burst_spread: int = 0
    background_events: tuple[int, int] = (4, 10)
    near_burst_fraction: float = 0.5
    horizon_hours: tuple[float, float] = (48.0, 96.0)
    min_burst_separation: int = 1800
    start_time: int = 1_500_000_000

    def __post_init__(self):
        if self.n_patients < 0:
            raise ValueError("n_patients must be >= 0")
        if not 0 <= self.noise <= 0.5:
            raise ValueError("noise must be in [0, 0.5]")
        if not 0 < self.positive_rate < 1:
            raise ValueError("positive_rate must be in (0, 1)")
        if self.burst_spread < 0:
            raise ValueError("burst_spread must be >= 0")
        if self.n_bursts[0] < 3:
            raise ValueError("need at least 3 bursts per patient")
        unknown = set(self.rule_mix) - {"cooccurrence", "order"}
        if unknown or not self.rule_mix:
            raise ValueError(f"rule_mix keys must be 'cooccurrence'/'order', got {sorted(self.rule_mix)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cooc_types"], d["order_types"] = list(self.cooc_types), list(self.order_types)
        return d


@dataclass
class GeneratedData:
    sequences: list[EventSequence]
    outcomes: list[OutcomeLabel]
    truth: list[dict]

    @property
    def labels(self) -> np.ndarray:
        return np.array([o.label for o in self.outcomes], dtype=np.int64)


def _noise_types(rng, weights, names, k: int) -> list[str]:
    return [names[i] for i in rng.choice(len(names), size=k, p=weights)]


def _burst_times(rng, spec: GeneratorSpec, horizon: int, n: int) -> np.ndarray:
    # rejection keeps bursts apart so each reads as its own episode
    for _ in range(1000):
        t = np.sort(rng.integers(0, horizon, size=n))
        t[0] = 0
        if np.all(np.diff(t) >= spec.min_burst_separation):
            return t
    return np.arange(n) * max(spec.min_burst_separation, horizon // n)


def _gaps(rng, spec: GeneratorSpec, k: int) -> np.ndarray:
    if spec.burst_spread == 0:
        return np.zeros(k, dtype=np.int64)
    return np.exp(rng.uniform(0.0, np.log(spec.burst_spread), size=k)).astype(np.int64)


def _gap(rng, spec: GeneratorSpec) -> int:
    return int(_gaps(rng, spec, 1)[0])


def _generate_one(rng, spec: GeneratorSpec, pid: str, names, weights):
    horizon = int(rng.uniform(*spec.horizon_hours) * HOUR)
    n_b = int(rng.integers(spec.n_bursts[0], spec.n_bursts[1] + 1))
    centers = spec.start_time + int(rng.integers(0, 10_000_000)) + _burst_times(rng, spec, horizon, n_b)

    rules = sorted(spec.rule_mix)
    probs = np.array([spec.rule_mix[r] for r in rules], dtype=float)
    rule = rules[rng.choice(len(rules), p=probs / probs.sum())]
    clean = int(rng.random() < spec.positive_rate)

    # each burst: list of (time, type, planted?)
    bursts = []
    for c in centers:
        k = int(rng.integers(spec.burst_size[0], spec.burst_size[1] + 1))
        times = c + np.r_[0, np.cumsum(_gaps(rng, spec, k - 1))]
        bursts.append([(int(t), name, False) for t, name in zip(times, _noise_types(rng, weights, names, k))])

    if rule == "cooccurrence":
        pair = list(spec.cooc_types)
        if rng.random() < 0.5:
            pair.reverse()
        if clean:
            # adjacent pair inside one burst, within the window
            host = bursts[int(rng.integers(0, n_b))]
            pos = int(rng.integers(0, len(host) + 1))
            lo = host[pos - 1][0] if pos > 0 else host[0][0] - spec.burst_spread
            hi = host[pos][0] if pos < len(host) else host[-1][0] + spec.burst_spread
            t1 = int(rng.integers(lo, hi + 1))
            t2 = int(rng.integers(t1, min(hi, t1 + spec.cooc_window) + 1))
            host[pos:pos] = [(t1, pair[0], True), (t2, pair[1], True)]
        else:
            # equally adjacent in event order, but across the gap between two bursts
            i = int(rng.integers(0, n_b - 1))
            bursts[i].append((bursts[i][-1][0] + _gap(rng, spec), pair[0], True))
            bursts[i + 1].insert(0, (bursts[i + 1][0][0] - _gap(rng, spec), pair[1], True))
    else:
        x, y = spec.order_types
        first, second = (x, y) if clean else (y, x)
        i = int(rng.integers(0, n_b - 2))
        j = int(rng.integers(i + 2, n_b))
        for b, name in ((i, first), (j, second)):
            pos = int(rng.integers(1, len(bursts[b]) + 1))
            bursts[b].insert(pos, (bursts[b][pos - 1][0], name, True))

    n_bg = int(rng.integers(spec.background_events[0], spec.background_events[1] + 1))
    raw = [ev for burst in bursts for ev in burst]
    near = rng.random(n_bg) < spec.near_burst_fraction
    offsets = np.where(
        near,
        centers[rng.integers(0, n_b, size=n_bg)] - centers[0] + np.exp(rng.uniform(0.0, np.log(HOUR), size=n_bg)),
        rng.integers(0, horizon, size=n_bg),
    ).astype(np.int64)
    raw += [(int(centers[0] + t), name, False)
            for t, name in zip(offsets, _noise_types(rng, weights, names, n_bg))]
    raw.sort(key=lambda ev: ev[0])

    rank = {n: r for r, n in enumerate(names)}
    # attributes: a categorical flag and a numerical value whose mean depends on the type
    abnormal = rng.random(len(raw)) < 0.3
    values = np.round(rng.normal([rank.get(name, len(names)) % 7 for _, name, _ in raw], 1.0), 4)
    events, critical_idx = [], []
    for idx, (t, name, planted) in enumerate(raw):
        cat = (("flag", "abnormal" if abnormal[idx] else "normal"),)
        events.append(ClinicalEvent(name, t, cat, (("value", float(values[idx])),)))
        if planted:
            critical_idx.append(idx)

    label = clean ^ int(rng.random() < spec.noise)
    last = events[-1].time
    outcome_t = max(last + 24 * HOUR, events[0].time + 36 * HOUR) + int(rng.integers(HOUR, 6 * HOUR))
    seq = EventSequence(pid, tuple(events), label=label, window_end=last)
    truth = {
        "patient": pid,
        "rule": rule,
        "clean_label": clean,
        "label": label,
        "critical_types": sorted({events[k].type for k in critical_idx}),
        "critical_events": critical_idx,
    }
    return seq, OutcomeLabel(pid, outcome_t, label), truth


def generate(spec: GeneratorSpec) -> GeneratedData:
    """Deterministic synthetic cohort for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    names = [f"ev_{k:03d}" for k in range(spec.vocab_size)]
    weights = 1.0 / np.arange(1, spec.vocab_size + 1) ** 0.8
    weights /= weights.sum()
    width = max(4, len(str(max(spec.n_patients - 1, 0))))
    seqs, outcomes, truth = [], [], []
    for k in range(spec.n_patients):
        s, o, t = _generate_one(rng, spec, f"p{k:0{width}d}", names, weights)
        seqs.append(s)
        outcomes.append(o)
        truth.append(t)
    return GeneratedData(seqs, outcomes, truth)


def write_generated(data: GeneratedData, out_dir, spec: GeneratorSpec | None = None) -> dict[str, str]:
    """Write events, labels and the ground-truth sidecar; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "events": str(out / "events.jsonl"),
        "labels": str(out / "labels.jsonl"),
        "truth": str(out / "ground_truth.json"),
    }
    export_events(data.sequences, paths["events"])
    write_labels(data.outcomes, paths["labels"])
    sidecar = {"spec": spec.to_dict() if spec else None, "samples": data.truth}
    tmp = paths["truth"] + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, sort_keys=True, indent=1)
    os.replace(tmp, paths["truth"])
    return paths
