"""Event-importance report built from event and temporal attention weights.

The importance of an event type is the median of the attention weights its
events receive across a dataset, reported separately for positive and
negative samples as well as overall.
"""

from __future__ import annotations

from collections import defaultdict

import numpy as np

REPORT_VERSION = 1

_STATS_ROW = {
    "type": "object",
    "required": ["type", "median", "q1", "q3", "max", "mean", "count"],
    "additionalProperties": False,
    "properties": {
        "type": {"type": "string"},
        "median": {"type": "number"},
        "q1": {"type": "number"},
        "q3": {"type": "number"},
        "max": {"type": "number"},
        "mean": {"type": "number"},
        "count": {"type": "integer", "minimum": 1},
    },
}

_GROUP = {
    "type": "object",
    "required": ["n_samples", "ranked", "flagged"],
    "additionalProperties": False,
    "properties": {
        "n_samples": {"type": "integer", "minimum": 0},
        "ranked": {"type": "array", "items": _STATS_ROW},
        "flagged": {"type": "array", "items": _STATS_ROW},
    },
}

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "attention report",
    "type": "object",
    "required": ["version", "mode", "min_count", "groups", "sequences"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": REPORT_VERSION},
        "mode": {"enum": ["full", "no_event_attn", "no_temporal_attn"]},
        "min_count": {"type": "integer", "minimum": 1},
        "groups": {
            "type": "object",
            "required": ["all", "positive", "negative"],
            "additionalProperties": False,
            "properties": {"all": _GROUP, "positive": _GROUP, "negative": _GROUP},
        },
        "sequences": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["patient", "label", "prediction", "group_sizes", "group_start_times", "beta"],
                "additionalProperties": False,
                "properties": {
                    "patient": {"type": "string"},
                    "label": {"type": ["integer", "null"]},
                    "prediction": {"type": "number"},
                    "group_sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                    "group_start_times": {"type": "array", "items": {"type": "integer"}},
                    "beta": {"type": "array", "items": {"type": "number"}},
                },
            },
        },
    },
}


def type_statistics(scores: dict[str, list[float]], min_count: int):
    """Per-type attention statistics split into ranked rows and low-count flagged rows."""
    ranked, flagged = [], []
    for name, vals in scores.items():
        v = np.asarray(vals, dtype=np.float64)
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        row = {"type": name, "median": float(med), "q1": float(q1), "q3": float(q3),
               "max": float(v.max()), "mean": float(v.mean()), "count": int(len(v))}
        (ranked if len(v) >= min_count else flagged).append(row)
    key = lambda r: (-r["median"], -r["q3"], r["type"])
    return sorted(ranked, key=key), sorted(flagged, key=key)


def attention_report(clf, sequences, min_count: int = 5) -> dict:
    """Run the fitted classifier over ``sequences`` and summarize attention."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    traces = clf.traces(sequences)
    segs = clf.segment(sequences)
    pools = {"all": defaultdict(list), "positive": defaultdict(list), "negative": defaultdict(list)}
    counts = {"all": 0, "positive": 0, "negative": 0}
    rows = []
    for seq, tr, seg in zip(sequences, traces, segs):
        targets = ["all"]
        if seq.label == 1:
            targets.append("positive")
        elif seq.label == 0:
            targets.append("negative")
        for t in targets:
            counts[t] += 1
        for (start, stop), alpha in zip(seg.groups, tr.alphas):
            for e, a in zip(seq.events[start:stop], alpha):
                for t in targets:
                    pools[t][e.type].append(float(a))
        rows.append({
            "patient": seq.patient_id,
            "label": seq.label,
            "prediction": tr.y,
            "group_sizes": seg.sizes,
            "group_start_times": list(seg.boundaries[:-1]),
            "beta": [float(b) for b in tr.beta],
        })
    groups = {}
    for name, pool in pools.items():
        ranked, flagged = type_statistics(pool, min_count)
        groups[name] = {"n_samples": counts[name], "ranked": ranked, "flagged": flagged}
    return {
        "version": REPORT_VERSION,
        "mode": clf.to_config().mode,
        "min_count": min_count,
        "groups": groups,
        "sequences": rows,
    }


def beta_rows(report: dict):
    """Flatten per-sequence temporal weights into CSV-ready rows."""
    for s in report["sequences"]:
        for g, (b, size, t0) in enumerate(zip(s["beta"], s["group_sizes"], s["group_start_times"])):
            yield {"patient": s["patient"], "label": s["label"], "group": g,
                   "group_start_time": t0, "group_size": size, "beta": b}
