from collections import defaultdict

import jsonschema
import numpy as np
import pytest

from hierevent.report import REPORT_SCHEMA, attention_report, beta_rows, type_statistics

from _helpers import small_classifier


@pytest.fixture(scope="module")
def fitted():
    return small_classifier(n_patients=40)


def test_schema_and_shapes(fitted):
    clf, data = fitted
    rep = attention_report(clf, data.sequences, min_count=3)
    jsonschema.validate(rep, REPORT_SCHEMA)
    assert rep["groups"]["all"]["n_samples"] == len(data.sequences)
    assert rep["groups"]["positive"]["n_samples"] + rep["groups"]["negative"]["n_samples"] == len(data.sequences)
    for s in rep["sequences"]:
        assert len(s["beta"]) == len(s["group_sizes"]) == len(s["group_start_times"])
        assert sum(s["beta"]) == pytest.approx(1.0)
    rows = list(beta_rows(rep))
    assert len(rows) == sum(len(s["beta"]) for s in rep["sequences"])


def test_zero_query_gives_size_reciprocals(fitted):
    clf, data = fitted
    clf.params_.w_q[:] = 0.0
    try:
        rep = attention_report(clf, data.sequences, min_count=1)
    finally:
        clf.params_ = small_classifier(n_patients=40)[0].params_
    # uniform within-group attention: every event scores 1 / group size
    expected = defaultdict(list)
    for seq, seg in zip(data.sequences, clf.segment(data.sequences)):
        for start, stop in seg.groups:
            for e in seq.events[start:stop]:
                expected[e.type].append(1.0 / (stop - start))
    got = {r["type"]: r for r in rep["groups"]["all"]["ranked"]}
    assert set(got) == set(expected)
    for name, vals in expected.items():
        assert got[name]["median"] == pytest.approx(float(np.median(vals)), abs=1e-12)
        assert got[name]["count"] == len(vals)


def test_statistics_split_and_order():
    scores = {"a": [0.1, 0.2, 0.3], "b": [0.9], "c": [0.5, 0.5, 0.4, 0.6], "d": [0.5, 0.5, 0.5]}
    ranked, flagged = type_statistics(scores, min_count=2)
    assert [r["type"] for r in ranked] == ["c", "d", "a"]  # equal medians: larger q3 first
    assert [r["type"] for r in flagged] == ["b"]
    a = ranked[-1]
    assert (a["median"], a["max"], a["count"]) == (0.2, 0.3, 3)
    assert a["mean"] == pytest.approx(0.2)


def test_rejects_bad_min_count(fitted):
    clf, data = fitted
    with pytest.raises(ValueError):
        attention_report(clf, data.sequences, min_count=0)
