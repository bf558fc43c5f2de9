import csv
import json

import pytest

from hierevent.cli import build_parser, main

TINY = ["--max-epochs", "2", "--embedding-dim", "6", "--attention-dim", "5", "--hidden-dim", "7",
        "--batch-size", "16"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def error_of(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generated data plus one trained model, shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    data, model = root / "data", root / "model"
    assert main(["gen-data", "--n-patients", "120", "--vocab-size", "12", "--seed", "3",
                 "--output-dir", str(data)]) == 0
    assert main(["train", "--events", str(data / "events.jsonl"), "--labels", str(data / "labels.jsonl"),
                 "--output-dir", str(model), "--seed", "1", *TINY]) == 0
    return data, model


def test_gen_data_outputs(workspace):
    data, _ = workspace
    lines = (data / "events.jsonl").read_text().splitlines()
    assert lines and all(json.loads(line)["patient"] for line in lines)
    labels = (data / "labels.jsonl").read_text().splitlines()
    assert len(labels) == 120
    truth = json.loads((data / "ground_truth.json").read_text())
    assert len(truth["samples"]) == 120 and truth["spec"]["seed"] == 3


def test_gen_data_is_deterministic(tmp_path, capsys):
    for name in ("a", "b"):
        assert run(capsys, "gen-data", "--n-patients", "10", "--output-dir", tmp_path / name)[0] == 0
    for f in ("events.jsonl", "labels.jsonl", "ground_truth.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_artifacts(workspace):
    _, model = workspace
    ckpt = json.loads((model / "checkpoint.json").read_text())
    assert ckpt["format"] == "hierevent-checkpoint"
    assert ckpt["extra"]["train_config"]["max_epochs"] == 2
    log = [json.loads(line) for line in (model / "train_log.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in log] == list(range(1, len(log) + 1))
    split = json.loads((model / "split.json").read_text())
    assert set(split) == {"train", "validation", "test"}
    assert not set(split["train"]) & set(split["test"])
    summary = json.loads((model / "summary.json").read_text())
    assert summary["n"] == len(split["test"])


def test_train_is_deterministic(workspace, tmp_path):
    data, model = workspace
    assert main(["train", "--events", str(data / "events.jsonl"), "--labels", str(data / "labels.jsonl"),
                 "--output-dir", str(tmp_path), "--seed", "1", *TINY]) == 0
    assert (tmp_path / "checkpoint.json").read_bytes() == (model / "checkpoint.json").read_bytes()
    strip = lambda p: [{k: v for k, v in json.loads(line).items() if k != "wall_ms"}
                       for line in p.read_text().splitlines()]
    assert strip(tmp_path / "train_log.jsonl") == strip(model / "train_log.jsonl")


def test_eval_reproduces_test_summary(workspace, tmp_path, capsys):
    data, model = workspace
    code, out, _ = run(capsys, "eval", "--checkpoint", model / "checkpoint.json",
                       "--events", data / "events.jsonl", "--labels", data / "labels.jsonl",
                       "--split", "test", "--output-dir", tmp_path, "--curves")
    assert code == 0
    assert (tmp_path / "metrics.json").read_bytes() == (model / "summary.json").read_bytes()
    assert json.loads(out) == json.loads((model / "summary.json").read_text())
    with open(tmp_path / "roc_curve.csv") as fh:
        roc = list(csv.DictReader(fh))
    with open(tmp_path / "pr_curve.csv") as fh:
        pr = list(csv.DictReader(fh))
    split = json.loads((model / "split.json").read_text())
    # the split file route selects the same patients
    code, out2, _ = run(capsys, "eval", "--checkpoint", model / "checkpoint.json",
                        "--events", data / "events.jsonl", "--labels", data / "labels.jsonl",
                        "--split", "test", "--split-file", model / "split.json", "--output-dir", tmp_path)
    assert code == 0 and json.loads(out2) == json.loads(out)
    assert len(roc) == len(pr) <= len(split["test"]) + 1
    assert roc[0]["threshold"] == "inf" and (roc[-1]["fpr"], roc[-1]["tpr"]) == ("1.0", "1.0")


def test_eval_single_class_is_a_validation_error(workspace, tmp_path, capsys):
    data, model = workspace
    rows = [json.loads(line) for line in (data / "labels.jsonl").read_text().splitlines()]
    labels = tmp_path / "ones.jsonl"
    labels.write_text("".join(json.dumps({**r, "label": 1}) + "\n" for r in rows))
    code, _, err = run(capsys, "eval", "--checkpoint", model / "checkpoint.json",
                       "--events", data / "events.jsonl", "--labels", labels, "--output-dir", tmp_path)
    assert code == 2
    assert error_of(err)["error"] == "UndefinedMetricError"


def test_missing_files_name_the_path(workspace, tmp_path, capsys):
    data, model = workspace
    missing = tmp_path / "nowhere.jsonl"
    code, _, err = run(capsys, "train", "--events", data / "events.jsonl", "--labels", missing,
                       "--output-dir", tmp_path)
    assert code == 2 and str(missing) in error_of(err)["message"]
    code, _, err = run(capsys, "eval", "--checkpoint", missing, "--events", data / "events.jsonl",
                       "--labels", data / "labels.jsonl")
    assert code == 2 and "checkpoint" in error_of(err)["message"]


def test_bad_checkpoint_and_schema(workspace, tmp_path, capsys):
    data, _ = workspace
    fake = tmp_path / "ckpt.json"
    fake.write_text('{"format": "something-else"}')
    code, _, err = run(capsys, "eval", "--checkpoint", fake, "--events", data / "events.jsonl",
                       "--labels", data / "labels.jsonl")
    assert code == 2 and error_of(err)["error"] == "CheckpointError"
    broken = tmp_path / "events.jsonl"
    broken.write_text('{"patient_id": "a"}\n')
    code, _, err = run(capsys, "segment", "--events", broken, "--output-dir", tmp_path)
    assert code == 2 and error_of(err)["error"] == "SchemaError"


def test_segment_json_and_csv_agree(workspace, tmp_path, capsys):
    data, _ = workspace
    code, out, _ = run(capsys, "segment", "--events", data / "events.jsonl", "--output-dir", tmp_path)
    assert code == 0
    doc = json.loads(out)
    assert json.loads((tmp_path / "segments.json").read_text()) == doc
    code, out_csv, _ = run(capsys, "segment", "--events", data / "events.jsonl", "--output-dir", tmp_path,
                           "--format", "csv")
    assert code == 0
    rows = list(csv.DictReader(out_csv.splitlines()))
    flat = [(r["patient"], int(r["start"]), int(r["stop"]), int(r["start_time"]), int(r["end_time"]))
            for r in rows]
    expected = [(s["patient"], a, b, s["boundaries"][g], s["boundaries"][g + 1])
                for s in doc["sequences"] for g, (a, b) in enumerate(s["groups"])]
    assert flat == expected
    for s in doc["sequences"]:
        assert s["n_groups"] <= 32 and s["groups"][-1][1] == s["n_events"]


def test_segment_rejects_bad_options(workspace, capsys):
    data, _ = workspace
    code, _, err = run(capsys, "segment", "--events", data / "events.jsonl", "--max-groups", "0")
    assert code == 2 and error_of(err)["error"] == "usage"


def test_attn_report(workspace, tmp_path, capsys):
    data, model = workspace
    code, out, _ = run(capsys, "attn-report", "--checkpoint", model / "checkpoint.json",
                       "--events", data / "events.jsonl", "--labels", data / "labels.jsonl",
                       "--split", "test", "--output-dir", tmp_path, "--min-count", "2")
    assert code == 0
    report = json.loads((tmp_path / "attn_report.json").read_text())
    assert report["min_count"] == 2
    assert json.loads(out)["top_types"]["all"] == [r["type"] for r in report["groups"]["all"]["ranked"][:10]]
    with open(tmp_path / "attn_beta.csv") as fh:
        beta = list(csv.DictReader(fh))
    assert len(beta) == sum(len(s["beta"]) for s in report["sequences"])
    code, _, err = run(capsys, "attn-report", "--checkpoint", model / "checkpoint.json",
                       "--events", data / "events.jsonl", "--min-count", "0")
    assert code == 2


def test_sweep(workspace, tmp_path, capsys):
    data, _ = workspace
    code, out, _ = run(capsys, "sweep", "--events", data / "events.jsonl", "--labels", data / "labels.jsonl",
                       "--sizes", "4,64", "--output-dir", tmp_path, "--max-epochs", "1",
                       "--embedding-dim", "4", "--attention-dim", "3", "--hidden-dim", "4")
    assert code == 0
    result = json.loads(out)
    assert [(r["segmentation"], r["group_size"]) for r in result["table"]] == \
        [("adaptive", None), ("fixed", 4), ("fixed", 64)]
    assert len(result["runs"]) == 3 and all(r["n_runs"] == 1 for r in result["table"])
    assert (tmp_path / "sweep.csv").exists() and (tmp_path / "sweep_runs.csv").exists()
    code, _, err = run(capsys, "sweep", "--events", data / "events.jsonl", "--labels", data / "labels.jsonl",
                       "--sizes", "0,2")
    assert code == 2


def test_baseline_training(workspace, tmp_path, capsys):
    data, _ = workspace
    code, out, _ = run(capsys, "train", "--baseline", "--events", data / "events.jsonl",
                       "--labels", data / "labels.jsonl", "--output-dir", tmp_path)
    assert code == 0
    summary = json.loads(out)
    assert summary["model"] == "bow_lr" and 0.0 <= summary["auc"] <= 1.0


class TestConfig:
    def test_file_sets_defaults_and_flags_win(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"learning_rate": 0.01, "group_size": 4, "seed": 7,
                                   "mode": "no-event-attn", "format": "csv"}))
        from hierevent.cli import _apply_config
        args = _apply_config(build_parser(), ["train", "--config", str(cfg), "--group-size", "16"])
        assert (args.learning_rate, args.group_size, args.seed, args.mode, args.format) == \
            (0.01, 16, 7, "no_event_attn", "csv")
        args = _apply_config(build_parser(), ["train", "--config", str(cfg), "--seed", "2"])
        assert args.seed == 2 and args.group_size == 4

    @pytest.mark.parametrize("payload, needle", [
        ({"learning_rat": 0.1}, "learning_rat"),
        ({"group_size": "many"}, "group_size"),
        ({"group_size": 2.5}, "integer"),
        ({"segmentation": "weird"}, "segmentation"),
        ({"baseline": "yes"}, "baseline"),
        ([1, 2], "object"),
    ])
    def test_rejects_bad_configs(self, tmp_path, capsys, payload, needle):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(payload))
        code, _, err = run(capsys, "train", "--config", cfg)
        assert code == 2
        assert needle in error_of(err)["message"]

    def test_missing_and_invalid_json(self, tmp_path, capsys):
        code, _, err = run(capsys, "train", "--config", tmp_path / "none.json")
        assert code == 2 and "not found" in error_of(err)["message"]
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        assert run(capsys, "train", "--config", bad)[0] == 2


def test_usage_errors_exit_2(capsys):
    assert run(capsys, "no-such-command")[0] == 2
    assert run(capsys, "train", "--max-epochs", "lots")[0] == 2
    assert run(capsys, "eval", "--format", "xml")[0] == 2
    assert run(capsys)[0] == 2


def test_segment_singleton_and_bursty(tmp_path, capsys):
    events = tmp_path / "events.jsonl"
    rows = [{"patient": "one", "t": 5, "type": "x"}]
    # two tight bursts of five events, far apart
    rows += [{"patient": "b", "t": base + k, "type": "y"} for base in (0, 10_000) for k in range(5)]
    events.write_text("".join(json.dumps(r) + "\n" for r in rows))
    code, out, _ = run(capsys, "segment", "--events", events, "--max-groups", "2", "--output-dir", tmp_path)
    assert code == 0
    adaptive = {s["patient"]: s["groups"] for s in json.loads(out)["sequences"]}
    assert adaptive["one"] == [[0, 1]]
    assert adaptive["b"] == [[0, 5], [5, 10]]
    code, out, _ = run(capsys, "segment", "--events", events, "--segmentation", "fixed", "--group-size", "4",
                       "--output-dir", tmp_path)
    fixed = {s["patient"]: s["groups"] for s in json.loads(out)["sequences"]}
    assert fixed["b"] == [[0, 4], [4, 8], [8, 10]] != adaptive["b"]


@pytest.mark.parametrize("extra", [["--mode", "no-event-attn"], ["--segmentation", "fixed", "--group-size", "8"]])
def test_train_variants(workspace, tmp_path, capsys, extra):
    data, _ = workspace
    code, _, _ = run(capsys, "train", "--events", data / "events.jsonl", "--labels", data / "labels.jsonl",
                     "--output-dir", tmp_path, "--max-epochs", "1", *TINY[2:], *extra)
    assert code == 0
    cfg = json.loads((tmp_path / "checkpoint.json").read_text())["extra"]["train_config"]
    if "--mode" in extra:
        assert cfg["mode"] == "no_event_attn"
    else:
        assert (cfg["segmentation"], cfg["group_size"]) == ("fixed", 8)
