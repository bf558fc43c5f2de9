"""Command-line interface: ``hierevent <subcommand> [options]``.

Every subcommand writes its artifacts under ``--output-dir``. Options can
also come from a flat JSON object passed with ``--config``; keys are the
option names with underscores (``learning_rate``, ``group_size``, ...).
Explicit command-line flags win over the config file.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import (
    CheckpointError,
    IncompatibleVocabularyError,
    atomic_write_text,
    check_vocabulary,
    load_checkpoint,
    save_checkpoint,
)
from .data import (
    DEFAULT_MIN_EVENT_RATE,
    EmptyCohortError,
    GeneratorSpec,
    SchemaError,
    build_cohort,
    generate,
    ingest,
    read_labels,
    write_generated,
)
from .events import EmptyVocabularyError
from .metrics import UndefinedMetricError, precision_recall_curve, roc_curve, summarize
from .network import MODES
from .report import attention_report, beta_rows
from .training import TrainConfig, TrainingDivergedError, train

logger = logging.getLogger("hierevent")

SWEEP_SIZES = (1, 2, 4, 8, 16, 32, 64)
EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# failures caused by bad input rather than by the computation itself
_VALIDATION_ERRORS = (
    SchemaError,
    EmptyCohortError,
    EmptyVocabularyError,
    CheckpointError,
    IncompatibleVocabularyError,
    UndefinedMetricError,
)


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- output helpers


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def to_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: "" if r.get(k) is None else r.get(k) for k in columns})
    return buf.getvalue()


def _emit(args, obj, rows: list[dict] | None = None) -> None:
    if args.format == "csv" and rows is not None:
        sys.stdout.write(to_csv(rows))
    else:
        sys.stdout.write(dump_json(obj))


def _out_dir(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_file(path, what: str) -> None:
    if path is None:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")


# ---------------------------------------------------------------- shared pieces


def _train_config(args, seed: int | None = None, **overrides) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    values = {k: getattr(args, k) for k in names if hasattr(args, k)}
    values["seed"] = args.seed if seed is None else seed
    values.update(overrides)
    try:
        return TrainConfig(**values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _cohort(args, seed: int):
    return build_cohort(
        ingest(args.events, skip_bad_lines=args.skip_bad_lines),
        read_labels(args.labels, skip_bad_lines=args.skip_bad_lines),
        min_event_rate=args.min_event_rate,
        min_span_hours=args.min_span_hours,
        window_hours=args.window_hours,
        seed=seed,
    )


def _metrics(y_score, labels) -> dict:
    return summarize(np.asarray(y_score, dtype=np.float64), np.asarray(labels))


def _safe_metrics(y_score, labels) -> dict:
    try:
        return _metrics(y_score, labels)
    except UndefinedMetricError as exc:
        labels = np.asarray(labels)
        return {"auc": None, "auprc": None, "n": int(len(labels)),
                "positive_rate": float(labels.mean()) if len(labels) else None,
                "error": str(exc)}


def _eval_sequences(args, ckpt: dict):
    """Episodes to score, rebuilt with the cohort settings stored at training time."""
    sequences = ingest(args.events, skip_bad_lines=args.skip_bad_lines)
    if args.labels is None:
        if args.split != "all":
            raise UsageError("--split needs --labels")
        return sequences
    cohort = ckpt.get("cohort") or {}
    kept = cohort.get("kept_types")
    use_split = args.split != "all" and args.split_file is None
    ds = build_cohort(
        sequences,
        read_labels(args.labels, skip_bad_lines=args.skip_bad_lines),
        min_event_rate=cohort.get("min_event_rate", DEFAULT_MIN_EVENT_RATE),
        min_span_hours=cohort.get("min_span_hours", 36.0),
        window_hours=cohort.get("window_hours", 24.0),
        ratios=tuple(cohort.get("ratios", (0.7, 0.1, 0.2))),
        seed=cohort.get("seed", 0),
        kept_types=set(kept) if kept is not None else None,
        split=use_split,
    )
    if args.split == "all":
        return ds.sequences
    if args.split_file is None:
        return ds.split(args.split)
    with open(args.split_file, encoding="utf-8") as fh:
        chosen = set(json.load(fh)[args.split])
    return [s for s in ds.sequences if s.patient_id in chosen]


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    try:
        spec = GeneratorSpec(
            seed=args.seed,
            n_patients=args.n_patients,
            vocab_size=args.vocab_size,
            positive_rate=args.positive_rate,
            noise=args.noise,
            rule_mix={"cooccurrence": 1.0 - args.order_fraction, "order": args.order_fraction},
            cooc_window=args.cooc_window,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    data = generate(spec)
    paths = write_generated(data, _out_dir(args), spec)
    labels = data.labels
    result = {
        "n_patients": len(data.sequences),
        "n_events": int(sum(len(s) for s in data.sequences)),
        "positive_rate": float(labels.mean()) if len(labels) else None,
        "files": paths,
    }
    _emit(args, result, [{"file": k, "path": v} for k, v in paths.items()])
    return EXIT_OK


def cmd_train(args) -> int:
    _require_file(args.events, "events")
    _require_file(args.labels, "labels")
    out = _out_dir(args)
    ds = _cohort(args, args.seed)
    split_text = dump_json(ds.split_patients())
    if args.baseline:
        from .baseline import train_lr_baseline

        _, metrics = train_lr_baseline(ds, l2=args.l2)
        summary = metrics.get("test") or {"auc": None, "auprc": None}
        summary.update({"model": "bow_lr", "l2": args.l2, "validation": metrics.get("validation")})
        atomic_write_text(out / "split.json", split_text)
        atomic_write_text(out / "summary.json", dump_json(summary))
        _emit(args, summary, [summary])
        return EXIT_OK

    config = _train_config(args)
    if not ds.train_idx:
        raise EmptyCohortError("the train split is empty")
    clf, log = train(ds, config)
    test = ds.split("test")
    summary = _safe_metrics(clf.predict_proba(test)[:, 1], ds.labels("test")) if test else \
        {"auc": None, "auprc": None, "n": 0, "positive_rate": None, "error": "empty test split"}
    if "error" in summary:
        logger.warning("test metrics undefined: %s", summary["error"])

    save_checkpoint(clf, out / "checkpoint.json", cohort=ds.settings,
                    extra={"train_config": config.to_dict(), "cohort_report": ds.report})
    atomic_write_text(out / "train_log.jsonl", "".join(json.dumps(r, sort_keys=True) + "\n" for r in log))
    atomic_write_text(out / "split.json", split_text)
    atomic_write_text(out / "summary.json", dump_json(summary))
    _emit(args, summary, [summary])
    return EXIT_OK


def cmd_eval(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.events, "events")
    if args.labels is None:
        raise UsageError("--labels is required")
    _require_file(args.labels, "labels")
    if args.split_file is not None:
        _require_file(args.split_file, "split-file")
    clf, ckpt = load_checkpoint(args.checkpoint)
    sequences = _eval_sequences(args, ckpt)
    if not sequences:
        raise EmptyCohortError(f"no samples in split {args.split!r}")
    check_vocabulary(clf, sequences)
    y_score = clf.predict_proba(sequences)[:, 1]
    labels = np.array([s.label for s in sequences])
    metrics = _metrics(y_score, labels)
    out = _out_dir(args)
    atomic_write_text(out / "metrics.json", dump_json(metrics))
    if args.curves:
        fpr, tpr, thr = roc_curve(y_score, labels)
        prec, rec, pthr = precision_recall_curve(y_score, labels)
        atomic_write_text(out / "roc_curve.csv", to_csv(
            [{"threshold": t, "fpr": a, "tpr": b} for t, a, b in zip(thr, fpr, tpr)]))
        atomic_write_text(out / "pr_curve.csv", to_csv(
            [{"threshold": t, "recall": r, "precision": p} for t, r, p in zip(pthr, rec, prec)]))
    _emit(args, metrics, [metrics])
    return EXIT_OK


def cmd_segment(args) -> int:
    _require_file(args.events, "events")
    from .segmentation import make_segmenter

    if args.max_groups < 1 or args.group_size < 1:
        raise UsageError("--max-groups and --group-size must be >= 1")
    seg = make_segmenter(args.segmentation, args.max_groups, args.group_size)
    sequences = ingest(args.events, skip_bad_lines=args.skip_bad_lines)
    parts = seg.transform(sequences)
    records = [{"patient": s.patient_id, "n_events": len(s), **p.to_dict()} for s, p in zip(sequences, parts)]
    out = _out_dir(args)
    if args.format == "csv":
        rows = segment_rows(records)
        text = to_csv(rows, SEGMENT_COLUMNS)
        path = out / "segments.csv"
    else:
        text = dump_json({"segmentation": args.segmentation, "sequences": records})
        path = out / "segments.json"
    atomic_write_text(path, text)
    sys.stdout.write(text)
    return EXIT_OK


SEGMENT_COLUMNS = ["patient", "n_events", "n_groups", "max_span", "group", "start", "stop",
                   "start_time", "end_time"]


def segment_rows(records: list[dict]) -> list[dict]:
    """One CSV row per group; ``end_time`` is the next boundary."""
    rows = []
    for r in records:
        b = r["boundaries"]
        for g, (start, stop) in enumerate(r["groups"]):
            rows.append({"patient": r["patient"], "n_events": r["n_events"], "n_groups": r["n_groups"],
                         "max_span": r["max_span"], "group": g, "start": start, "stop": stop,
                         "start_time": b[g], "end_time": b[g + 1]})
    return rows


def cmd_attn_report(args) -> int:
    _require_file(args.checkpoint, "checkpoint")
    _require_file(args.events, "events")
    if args.labels is not None:
        _require_file(args.labels, "labels")
    if args.split_file is not None:
        _require_file(args.split_file, "split-file")
    if args.min_count < 1:
        raise UsageError("--min-count must be >= 1")
    clf, ckpt = load_checkpoint(args.checkpoint)
    sequences = _eval_sequences(args, ckpt)
    if not sequences:
        raise EmptyCohortError(f"no samples in split {args.split!r}")
    check_vocabulary(clf, sequences)
    report = attention_report(clf, sequences, min_count=args.min_count)
    out = _out_dir(args)
    atomic_write_text(out / "attn_report.json", dump_json(report))
    atomic_write_text(out / "attn_beta.csv", to_csv(
        list(beta_rows(report)), ["patient", "label", "group", "group_start_time", "group_size", "beta"]))
    ranked = [{"group": g, "flagged": flagged, **row}
              for g, block in report["groups"].items()
              for flagged, key in ((False, "ranked"), (True, "flagged"))
              for row in block[key]]
    cols = ["group", "type", "median", "q1", "q3", "max", "mean", "count", "flagged"]
    atomic_write_text(out / "attn_types.csv", to_csv(ranked, cols))
    top = {g: [r["type"] for r in b["ranked"][:10]] for g, b in report["groups"].items()}
    _emit(args, {"top_types": top, "files": [str(out / n) for n in
                                             ("attn_report.json", "attn_beta.csv", "attn_types.csv")]},
          ranked)
    return EXIT_OK


def _parse_sizes(text) -> list[int]:
    try:
        sizes = [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --sizes value {text!r}") from exc
    if not sizes or min(sizes) < 1:
        raise UsageError("--sizes needs positive integers")
    return sizes


def cmd_sweep(args) -> int:
    _require_file(args.events, "events")
    _require_file(args.labels, "labels")
    sizes = _parse_sizes(args.sizes)
    seeds = [args.seed + k for k in range(args.n_seeds)] if args.n_seeds > 0 else None
    if seeds is None:
        raise UsageError("--n-seeds must be >= 1")
    settings = [("adaptive", None)] + [("fixed", g) for g in sizes]
    rows = []
    for seed in seeds:
        ds = _cohort(args, seed)
        for kind, g in settings:
            config = _train_config(args, seed=seed, segmentation=kind,
                                   group_size=g if g is not None else args.group_size)
            t0 = time.perf_counter()
            clf, log = train(ds, config)
            m = _safe_metrics(clf.predict_proba(ds.split("test"))[:, 1], ds.labels("test"))
            rows.append({"segmentation": kind, "group_size": g, "seed": seed, "auc": m["auc"],
                         "auprc": m["auprc"], "epochs": len(log), "best_epoch": clf.best_epoch_,
                         "seconds": round(time.perf_counter() - t0, 3)})
            logger.info("sweep %s %s seed %d auc %s", kind, g, seed, m["auc"])
    table = []
    for kind, g in settings:
        aucs = [r["auc"] for r in rows if r["segmentation"] == kind and r["group_size"] == g
                and r["auc"] is not None]
        auprcs = [r["auprc"] for r in rows if r["segmentation"] == kind and r["group_size"] == g
                  and r["auprc"] is not None]
        table.append({"segmentation": kind, "group_size": g, "n_runs": len(aucs),
                      "median_auc": float(np.median(aucs)) if aucs else None,
                      "median_auprc": float(np.median(auprcs)) if auprcs else None})
    out = _out_dir(args)
    result = {"runs": rows, "table": table}
    atomic_write_text(out / "sweep.json", dump_json(result))
    atomic_write_text(out / "sweep.csv", to_csv(table))
    atomic_write_text(out / "sweep_runs.csv", to_csv(rows))
    _emit(args, result, table)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _global_flags(parser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--seed", type=int, default=d(0), help="random seed (default 0)")
    parser.add_argument("--config", default=d(None), help="flat JSON file of option defaults")
    parser.add_argument("--output-dir", default=d("hierevent-out"), help="directory for artifacts")
    parser.add_argument("--format", choices=("json", "csv"), default=d("json"),
                        help="format of printed results (and of segment output)")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def _data_flags(p) -> None:
    p.add_argument("--events", help="events JSONL file")
    p.add_argument("--labels", help="labels JSONL file")
    p.add_argument("--skip-bad-lines", action="store_true", help="drop malformed lines instead of failing")


def _cohort_flags(p) -> None:
    p.add_argument("--min-event-rate", type=float, default=DEFAULT_MIN_EVENT_RATE,
                   help="drop event types rarer than this many per million training events (0 disables)")
    p.add_argument("--min-span-hours", type=float, default=36.0)
    p.add_argument("--window-hours", type=float, default=24.0)


def _model_flags(p) -> None:
    d = TrainConfig()
    p.add_argument("--mode", default=d.mode, type=lambda s: s.replace("-", "_"),
                   choices=MODES, help="full, no-event-attn or no-temporal-attn")
    p.add_argument("--segmentation", choices=("adaptive", "fixed"), default=d.segmentation)
    p.add_argument("--max-groups", type=int, default=d.max_groups)
    p.add_argument("--group-size", type=int, default=d.group_size)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--learning-rate", type=float, default=d.learning_rate)
    p.add_argument("--max-epochs", type=int, default=d.max_epochs)
    p.add_argument("--patience", type=int, default=d.patience)
    p.add_argument("--embedding-dim", type=int, default=d.embedding_dim)
    p.add_argument("--attention-dim", type=int, default=d.attention_dim)
    p.add_argument("--hidden-dim", type=int, default=d.hidden_dim)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hierevent", description=__doc__.split("\n")[0])
    _global_flags(parser, suppress=False)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("gen-data", parents=[common], help="write a synthetic labeled dataset")
    p.add_argument("--n-patients", type=int, default=1000)
    p.add_argument("--vocab-size", type=int, default=40)
    p.add_argument("--positive-rate", type=float, default=0.5)
    p.add_argument("--noise", type=float, default=0.05, help="label flip probability")
    p.add_argument("--order-fraction", type=float, default=0.5,
                   help="share of samples labeled by the order rule (rest: co-occurrence rule)")
    p.add_argument("--cooc-window", type=int, default=30, help="co-occurrence window in seconds")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="build a cohort and train a model")
    _data_flags(p)
    _cohort_flags(p)
    _model_flags(p)
    p.add_argument("--baseline", action="store_true", help="train the bag-of-events LR baseline instead")
    p.add_argument("--l2", type=float, default=1.0, help="L2 strength for --baseline")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "score a checkpoint on labeled data"),
                             ("attn-report", cmd_attn_report, "rank event types by attention")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="checkpoint.json written by train")
        _data_flags(p)
        p.add_argument("--split", choices=("all", "train", "validation", "test"), default="all")
        p.add_argument("--split-file", help="split.json written by train (default: recompute)")
        if name == "eval":
            p.add_argument("--curves", action="store_true", help="also write ROC and PR curve CSVs")
        else:
            p.add_argument("--min-count", type=int, default=5,
                           help="types with fewer attention scores are flagged, not ranked")
        p.set_defaults(func=func)

    p = sub.add_parser("segment", parents=[common], help="dump the group partition of each sequence")
    p.add_argument("--events", help="events JSONL file")
    p.add_argument("--skip-bad-lines", action="store_true")
    p.add_argument("--segmentation", choices=("adaptive", "fixed"), default="adaptive")
    p.add_argument("--max-groups", type=int, default=32)
    p.add_argument("--group-size", type=int, default=8)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("sweep", parents=[common], help="compare adaptive and fixed group sizes")
    _data_flags(p)
    _cohort_flags(p)
    _model_flags(p)
    p.add_argument("--sizes", default=",".join(map(str, SWEEP_SIZES)), help="comma-separated group sizes")
    p.add_argument("--n-seeds", type=int, default=1, help="seeds seed, seed+1, ...")
    p.set_defaults(func=cmd_sweep)
    return parser


def _apply_config(parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    unknown = sorted(k for k in cfg if k.replace("-", "_") not in actions)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    defaults = {}
    for key, value in cfg.items():
        action = actions[key.replace("-", "_")]
        if isinstance(action, argparse._StoreTrueAction):
            if not isinstance(value, bool):
                raise UsageError(f"config key {key!r} must be true or false")
        elif value is not None and action.type is not None:
            if isinstance(value, bool) or not isinstance(value, (str, int, float)):
                raise UsageError(f"config key {key!r} has invalid value {value!r}")
            try:
                value = action.type(value) if action.type is not float else float(value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key {key!r} has invalid value {value!r}") from exc
            if action.type is int and isinstance(cfg[key], float) and cfg[key] != int(cfg[key]):
                raise UsageError(f"config key {key!r} must be an integer")
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config key {key!r} must be one of {list(action.choices)}")
        defaults[action.dest] = value
    # global flags are read by the top-level parser; the subparser copies are suppressed
    glob = ("seed", "output_dir", "format", "verbose")
    parser.set_defaults(**{k: v for k, v in defaults.items() if k in glob})
    subparser.set_defaults(**{k: v for k, v in defaults.items() if k not in glob})
    return parser.parse_args(argv)


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except SystemExit as exc:  # argparse already printed its message
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except _VALIDATION_ERRORS as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_USAGE)
    except FileNotFoundError as exc:
        return _fail("FileNotFoundError", f"file not found: {exc.filename}", EXIT_USAGE)
    except TrainingDivergedError as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_RUNTIME)
    except BrokenPipeError:
        # downstream reader went away (e.g. piped into head); silence the flush at exit
        os.dup2(os.open(os.devnull, os.O_WRONLY), sys.stdout.fileno())
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort structured report
        logger.debug("unhandled failure", exc_info=True)
        return _fail(type(exc).__name__, str(exc), EXIT_RUNTIME)


if __name__ == "__main__":
    sys.exit(main())
