"""Command-line front end: prepare, run, report, explain, synth.

Configuration can live in a JSON file (--config) whose keys mirror the
flags; explicit flags win. Exit codes: 0 success, 1 usage error, 2 data
error, 3 run-level failure (every round skipped).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dataset as ds
from .dataset import DataError
from .federation import (
    FederationConfig,
    FederationError,
    PreparedData,
    inject_failure,
    run_federation,
)
from .gbdt import ModelFormatError, TrainConfig, deserialize
from .shapley import GLOBAL_CLIENT, explain_batch, write_archive

__all__ = ["main", "entry", "RunConfig"]

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUN_FAILED = 3

PREPARED_DIR = "prepared"
RUN_DIR = "run"

_SPLIT_STREAM = 1
_PARTITION_STREAM = 2


class UsageError(ValueError):
    """Bad flag/config combinations (exit code 1)."""


@dataclass(frozen=True)
class SynthParams:
    rows: int
    features: int
    separation: float
    positive_fraction: float


@dataclass
class RunConfig:
    """Everything a reproducible experiment needs, in one place."""

    out: Path
    seed: int = 7
    input_path: Path | None = None
    synthetic: SynthParams | None = None
    label_column: str = "label"
    benign_token: str = "0"
    drop_columns: list = field(default_factory=list)
    train_fraction: float = 0.8
    local_train_fraction: float = 0.8
    clients: int = 10
    rounds: int = 10
    train: TrainConfig = field(default_factory=TrainConfig)
    failures: list = field(default_factory=list)


def _load_config_file(path) -> dict:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError(f"config {path} must hold a JSON object")
    return obj


def _pick(args_value, config: dict, key: str, default):
    if args_value is not None:
        return args_value
    if key in config and config[key] is not None:
        return config[key]
    return default


def _build_run_config(args) -> RunConfig:
    cfg = _load_config_file(args.config) if args.config else {}
    out = _pick(getattr(args, "out", None), cfg, "out", None)
    if out is None:
        raise UsageError("an output directory is required (--out or config 'out')")

    synth_cfg = cfg.get("synthetic")
    synth_arg = getattr(args, "synthetic", None)
    if synth_arg is not None:
        parts = synth_arg.split(",")
        if len(parts) != 4:
            raise UsageError("--synthetic wants rows,features,separation,positive_fraction")
        try:
            synth_cfg = {
                "rows": int(parts[0]),
                "features": int(parts[1]),
                "separation": float(parts[2]),
                "positive_fraction": float(parts[3]),
            }
        except ValueError as exc:
            raise UsageError(f"bad --synthetic value: {exc}") from exc
    synthetic = (
        SynthParams(
            rows=int(synth_cfg["rows"]),
            features=int(synth_cfg["features"]),
            separation=float(synth_cfg["separation"]),
            positive_fraction=float(synth_cfg["positive_fraction"]),
        )
        if synth_cfg
        else None
    )

    input_path = _pick(getattr(args, "input", None), cfg, "input", None)
    train_cfg = dict(cfg.get("train") or {})
    for name in ("reg_lambda", "gamma", "eta", "max_depth", "min_child_cover"):
        value = getattr(args, name, None)
        if value is not None:
            train_cfg[name] = value

    failures = list(cfg.get("failures") or [])
    for item in getattr(args, "fail", None) or []:
        round_part, _, client_part = item.partition(":")
        try:
            failures.append((int(round_part), int(client_part)))
        except ValueError:
            raise UsageError(f"--fail wants round:client_id, got {item!r}") from None

    try:
        train = TrainConfig(**train_cfg)
    except TypeError as exc:
        raise UsageError(f"bad train config: {exc}") from exc

    seed = int(_pick(getattr(args, "seed", None), cfg, "seed", 7))
    if seed < 0:
        raise UsageError("--seed must be non-negative")

    drop = getattr(args, "drop_columns", None)
    return RunConfig(
        out=Path(out),
        seed=seed,
        input_path=Path(input_path) if input_path else None,
        synthetic=synthetic,
        label_column=_pick(getattr(args, "label_column", None), cfg, "label_column", "label"),
        benign_token=_pick(getattr(args, "benign_token", None), cfg, "benign_token", "0"),
        drop_columns=list(drop.split(",") if drop else cfg.get("drop_columns") or []),
        train_fraction=float(
            _pick(getattr(args, "train_fraction", None), cfg, "train_fraction", 0.8)
        ),
        local_train_fraction=float(
            _pick(
                getattr(args, "local_train_fraction", None),
                cfg,
                "local_train_fraction",
                0.8,
            )
        ),
        clients=int(_pick(getattr(args, "clients", None), cfg, "clients", 10)),
        rounds=int(_pick(getattr(args, "rounds", None), cfg, "rounds", 10)),
        train=train,
        failures=failures,
    )


def _child_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1, np.uint64)[0])


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except DataError as exc:
        raise DataError(f"stage {name}: {exc}") from exc


def cmd_prepare(cfg: RunConfig) -> int:
    """Clean, encode, impute, split, normalize and partition the input."""
    if (cfg.input_path is None) == (cfg.synthetic is None):
        raise UsageError("exactly one of --input and --synthetic is required")

    if cfg.input_path is not None:
        table = _stage("load_csv", ds.load_csv, cfg.input_path)
        table = _stage("sanitize", ds.sanitize, table, cfg.drop_columns)
        table = _stage("map_label", ds.map_label, table, cfg.label_column, cfg.benign_token)
        table, encoding = _stage("encode_categoricals", ds.encode_categoricals, table)
        table = _stage("impute_mode_by_class", ds.impute_mode_by_class, table, cfg.label_column)
        matrix = _stage("build_matrix", ds.build_matrix, table, cfg.label_column)
    else:
        params = cfg.synthetic
        matrix = ds.synth_generate(
            params.rows, params.features, params.separation, params.positive_fraction, cfg.seed
        )
        encoding = {}

    train, test = _stage(
        "stratified_split",
        ds.stratified_split,
        matrix,
        cfg.train_fraction,
        _child_seed(cfg.seed, _SPLIT_STREAM),
    )
    train, test, params = _stage("normalize", ds.normalize, train, test)
    plan = _stage(
        "partition_balanced",
        ds.partition_balanced,
        train,
        cfg.clients,
        _child_seed(cfg.seed, _PARTITION_STREAM),
    )

    prepared = cfg.out / PREPARED_DIR
    prepared.mkdir(parents=True, exist_ok=True)
    ds.save_matrix_csv(train, prepared / "train.csv", cfg.label_column)
    ds.save_matrix_csv(test, prepared / "test.csv", cfg.label_column)
    ds.write_sidecar(prepared / "meta.txt", cfg.label_column, params, encoding)
    ds.save_partition(plan, prepared / "partition.json")

    summary = {
        "rows": matrix.n_rows,
        "train_rows": train.n_rows,
        "test_rows": test.n_rows,
        "train_class_counts": {
            "0": int(np.sum(train.labels == 0)),
            "1": int(np.sum(train.labels == 1)),
        },
        "test_class_counts": {
            "0": int(np.sum(test.labels == 0)),
            "1": int(np.sum(test.labels == 1)),
        },
        "per_client_rows": [int(s.size) for s in plan.shards],
        "per_client_positive": [
            int(np.sum(train.labels[s] == 1)) for s in plan.shards
        ],
    }
    (prepared / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
    print(f"prepared {train.n_rows} train / {test.n_rows} test rows into {prepared}")
    print(
        f"clients: {plan.client_count}; shard sizes: {summary['per_client_rows']}; "
        f"positives per shard: {summary['per_client_positive']}"
    )
    return EXIT_OK


def _load_prepared(cfg: RunConfig) -> PreparedData:
    prepared = cfg.out / PREPARED_DIR
    meta = prepared / "meta.txt"
    if not meta.exists():
        raise DataError(f"no prepared data at {prepared}; run `prepare` first")
    label_column, _, _ = ds.read_sidecar(meta)
    train = ds.load_matrix_csv(prepared / "train.csv", label_column)
    test = ds.load_matrix_csv(prepared / "test.csv", label_column)
    plan = ds.load_partition(prepared / "partition.json")
    return PreparedData(train=train, test=test, plan=plan)


def cmd_run(cfg: RunConfig) -> int:
    """Run the federation over previously prepared data."""
    prepared = _load_prepared(cfg)
    fed_config = FederationConfig(
        round_count=cfg.rounds,
        seed=cfg.seed,
        client_count=cfg.clients,
        train_config=cfg.train,
        local_train_fraction=cfg.local_train_fraction,
        failure_schedule=inject_failure(cfg.failures),
    )
    run_dir = cfg.out / RUN_DIR
    run_dir.mkdir(parents=True, exist_ok=True)
    report = run_federation(fed_config, prepared, run_dir)
    for entry in report.entries:
        if entry.outcome == "completed":
            gm = entry.global_metrics
            print(
                f"round {entry.round}: best client {entry.best_client_id}, "
                f"accuracy {gm.accuracy:.4f}, f1 {gm.f1:.4f}, log_loss {gm.log_loss:.4f}"
            )
        else:
            print(f"round {entry.round}: skipped (no valid client output)")
    if report.completed_rounds == 0:
        print("every round was skipped", file=sys.stderr)
        return EXIT_RUN_FAILED
    print(f"run artifacts in {run_dir}")
    return EXIT_OK


def cmd_report(run_dir, out_dir=None) -> int:
    """Render the per-round metrics table, CSV and figures."""
    from . import report as report_mod

    result = report_mod.generate(run_dir, out_dir)
    print(result["text"])
    print(f"csv: {result['csv']}")
    for fig in result["figures"]:
        print(f"figure: {fig}")
    return EXIT_OK


def cmd_explain(model_path, data_path, out_path, label_column: str, client_id: int, round_index: int) -> int:
    """Explain any saved model against any prepared matrix."""
    try:
        blob = Path(model_path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read model {model_path}: {exc}") from exc
    model = deserialize(blob)
    matrix = ds.load_matrix_csv(data_path, label_column)
    if matrix.n_features != model.n_features:
        raise DataError(
            f"model expects {model.n_features} features, data has {matrix.n_features}"
        )
    records = explain_batch(model, matrix, client_id, round_index)
    write_archive(records, matrix.feature_names, out_path)
    print(f"wrote {len(records)} explanations to {out_path}")
    return EXIT_OK


def cmd_synth(rows, features, separation, positive_fraction, seed, out_path) -> int:
    """Generate a synthetic raw CSV consumable by `prepare --input`."""
    matrix = ds.synth_generate(rows, features, separation, positive_fraction, seed)
    ds.save_matrix_csv(matrix, out_path, "label")
    print(f"wrote {matrix.n_rows} rows x {matrix.n_features} features to {out_path}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_common(p) -> None:
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--out", help="output directory for all artifacts")
    p.add_argument("--seed", type=int, help="run seed (default 7)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedgbt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="clean, split, normalize and partition data")
    _add_common(p)
    p.add_argument("--input", help="raw CSV to ingest")
    p.add_argument("--synthetic", help="rows,features,separation,positive_fraction")
    p.add_argument("--label-column", dest="label_column")
    p.add_argument("--benign-token", dest="benign_token")
    p.add_argument("--drop-columns", dest="drop_columns", help="comma-separated")
    p.add_argument("--train-fraction", dest="train_fraction", type=float)
    p.add_argument("--clients", type=int)

    p = sub.add_parser("run", help="run the federation over prepared data")
    _add_common(p)
    p.add_argument("--clients", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--local-train-fraction", dest="local_train_fraction", type=float)
    p.add_argument("--reg-lambda", dest="reg_lambda", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--max-depth", dest="max_depth", type=int)
    p.add_argument("--min-child-cover", dest="min_child_cover", type=float)
    p.add_argument(
        "--fail",
        action="append",
        metavar="ROUND:CLIENT",
        help="inject a client failure; repeatable",
    )

    p = sub.add_parser("report", help="per-round metrics table, CSV and figures")
    p.add_argument("run_dir", help="run directory containing the global log")
    p.add_argument("--out", dest="report_out", help="where to write the report")

    p = sub.add_parser("explain", help="explain a saved model on a prepared matrix")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, dest="explain_out")
    p.add_argument("--label-column", dest="label_column", default="label")
    p.add_argument("--client-id", dest="client_id", type=int, default=GLOBAL_CLIENT)
    p.add_argument("--round", dest="round_index", type=int, default=0)

    p = sub.add_parser("synth", help="write a synthetic raw CSV")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--features", type=int, required=True)
    p.add_argument("--separation", type=float, required=True)
    p.add_argument("--positive-fraction", dest="positive_fraction", type=float, required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True, dest="synth_out")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "prepare":
            return cmd_prepare(_build_run_config(args))
        if args.command == "run":
            return cmd_run(_build_run_config(args))
        if args.command == "report":
            return cmd_report(args.run_dir, args.report_out)
        if args.command == "explain":
            return cmd_explain(
                args.model,
                args.data,
                args.explain_out,
                args.label_column,
                args.client_id,
                args.round_index,
            )
        if args.command == "synth":
            return cmd_synth(
                args.rows,
                args.features,
                args.separation,
                args.positive_fraction,
                args.seed,
                args.synth_out,
            )
        raise UsageError(f"unknown command {args.command!r}")
    except UsageError as exc:
        print(f"fedgbt: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ModelFormatError, FederationError, ValueError, OSError) as exc:
        print(f"fedgbt: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
