"""Round-based federation of one server and N simulated clients.

Each round, every client continues the staged global model by exactly one
boosting round on its own shard (or cold-starts when nothing is staged),
evaluates on its local test split, explains that whole split, and returns
the serialized model plus its metrics. The server ranks the successful
updates hierarchically (F1 desc, accuracy desc, log-loss asc, client id
asc), evaluates and explains the winner on the held-out global test split,
archives everything, and stages the winner's bytes for the next round. A
round with zero successful updates is skipped: it is logged, consumes its
round index, and leaves the staged model untouched.

Only model bytes, metrics and archive paths cross the client/server
boundary; raw rows never do. Everything is deterministic given the seed:
clients are processed and merged in client-id order, and per-client seeds
derive from the run seed through a fixed SeedSequence recipe.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import FeatureMatrix, PartitionPlan, local_split
from .gbdt import TrainConfig, boost_round, compute_pos_weight, deserialize, serialize
from .metrics import MetricsReport, evaluate
from .shapley import GLOBAL_CLIENT, explain_batch, write_archive

__all__ = [
    "FederationError",
    "InjectedFailure",
    "FederationConfig",
    "ClientState",
    "ClientUpdate",
    "ClientStatusEntry",
    "RoundLogEntry",
    "PreparedData",
    "FederationReport",
    "inject_failure",
    "make_client_states",
    "client_round",
    "select_best",
    "server_round",
    "run_federation",
    "load_round_log",
    "GLOBAL_LOG_NAME",
    "MODELS_DIR",
    "SHAP_DIR",
    "FINAL_MODEL_NAME",
    "FINAL_REPORT_NAME",
]

GLOBAL_LOG_NAME = "global_log.jsonl"
MODELS_DIR = "models"
SHAP_DIR = "shap"
FINAL_MODEL_NAME = "final_model.model"
FINAL_REPORT_NAME = "final_report.json"

_HIGHER_IS_BETTER = {"accuracy", "precision", "recall", "f1", "roc_auc"}
_LOWER_IS_BETTER = {"log_loss"}
DEFAULT_SCORE_KEY = ("f1", "accuracy", "log_loss")

_LOCAL_SPLIT_STREAM = 101


class FederationError(RuntimeError):
    """Raised when a round cannot produce the contracted outputs."""


class InjectedFailure(RuntimeError):
    """Deterministic failure raised on behalf of a scheduled client."""


def inject_failure(schedule) -> frozenset:
    """Normalize a list of (round, client_id) pairs into a schedule."""
    out = set()
    for item in schedule:
        round_index, client_id = item
        out.add((int(round_index), int(client_id)))
    return frozenset(out)


@dataclass(frozen=True)
class FederationConfig:
    round_count: int
    seed: int
    client_count: int = 10
    train_config: TrainConfig = field(default_factory=TrainConfig)
    local_train_fraction: float = 0.8
    score_key: tuple = DEFAULT_SCORE_KEY
    failure_schedule: frozenset = frozenset()

    def __post_init__(self) -> None:
        if self.client_count < 1:
            raise ValueError("client_count must be >= 1")
        if self.round_count < 1:
            raise ValueError("round_count must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not 0 < self.local_train_fraction < 1:
            raise ValueError("local_train_fraction must be in (0, 1)")
        bad = [k for k in self.score_key if k not in _HIGHER_IS_BETTER | _LOWER_IS_BETTER]
        if bad:
            raise ValueError(f"unknown score_key fields: {bad}")


@dataclass(frozen=True)
class ClientState:
    client_id: int
    local_train: FeatureMatrix
    local_test: FeatureMatrix
    pos_weight: float


def _child_seed(seed: int, stream: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, stream, index]).generate_state(1, np.uint64)[0])


def make_client_states(
    plan: PartitionPlan, train: FeatureMatrix, config: FederationConfig
) -> list:
    """Build every client's local train/test split from its shard."""
    if plan.client_count != config.client_count:
        raise FederationError(
            f"partition has {plan.client_count} shards, config wants {config.client_count}"
        )
    states = []
    for client_id in range(config.client_count):
        shard = train.take(plan.shards[client_id])
        local_train, local_test = local_split(
            shard,
            config.local_train_fraction,
            _child_seed(config.seed, _LOCAL_SPLIT_STREAM, client_id),
        )
        states.append(
            ClientState(
                client_id=client_id,
                local_train=local_train,
                local_test=local_test,
                pos_weight=compute_pos_weight(local_train.labels),
            )
        )
    return states


@dataclass(frozen=True)
class ClientUpdate:
    """One client's round output crossing the privacy boundary."""

    client_id: int
    round: int
    status: str
    model_bytes: bytes | None = None
    metrics: MetricsReport | None = None
    shap_archive_path: str | None = None
    failure_reason: str | None = None
    train_time_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.status not in ("ok", "failed"):
            raise ValueError(f"unknown status {self.status!r}")
        ok_fields = (self.model_bytes, self.metrics, self.shap_archive_path)
        if self.status == "ok":
            if any(f is None for f in ok_fields) or self.failure_reason is not None:
                raise ValueError("ok updates carry model, metrics and archive only")
        else:
            if any(f is not None for f in ok_fields) or self.failure_reason is None:
                raise ValueError("failed updates carry a failure reason only")


def client_round(
    state: ClientState,
    incoming: bytes | None,
    round_index: int,
    config: FederationConfig,
    shap_dir,
) -> ClientUpdate:
    """Train one round, evaluate, explain the local test set, and report.

    Every error is captured into a failed update; nothing escapes.
    """
    start = time.perf_counter()
    try:
        if (round_index, state.client_id) in config.failure_schedule:
            raise InjectedFailure("scheduled by failure injection")
        model = deserialize(incoming) if incoming is not None else None
        model = boost_round(model, state.local_train, config.train_config, state.pos_weight)
        report = evaluate(model, state.local_test)
        records = explain_batch(model, state.local_test, state.client_id, round_index)
        archive_path = Path(shap_dir) / f"round_{round_index}_client_{state.client_id}.shap"
        write_archive(records, state.local_test.feature_names, archive_path)
        return ClientUpdate(
            client_id=state.client_id,
            round=round_index,
            status="ok",
            model_bytes=serialize(model),
            metrics=report,
            shap_archive_path=str(archive_path),
            train_time_ms=(time.perf_counter() - start) * 1000.0,
        )
    except Exception as exc:
        return ClientUpdate(
            client_id=state.client_id,
            round=round_index,
            status="failed",
            failure_reason=f"{type(exc).__name__}: {exc}",
            train_time_ms=(time.perf_counter() - start) * 1000.0,
        )


def _score_tuple(update: ClientUpdate, score_key) -> tuple:
    parts = []
    for name in score_key:
        value = getattr(update.metrics, name)
        parts.append(-value if name in _HIGHER_IS_BETTER else value)
    parts.append(update.client_id)
    return tuple(parts)


def select_best(updates, score_key=DEFAULT_SCORE_KEY) -> tuple[int, bytes]:
    """Hierarchically best successful update: F1 desc, accuracy desc,
    log-loss asc, client id asc (for the default key)."""
    ok = [u for u in updates if u.status == "ok"]
    if not ok:
        raise FederationError("no successful client updates to select from")
    best = min(ok, key=lambda u: _score_tuple(u, score_key))
    return best.client_id, best.model_bytes


@dataclass
class ClientStatusEntry:
    client_id: int
    status: str
    train_time_ms: float
    failure_reason: str | None = None
    metrics: MetricsReport | None = None

    def to_json_obj(self) -> dict:
        return {
            "client_id": self.client_id,
            "status": self.status,
            "train_time_ms": self.train_time_ms,
            "failure_reason": self.failure_reason,
            "metrics": self.metrics.to_dict() if self.metrics else None,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ClientStatusEntry":
        metrics = obj.get("metrics")
        return cls(
            client_id=obj["client_id"],
            status=obj["status"],
            train_time_ms=obj["train_time_ms"],
            failure_reason=obj.get("failure_reason"),
            metrics=MetricsReport.from_dict(metrics) if metrics else None,
        )


@dataclass
class RoundLogEntry:
    """Structured audit record for one round, including skips."""

    round: int
    outcome: str
    best_client_id: int | None
    client_statuses: list
    global_metrics: MetricsReport | None
    wall_time_ms: float = 0.0

    def to_json_obj(self) -> dict:
        gm = self.global_metrics.to_dict() if self.global_metrics else {}
        return {
            "round": self.round,
            "outcome": self.outcome,
            "best_client_id": self.best_client_id,
            "client_statuses": [s.to_json_obj() for s in self.client_statuses],
            "accuracy": gm.get("accuracy"),
            "precision": gm.get("precision"),
            "recall": gm.get("recall"),
            "f1": gm.get("f1"),
            "log_loss": gm.get("log_loss"),
            "roc_auc": gm.get("roc_auc"),
            "tp": gm.get("tp"),
            "fn": gm.get("fn"),
            "fp": gm.get("fp"),
            "tn": gm.get("tn"),
            "wall_time_ms": self.wall_time_ms,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "RoundLogEntry":
        global_metrics = None
        if obj.get("accuracy") is not None:
            sample_count = obj["tp"] + obj["fn"] + obj["fp"] + obj["tn"]
            global_metrics = MetricsReport.from_dict({**obj, "sample_count": sample_count})
        return cls(
            round=obj["round"],
            outcome=obj["outcome"],
            best_client_id=obj.get("best_client_id"),
            client_statuses=[
                ClientStatusEntry.from_json_obj(s) for s in obj["client_statuses"]
            ],
            global_metrics=global_metrics,
            wall_time_ms=obj.get("wall_time_ms", 0.0),
        )


def _status_entries(updates) -> list:
    return [
        ClientStatusEntry(
            client_id=u.client_id,
            status=u.status,
            train_time_ms=u.train_time_ms,
            failure_reason=u.failure_reason,
            metrics=u.metrics,
        )
        for u in updates
    ]


def server_round(
    updates,
    global_test: FeatureMatrix,
    round_index: int,
    config: FederationConfig,
    run_dir,
    staged: bytes | None,
) -> tuple[RoundLogEntry, bytes | None]:
    """Select, evaluate and archive the round winner; skip when nothing won.

    Returns the log entry and the bytes staged for the next round (the
    previous staging when the round is skipped).
    """
    run_dir = Path(run_dir)
    updates = sorted(updates, key=lambda u: u.client_id)
    statuses = _status_entries(updates)
    try:
        ok = [u for u in updates if u.status == "ok"]
        if not ok:
            return (
                RoundLogEntry(round_index, "skipped", None, statuses, None),
                staged,
            )
        best_id, best_bytes = select_best(ok, config.score_key)
        model = deserialize(best_bytes)
        global_metrics = evaluate(model, global_test)
        records = explain_batch(model, global_test, GLOBAL_CLIENT, round_index)
        write_archive(
            records,
            global_test.feature_names,
            run_dir / SHAP_DIR / f"round_{round_index}_global.shap",
        )
        snapshot = run_dir / MODELS_DIR / f"round_{round_index}_best_client_{best_id}.model"
        snapshot.write_bytes(best_bytes)
        entry = RoundLogEntry(round_index, "completed", best_id, statuses, global_metrics)
        return entry, best_bytes
    except Exception:
        # Catastrophic server-side failure: bypass the round, keep staging.
        return RoundLogEntry(round_index, "skipped", None, statuses, None), staged


@dataclass(frozen=True)
class PreparedData:
    train: FeatureMatrix
    test: FeatureMatrix
    plan: PartitionPlan


@dataclass
class FederationReport:
    entries: list
    final_model_bytes: bytes | None
    shap_archives: list
    model_snapshots: list

    @property
    def completed_rounds(self) -> int:
        return sum(1 for e in self.entries if e.outcome == "completed")


def run_federation(config: FederationConfig, prepared: PreparedData, run_dir) -> FederationReport:
    """Execute the full round loop and write logs, snapshots and archives.

    Two runs with the same config and prepared data produce byte-identical
    artifacts except the wall-time fields inside the log.
    """
    run_dir = Path(run_dir)
    (run_dir / MODELS_DIR).mkdir(parents=True, exist_ok=True)
    (run_dir / SHAP_DIR).mkdir(parents=True, exist_ok=True)
    states = make_client_states(prepared.plan, prepared.train, config)
    staged: bytes | None = None
    entries = []
    for round_index in range(1, config.round_count + 1):
        started = time.perf_counter()
        updates = [
            client_round(state, staged, round_index, config, run_dir / SHAP_DIR)
            for state in states
        ]
        entry, staged = server_round(
            updates, prepared.test, round_index, config, run_dir, staged
        )
        entry.wall_time_ms = (time.perf_counter() - started) * 1000.0
        entries.append(entry)

    with open(run_dir / GLOBAL_LOG_NAME, "w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(entry.to_json_obj()) + "\n")

    shap_archives = sorted(str(p) for p in (run_dir / SHAP_DIR).glob("*.shap"))
    model_snapshots = sorted(str(p) for p in (run_dir / MODELS_DIR).glob("*.model"))
    if staged is not None:
        (run_dir / FINAL_MODEL_NAME).write_bytes(staged)
    report = FederationReport(entries, staged, shap_archives, model_snapshots)
    summary = {
        "rounds": [entry.to_json_obj() for entry in entries],
        "completed_rounds": report.completed_rounds,
        "final_model": FINAL_MODEL_NAME if staged is not None else None,
        "shap_archives": shap_archives,
        "model_snapshots": model_snapshots,
    }
    (run_dir / FINAL_REPORT_NAME).write_text(json.dumps(summary, indent=2), encoding="utf-8")
    return report


def load_round_log(run_dir) -> list:
    """Parse the run's global log back into RoundLogEntry objects."""
    path = Path(run_dir) / GLOBAL_LOG_NAME
    if not path.exists():
        raise FederationError(f"no round log at {path}")
    entries = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            entries.append(RoundLogEntry.from_json_obj(json.loads(line)))
    return entries
