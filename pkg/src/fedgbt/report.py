"""Per-round reporting from the global log: text table, CSV and figures.

Everything here is derived from the log alone; models are never rerun.
Figures render metric and log-loss trajectories plus the mean per-client
training time, the curves one would plot to judge a run at a glance.
"""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .dataset import DataError
from .federation import load_round_log

__all__ = ["REPORT_COLUMNS", "build_table", "write_csv", "format_text", "render_figures", "generate"]

REPORT_COLUMNS = [
    "round",
    "outcome",
    "best_client_id",
    "accuracy",
    "precision",
    "recall",
    "f1",
    "log_loss",
    "roc_auc",
    "tp",
    "fn",
    "fp",
    "tn",
    "wall_time_ms",
    "mean_client_train_time_ms",
]

_CURVE_METRICS = ["accuracy", "precision", "recall", "f1", "roc_auc"]


def build_table(entries) -> list:
    """One row per round; skipped rounds leave their metric cells empty."""
    rows = []
    for entry in entries:
        ok_times = [
            s.train_time_ms for s in entry.client_statuses if s.status == "ok"
        ]
        mean_time = sum(ok_times) / len(ok_times) if ok_times else None
        gm = entry.global_metrics
        rows.append(
            {
                "round": entry.round,
                "outcome": entry.outcome,
                "best_client_id": entry.best_client_id,
                "accuracy": gm.accuracy if gm else None,
                "precision": gm.precision if gm else None,
                "recall": gm.recall if gm else None,
                "f1": gm.f1 if gm else None,
                "log_loss": gm.log_loss if gm else None,
                "roc_auc": gm.roc_auc if gm else None,
                "tp": gm.confusion.tp if gm else None,
                "fn": gm.confusion.fn if gm else None,
                "fp": gm.confusion.fp if gm else None,
                "tn": gm.confusion.tn if gm else None,
                "wall_time_ms": entry.wall_time_ms,
                "mean_client_train_time_ms": mean_time,
            }
        )
    return rows


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def write_csv(rows, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([_cell(row[c]) for c in REPORT_COLUMNS])


def format_text(rows) -> str:
    cells = [[_cell(row[c]) for c in REPORT_COLUMNS] for row in rows]
    widths = [
        max(len(name), *(len(line[i]) for line in cells)) if cells else len(name)
        for i, name in enumerate(REPORT_COLUMNS)
    ]
    lines = ["  ".join(name.ljust(w) for name, w in zip(REPORT_COLUMNS, widths))]
    for line in cells:
        lines.append("  ".join(value.ljust(w) for value, w in zip(line, widths)))
    return "\n".join(lines)


def render_figures(rows, fig_dir) -> list:
    """Write the metric, log-loss and training-time figures; returns paths."""
    fig_dir = Path(fig_dir)
    fig_dir.mkdir(parents=True, exist_ok=True)
    written = []
    done = [r for r in rows if r["outcome"] == "completed"]

    if done:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for metric in _CURVE_METRICS:
            ax.plot([r["round"] for r in done], [r[metric] for r in done], marker="o", label=metric)
        ax.set_xlabel("round")
        ax.set_ylabel("score")
        ax.set_title("Global evaluation metrics per round")
        ax.set_ylim(0.0, 1.05)
        ax.grid(True, alpha=0.3)
        ax.legend(loc="lower right", fontsize=8)
        path = fig_dir / "metrics_over_rounds.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

        fig, ax = plt.subplots(figsize=(7, 4.5))
        ax.plot([r["round"] for r in done], [r["log_loss"] for r in done], marker="o", color="tab:red")
        ax.set_xlabel("round")
        ax.set_ylabel("log loss")
        ax.set_title("Global log loss per round")
        ax.grid(True, alpha=0.3)
        path = fig_dir / "log_loss.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)

    timed = [r for r in rows if r["mean_client_train_time_ms"] is not None]
    if timed:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        ax.bar(
            [r["round"] for r in timed],
            [r["mean_client_train_time_ms"] for r in timed],
            color="tab:blue",
        )
        ax.set_xlabel("round")
        ax.set_ylabel("mean client training time (ms)")
        ax.set_title("Average training time per client")
        path = fig_dir / "training_time.png"
        fig.savefig(path, dpi=120, bbox_inches="tight")
        plt.close(fig)
        written.append(path)
    return written


def generate(run_dir, out_dir=None) -> dict:
    """Build the full report for a run directory.

    Returns {"rows", "csv", "text", "figures"}. Raises DataError when the
    run directory has no log.
    """
    run_dir = Path(run_dir)
    try:
        entries = load_round_log(run_dir)
    except Exception as exc:
        raise DataError(str(exc)) from exc
    if not entries:
        raise DataError(f"round log in {run_dir} is empty")
    out_dir = Path(out_dir) if out_dir is not None else run_dir / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = build_table(entries)
    csv_path = out_dir / "report.csv"
    write_csv(rows, csv_path)
    figures = render_figures(rows, out_dir / "figures")
    return {
        "rows": rows,
        "csv": csv_path,
        "text": format_text(rows),
        "figures": figures,
    }
