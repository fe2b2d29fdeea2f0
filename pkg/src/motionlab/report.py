"""Run reporting: delimited metric files, a text summary, and figures.

Everything lands in one output directory: `metrics.csv` / `history.csv` for
machine consumption, `summary.json` for tooling, `report.txt` for humans, and
PNG figures rendered headlessly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evalkit import MetricReport
from .world import ObstacleField


def write_metrics_csv(path, reports: dict) -> None:
    """One row per labelled MetricReport."""
    rows = {label: rep.as_dict() for label, rep in reports.items()}
    fields = ["label"] + sorted(next(iter(rows.values())).keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for label, d in rows.items():
            w.writerow({"label": label, **{k: repr(v) for k, v in d.items()}})


def write_history_csv(path, history: list[dict]) -> None:
    """Per-epoch adaptation metrics as a delimited table."""
    if not history:
        raise ValueError("history is empty")
    fields = ["epoch"] + sorted(history[0].keys())
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for i, row in enumerate(history):
            w.writerow({"epoch": i, **{k: repr(v) for k, v in row.items()}})


def write_summary_json(path, reports: dict, extra: dict | None = None) -> None:
    doc = {label: rep.as_dict() for label, rep in reports.items()}
    if extra:
        doc["run"] = extra
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)


def write_text_report(path, reports: dict, extra: dict | None = None) -> None:
    lines = ["evaluation report", "=" * 17, ""]
    for label, rep in reports.items():
        lines.append(label)
        lines.append("-" * len(label))
        for k, v in rep.as_dict().items():
            lines.append(f"  {k:<22} {v:.6g}" if isinstance(v, float) else f"  {k:<22} {v}")
        lines.append("")
    if extra:
        lines.append("run")
        lines.append("---")
        for k, v in extra.items():
            lines.append(f"  {k:<22} {v}")
        lines.append("")
    Path(path).write_text("\n".join(lines))


# -- figures -----------------------------------------------------------------


def plot_history(history: list[dict], path) -> None:
    """Adaptation curves: tracking error and execution rate over epochs."""
    if not history:
        raise ValueError("history is empty")
    epochs = np.arange(len(history))
    fig, ax1 = plt.subplots(figsize=(7, 4))
    ax1.plot(epochs, [h["mean_tracking_error"] for h in history],
             color="tab:red", label="tracking error")
    ax1.set_xlabel("epoch")
    ax1.set_ylabel("mean tracking error [m]", color="tab:red")
    ax2 = ax1.twinx()
    ax2.plot(epochs, [h["exec_rate"] for h in history],
             color="tab:blue", label="execution rate")
    ax2.set_ylabel("execution rate", color="tab:blue")
    ax2.set_ylim(0, 1.05)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_ablation(results: dict, path, ylabel: str = "execution rate") -> None:
    """Bar chart comparing labelled variants."""
    if not results:
        raise ValueError("no ablation results")
    labels = list(results)
    fig, ax = plt.subplots(figsize=(1.5 * len(labels) + 2, 4))
    ax.bar(labels, [results[k] for k in labels], color="tab:blue")
    ax.set_ylabel(ylabel)
    ax.set_ylim(0, 1.05)
    for tick in ax.get_xticklabels():
        tick.set_rotation(20)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_scaling(scales, adapted, baseline, path) -> None:
    """Goal-reach rate against room scale, adapted vs. unadapted."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(scales, adapted, "o-", label="adapted")
    ax.plot(scales, baseline, "s--", label="unadapted")
    ax.set_xscale("log")
    ax.set_xlabel("room scale")
    ax.set_ylabel("goal-reach rate")
    ax.set_ylim(0, 1.05)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_trajectory(pelvis_xy: np.ndarray, field: ObstacleField, path,
                    target=None) -> None:
    """Top-down pelvis path over the obstacle footprints."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for b in field.boxes:
        ax.add_patch(plt.Rectangle((b[0] - b[2], b[1] - b[3]), 2 * b[2], 2 * b[3],
                                   color="0.6"))
    ax.plot(pelvis_xy[:, 0], pelvis_xy[:, 1], "-", color="tab:blue")
    ax.plot(pelvis_xy[0, 0], pelvis_xy[0, 1], "go", label="start")
    if target is not None:
        ax.plot(target[0], target[1], "r*", markersize=12, label="goal")
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(out_dir, reports: dict, history: list[dict] | None = None,
                 ablation: dict | None = None, scaling=None,
                 trajectory=None, extra: dict | None = None) -> list[Path]:
    """Write the full report bundle; returns the paths produced."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []

    p = out / "metrics.csv"
    write_metrics_csv(p, reports)
    paths.append(p)
    p = out / "summary.json"
    write_summary_json(p, reports, extra)
    paths.append(p)
    p = out / "report.txt"
    write_text_report(p, reports, extra)
    paths.append(p)

    if history:
        p = out / "history.csv"
        write_history_csv(p, history)
        paths.append(p)
        p = out / "adaptation.png"
        plot_history(history, p)
        paths.append(p)
    if ablation:
        p = out / "ablation.png"
        plot_ablation(ablation, p)
        paths.append(p)
    if scaling is not None:
        scales, adapted, baseline = scaling
        p = out / "scaling.png"
        plot_scaling(scales, adapted, baseline, p)
        paths.append(p)
    if trajectory is not None:
        pelvis_xy, field, target = trajectory
        p = out / "trajectory.png"
        plot_trajectory(pelvis_xy, field, p, target)
        paths.append(p)
    return paths
