"""Metric reports: delimited values, human summary, and rendered figures.

The report path takes a finished run directory, computes the consistency
metrics over its clips, and writes an output directory containing
``metrics.csv`` (machine-readable), ``report.txt`` (human-readable, keyed
by the run's manifest digest), and one PNG figure per metric family.
Distribution metrics that need pretrained video classifiers are listed as
not computed rather than silently omitted.
"""

from __future__ import annotations

import csv
import os
from typing import Any

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .errors import ConfigError
from .metrics import boundary_consistency, cycling_score, smoothness

NOT_COMPUTED = "not computed (requires pretrained video classifiers)"


def compute_run_metrics(clips: list[np.ndarray]) -> list[dict[str, Any]]:
    """Metric rows for a clip sequence: one row per (metric, scope)."""
    if not clips:
        raise ConfigError("no clips to measure")
    rows: list[dict[str, Any]] = []
    for i, clip in enumerate(clips):
        rows.append({"metric": "smoothness", "scope": f"clip {i}", "value": smoothness(clip)})
    for i in range(len(clips) - 1):
        rows.append(
            {
                "metric": "boundary_consistency",
                "scope": f"clips {i}-{i + 1}",
                "value": boundary_consistency(clips[i], clips[i + 1]),
            }
        )
        rows.append(
            {
                "metric": "cycling_score",
                "scope": f"clips {i}-{i + 1}",
                "value": cycling_score(clips[i], clips[i + 1]),
            }
        )
    return rows


def write_metrics_csv(path: str, rows: list[dict[str, Any]]) -> None:
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["metric", "scope", "value"])
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "value": f"{row['value']:.9f}"})


def _bar_figure(path: str, labels: list[str], values: list[float], title: str, ylabel: str) -> None:
    fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(labels) + 2.0), 3.2))
    ax.bar(range(len(values)), values, color="#4878a8")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_title(title)
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_metric_figures(out_dir: str, rows: list[dict[str, Any]]) -> list[str]:
    written = []
    for metric, ylabel in (
        ("smoothness", "mean |frame diff|"),
        ("boundary_consistency", "mean |edge diff|"),
        ("cycling_score", "correlation"),
    ):
        subset = [row for row in rows if row["metric"] == metric]
        if not subset:
            continue
        path = os.path.join(out_dir, f"{metric}.png")
        _bar_figure(
            path,
            [row["scope"] for row in subset],
            [row["value"] for row in subset],
            metric.replace("_", " "),
            ylabel,
        )
        written.append(os.path.basename(path))
    return written


def save_loss_curves(path: str, curves: dict[str, list[float]], title: str) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    for name, curve in sorted(curves.items()):
        if curve:
            ax.plot(range(len(curve)), curve, label=name, linewidth=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    if len(curves) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def write_loss_csv(path: str, curves: dict[str, list[float]]) -> None:
    names = sorted(curves)
    length = max((len(c) for c in curves.values()), default=0)
    with open(path, "w", encoding="ascii", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", *names])
        for i in range(length):
            writer.writerow(
                [i, *[f"{curves[n][i]:.9f}" if i < len(curves[n]) else "" for n in names]]
            )


def write_report_text(
    path: str,
    run_digest: str,
    space: str,
    clip_count: int,
    frames_per_clip: int,
    rows: list[dict[str, Any]],
) -> None:
    lines = [
        "clipchain metrics report",
        f"run_manifest_digest: {run_digest}",
        f"space: {space}",
        f"clips: {clip_count}",
        f"frames_per_clip: {frames_per_clip}",
        "",
    ]
    for metric in ("smoothness", "boundary_consistency", "cycling_score"):
        subset = [row for row in rows if row["metric"] == metric]
        if not subset:
            continue
        lines.append(f"{metric}:")
        for row in subset:
            lines.append(f"  {row['scope']}: {row['value']:.9f}")
        lines.append("")
    lines.append(f"fvd: {NOT_COMPUTED}")
    lines.append(f"inception_score: {NOT_COMPUTED}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")
