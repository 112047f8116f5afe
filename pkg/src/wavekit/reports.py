"""Report writers: delimited/JSON artifacts plus rendered figures.

Every reporting command writes its tabular output as CSV (and JSON where the
payload is nested) and renders a matching PNG figure next to it. CSV and
JSON bytes are deterministic for identical inputs; figures are for humans.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402


def write_json(path: str | Path, payload) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                          encoding="utf-8")


def write_csv(path: str | Path, rows: Sequence[dict], fieldnames: Sequence[str],
              footer_comments: Sequence[str] = ()) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fieldnames})
        for comment in footer_comments:
            f.write(f"# {comment}\n")


def _save(fig, path: str | Path) -> None:
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata={})
    plt.close(fig)


def save_loss_curve(trace: Sequence[dict], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = [r["step"] for r in trace]
    losses = [r["loss"] for r in trace]
    ax.plot(steps, losses, lw=0.8, alpha=0.5, color="tab:blue")
    if len(losses) > 20:
        window = max(5, len(losses) // 50)
        kernel = np.ones(window) / window
        smooth = np.convolve(losses, kernel, mode="valid")
        ax.plot(steps[window - 1:], smooth, lw=1.8, color="tab:blue", label=f"mean({window})")
        ax.legend(frameon=False)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    _save(fig, path)


def save_metric_bars(metrics: dict[str, float], path: str | Path,
                     title: str = "evaluation") -> None:
    names = sorted(metrics)
    values = [metrics[n] for n in names]
    fig, ax = plt.subplots(figsize=(max(6, 0.8 * len(names)), 4))
    ax.bar(range(len(names)), values, color="tab:blue")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.set_title(title)
    for i, v in enumerate(values):
        ax.text(i, v + 0.01, f"{v:.3f}", ha="center", fontsize=7)
    _save(fig, path)


def save_ablation_chart(rows: Sequence[dict], path: str | Path) -> None:
    strategies = list(dict.fromkeys(r["strategy"] for r in rows))
    settings = list(dict.fromkeys(r["modality"] for r in rows))
    width = 0.8 / max(1, len(settings))
    fig, ax = plt.subplots(figsize=(8, 4))
    for j, setting in enumerate(settings):
        vals = [next(r["r_at_1"] for r in rows
                     if r["strategy"] == s and r["modality"] == setting)
                for s in strategies]
        offs = np.arange(len(strategies)) + (j - (len(settings) - 1) / 2) * width
        ax.bar(offs, vals, width=width, label=setting)
    ax.set_xticks(range(len(strategies)))
    ax.set_xticklabels(strategies, rotation=20, ha="right")
    ax.set_ylabel("R@1")
    ax.set_ylim(0, 1.05)
    ax.set_title("embedding-extraction strategies")
    ax.legend(frameon=False)
    _save(fig, path)


def save_heatmap(matrix: np.ndarray, row_labels: Sequence[str],
                 col_labels: Sequence[str], path: str | Path,
                 title: str = "prompt-conditioned similarity") -> None:
    fig, ax = plt.subplots(figsize=(1.2 * len(col_labels) + 2, 1.0 * len(row_labels) + 1.5))
    im = ax.imshow(matrix, cmap="viridis")
    ax.set_xticks(range(len(col_labels)))
    ax.set_xticklabels(col_labels, rotation=30, ha="right")
    ax.set_yticks(range(len(row_labels)))
    ax.set_yticklabels(row_labels)
    for i in range(matrix.shape[0]):
        for j in range(matrix.shape[1]):
            ax.text(j, i, f"{matrix[i, j]:.3f}", ha="center", va="center",
                    color="white", fontsize=8)
    ax.set_title(title)
    fig.colorbar(im, shrink=0.8)
    _save(fig, path)
