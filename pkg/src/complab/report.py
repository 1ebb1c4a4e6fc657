"""Report emission: JSON documents, flat CSV rows, and matplotlib figures."""

from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evalkit import MetricsReport


def write_metrics_json(report: MetricsReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")


def write_metrics_csv(report: MetricsReport, path) -> None:
    header, row = report.csv_header_and_row()
    with open(path, "w") as fh:
        fh.write(header + "\n")
        fh.write(row + "\n")


def save_cmc_figure(cmc_curve, path, title: str = "CMC curve") -> None:
    curve = np.asarray(cmc_curve, dtype=np.float64)
    ranks = np.arange(1, curve.size + 1)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(ranks, curve, marker="o")
    ax.set_xlabel("rank k")
    ax.set_ylabel("matching rate")
    ax.set_ylim(0.0, 1.02)
    ax.set_xticks(ranks)
    ax.grid(alpha=0.3)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_history_figure(history: list[dict], path) -> None:
    """Two panels: per-term training losses and validation mAP over epochs."""
    epochs = [row["epoch"] for row in history]
    fig, (ax_loss, ax_map) = plt.subplots(1, 2, figsize=(9, 3.5))
    term_names = sorted({name for row in history for name in row.get("terms", {})})
    for name in term_names:
        values = [row["terms"].get(name, np.nan) for row in history]
        ax_loss.plot(epochs, values, label=name)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean loss")
    ax_loss.grid(alpha=0.3)
    if term_names:
        ax_loss.legend(fontsize=7)

    ax_map.plot(epochs, [row["val_map"] for row in history], marker=".", color="tab:red")
    ax_map.set_xlabel("epoch")
    ax_map.set_ylabel("validation mAP")
    ax_map.set_ylim(0.0, 1.02)
    ax_map.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_group_size_figure(group_sizes, path) -> None:
    sizes = np.asarray(group_sizes)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(sizes, bins=np.arange(0.5, sizes.max() + 1.5), edgecolor="black")
    ax.set_xlabel("group size")
    ax.set_ylabel("count")
    ax.set_title(f"{sizes.size} groups")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
