"""Report rendering for the CLI: delimited rows plus matplotlib figures.

Every figure-producing command writes a PNG next to its CSV rows so a run
directory is self-describing. The Agg backend keeps this headless-safe.
"""

from __future__ import annotations

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .online_learning import PlacementDecision
from .resources import ResourceReport


def write_rows(path, header: list[str], rows: list) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def save_loss_curve(epoch_losses: list[float], path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(range(1, len(epoch_losses) + 1), epoch_losses, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_confusion_matrix(
    labels: list[str], confusion: dict[tuple[str, str], int], path
) -> None:
    n = len(labels)
    matrix = np.zeros((n, n), dtype=int)
    index = {label: i for i, label in enumerate(labels)}
    for (truth, predicted), count in confusion.items():
        matrix[index[truth], index[predicted]] = count
    fig, ax = plt.subplots(figsize=(1.0 + 0.7 * n, 1.0 + 0.7 * n))
    image = ax.imshow(matrix, cmap="Blues")
    ax.set_xticks(range(n), labels, rotation=45, ha="right")
    ax.set_yticks(range(n), labels)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(n):
        for j in range(n):
            ax.text(j, i, str(matrix[i, j]), ha="center", va="center",
                    fontsize=8,
                    color="white" if matrix[i, j] > matrix.max() / 2 else "black")
    fig.colorbar(image, ax=ax, shrink=0.8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_resource_comparison(report: ResourceReport, path) -> None:
    names = ["single_model", "multi_model", "shared_trunk"]
    kib = [report.deployments[n].nbytes / 1024.0 for n in names]
    macc = [report.deployments[n].macc_worst for n in names]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.bar(names, kib, color=["#888", "#b55", "#47a"])
    ax1.set_ylabel("parameter KiB")
    ax1.set_title("memory")
    ax2.bar(names, macc, color=["#888", "#b55", "#47a"])
    ax2.set_ylabel("worst-path MACC")
    ax2.set_title("computation")
    for ax in (ax1, ax2):
        ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_placement_frequencies(decision: PlacementDecision, path) -> None:
    labels = list(decision.counts)
    values = [decision.counts[label] / decision.sample_count for label in labels]
    highlight = set(decision.attach_to or ())
    colors = ["#c95" if label in highlight else "#47a" for label in labels]
    fig, ax = plt.subplots(figsize=(1.5 + 0.6 * len(labels), 4))
    ax.bar(labels, values, color=colors)
    ax.set_ylabel("predicted-label frequency")
    if decision.delta is not None:
        ax.set_title(f"node selection (delta={decision.delta})")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
