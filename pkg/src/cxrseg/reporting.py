"""Report rendering: delimited tables plus matplotlib figures.

Every CLI report path writes machine-readable TSV alongside a rendered
PNG: training curves for `train`, metric bars with confidence whiskers
for `eval`, and mask overlays for `quantify`.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricsReport
from .training import EpochRecord


def write_history_tsv(history: Sequence[EpochRecord], path) -> None:
    lines = ["epoch\ttrain_loss\tval_loss\tval_dsc\tlr\timproved\tlr_reduced"]
    for rec in history:
        lines.append(
            f"{rec.epoch}\t{rec.train_loss:.8f}\t{rec.val_loss:.8f}\t{rec.val_dsc:.6f}"
            f"\t{rec.lr:.3e}\t{int(rec.improved)}\t{int(rec.lr_reduced)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def plot_history(history: Sequence[EpochRecord], path) -> None:
    epochs = [r.epoch for r in history]
    fig, (ax_loss, ax_dsc) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [r.train_loss for r in history], label="train loss")
    ax_loss.plot(epochs, [r.val_loss for r in history], label="val loss")
    for r in history:
        if r.lr_reduced:
            ax_loss.axvline(r.epoch, color="gray", linestyle=":", linewidth=0.8)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross-entropy")
    ax_loss.legend()
    ax_dsc.plot(epochs, [r.val_dsc for r in history], color="tab:green")
    ax_dsc.set_xlabel("epoch")
    ax_dsc.set_ylabel("val DSC")
    ax_dsc.set_ylim(0.0, 1.0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_metrics_tsv(reports: Sequence[MetricsReport], path) -> None:
    metric_names = list(reports[0].values) if reports else []
    header = ["task", "model", "encoder", "n"]
    for name in metric_names:
        header += [name, f"{name}_ci"]
    lines = ["\t".join(header)]
    for rep in reports:
        cells = [rep.task, rep.model, rep.encoder, str(rep.n)]
        for name in metric_names:
            value, radius = rep.values.get(name), rep.radii.get(name)
            if value is None:
                cells += ["", ""]
            else:
                cells += [f"{value:.6f}", f"{radius:.6f}"]
        lines.append("\t".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def plot_metrics(reports: Sequence[MetricsReport], path) -> None:
    metric_names = list(reports[0].values)
    width = 0.8 / max(len(reports), 1)
    x = np.arange(len(metric_names))
    fig, ax = plt.subplots(figsize=(1.8 * len(metric_names) + 2, 4))
    for i, rep in enumerate(reports):
        values = [100 * (rep.values[m] or 0.0) for m in metric_names]
        errors = [100 * (rep.radii[m] or 0.0) for m in metric_names]
        label = " / ".join(filter(None, [rep.task, rep.model, rep.encoder])) or f"run {i}"
        ax.bar(x + i * width, values, width=width, yerr=errors, capsize=3, label=label)
    ax.set_xticks(x + width * (len(reports) - 1) / 2)
    ax.set_xticklabels([m.capitalize() for m in metric_names])
    ax.set_ylabel("% (95% CI)")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_overlay(image: np.ndarray, lung_mask, infection_mask, path, title: str = "") -> None:
    """Radiograph with the lung boundary outlined and infection filled."""
    img = np.asarray(image)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(img, cmap="gray", vmin=0, vmax=255)
    if lung_mask is not None and np.any(lung_mask):
        ax.contour(np.asarray(lung_mask), levels=[0.5], colors="deepskyblue", linewidths=1.2)
    if infection_mask is not None and np.any(infection_mask):
        overlay = np.zeros((*img.shape, 4))
        overlay[np.asarray(infection_mask) > 0] = (1.0, 0.2, 0.1, 0.45)
        ax.imshow(overlay)
    if title:
        ax.set_title(title, fontsize=9)
    ax.set_axis_off()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
