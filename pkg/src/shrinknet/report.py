"""Run reports: delimited tables plus rendered figures.

Every artifact is written next to its siblings in one output directory:
training history as TSV with a line-plot PNG, evaluation metrics as CSV
and a fixed-width text table with a confusion-matrix heatmap PNG.
"""

from __future__ import annotations

import csv
import math
import os

import numpy as np

from .train import HistoryRow, Metrics


def _ensure_dir(path: str) -> None:
    os.makedirs(path, exist_ok=True)


def write_history_tsv(history: list[HistoryRow], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["epoch", "train_loss", "val_accuracy"])
        for row in history:
            acc = "" if math.isnan(row.val_accuracy) else f"{row.val_accuracy:.6f}"
            writer.writerow([row.epoch, f"{row.train_loss:.6f}", acc])


def plot_history(history: list[HistoryRow], path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [row.epoch for row in history]
    losses = [row.train_loss for row in history]
    accs = [row.val_accuracy for row in history]
    fig, ax_loss = plt.subplots(figsize=(7, 4))
    ax_loss.plot(epochs, losses, color="tab:blue", label="train loss")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean training loss", color="tab:blue")
    ax_loss.tick_params(axis="y", labelcolor="tab:blue")
    if any(not math.isnan(a) for a in accs):
        ax_acc = ax_loss.twinx()
        ax_acc.plot(epochs, accs, color="tab:orange", label="val accuracy")
        ax_acc.set_ylabel("validation accuracy", color="tab:orange")
        ax_acc.set_ylim(0.0, 1.0)
        ax_acc.tick_params(axis="y", labelcolor="tab:orange")
    ax_loss.set_title("training history")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_confusion(metrics: Metrics, path: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    cm = np.asarray(metrics.confusion, dtype=np.int64)
    names = metrics.class_names
    n = cm.shape[0]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * n + 2),) * 2)
    im = ax.imshow(cm, cmap="Blues")
    ax.set_xticks(range(n), labels=names, rotation=45, ha="right")
    ax.set_yticks(range(n), labels=names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    threshold = cm.max() / 2 if cm.max() > 0 else 0.5
    for i in range(n):
        for j in range(n):
            color = "white" if cm[i, j] > threshold else "black"
            ax.text(j, i, str(cm[i, j]), ha="center", va="center", color=color)
    fig.colorbar(im, ax=ax, shrink=0.8)
    ax.set_title("confusion matrix")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_metrics_csv(metrics: Metrics, path: str) -> None:
    support = np.asarray(metrics.confusion).sum(axis=1)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "shapes", "precision", "recall", "f1"])
        for i, name in enumerate(metrics.class_names):
            writer.writerow([
                name,
                int(support[i]),
                _cell(metrics.precision[i]),
                _cell(metrics.recall[i]),
                _cell(metrics.f1[i]),
            ])
        writer.writerow(["overall", int(support.sum()),
                         _cell(metrics.accuracy), "", ""])


def _cell(value: float) -> str:
    return "" if math.isnan(value) else f"{value:.4f}"


def format_metrics_table(metrics: Metrics) -> str:
    """Fixed-width per-class table, one row per class plus overall accuracy."""
    support = np.asarray(metrics.confusion).sum(axis=1)
    width = max([len("class")] + [len(n) for n in metrics.class_names])
    head = (f"{'class':<{width}}  {'shapes':>6}  {'precision':>9}  "
            f"{'recall':>6}  {'f1':>6}")
    lines = [head, "-" * len(head)]
    for i, name in enumerate(metrics.class_names):
        lines.append(
            f"{name:<{width}}  {int(support[i]):>6}  "
            f"{_pad(metrics.precision[i], 9)}  {_pad(metrics.recall[i], 6)}  "
            f"{_pad(metrics.f1[i], 6)}")
    lines.append("-" * len(head))
    lines.append(f"accuracy: {metrics.accuracy:.4f}  "
                 f"({int(np.trace(metrics.confusion))}/{int(support.sum())})")
    return "\n".join(lines)


def _pad(value: float, width: int) -> str:
    if math.isnan(value):
        return f"{'n/a':>{width}}"
    return f"{value:{width}.4f}"


def write_train_report(history: list[HistoryRow], out_dir: str) -> list[str]:
    """History table plus figure; returns the paths written."""
    _ensure_dir(out_dir)
    tsv = os.path.join(out_dir, "history.tsv")
    png = os.path.join(out_dir, "history.png")
    write_history_tsv(history, tsv)
    plot_history(history, png)
    return [tsv, png]


def write_eval_report(metrics: Metrics, out_dir: str) -> list[str]:
    """Metrics CSV, text table, and confusion heatmap; returns the paths."""
    _ensure_dir(out_dir)
    csv_path = os.path.join(out_dir, "metrics.csv")
    txt_path = os.path.join(out_dir, "metrics.txt")
    png_path = os.path.join(out_dir, "confusion.png")
    write_metrics_csv(metrics, csv_path)
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write(format_metrics_table(metrics) + "\n")
    plot_confusion(metrics, png_path)
    return [csv_path, txt_path, png_path]
