"""Matplotlib figure rendering for the report paths (headless Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_SAVE_KW = dict(dpi=120, metadata={"Software": "ghnq"})


def save_loss_curve(history: list[dict], path: str) -> None:
    """Per-epoch training loss with the learning-rate schedule overlaid."""
    epochs = [row["epoch"] for row in history]
    losses = [row["loss"] for row in history]
    lrs = [row["lr"] for row in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, marker="o", color="tab:blue", label="mean loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy loss")
    ax.grid(alpha=0.3)
    ax2 = ax.twinx()
    ax2.step(epochs, lrs, where="post", color="tab:orange", alpha=0.6, label="lr")
    ax2.set_ylabel("learning rate")
    ax2.set_yscale("log")
    fig.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_eval_chart(report, path: str) -> None:
    """Grouped bars: mean accuracy with SEM error bars per split x precision."""
    splits = list(dict.fromkeys(r.split for r in report.rows))
    precisions = list(dict.fromkeys(r.precision for r in report.rows))
    width = 0.8 / max(len(precisions), 1)
    x = np.arange(len(splits))
    fig, ax = plt.subplots(figsize=(1.8 * len(splits) + 3, 4))
    for i, precision in enumerate(precisions):
        means, sems = [], []
        for split in splits:
            try:
                row = report.row(split, precision)
                means.append(row.mean_pct)
                sems.append(row.sem_pct)
            except KeyError:
                means.append(0.0)
                sems.append(0.0)
        ax.bar(x + i * width, means, width=width, yerr=sems, capsize=3,
               label=precision)
    ax.set_xticks(x + width * (len(precisions) - 1) / 2)
    ax.set_xticklabels(splits)
    ax.set_ylabel("top-1 accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_distribution_grid(params: dict[int, list], stats: dict[int, list[dict]],
                           path: str, max_panels: int = 16) -> None:
    """Histogram per predicted weight tensor, annotated with std/kurtosis."""
    panels = []
    for nid in sorted(params):
        for i, tensor in enumerate(params[nid]):
            data = np.asarray(tensor.data if hasattr(tensor, "data") else tensor)
            panels.append((nid, i, data.ravel(), stats[nid][i]))
    panels = panels[:max_panels]
    if not panels:
        return
    cols = min(4, len(panels))
    rows = -(-len(panels) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3 * cols, 2.4 * rows),
                             squeeze=False)
    for ax in axes.ravel():
        ax.set_visible(False)
    for ax, (nid, i, values, rec) in zip(axes.ravel(), panels):
        ax.set_visible(True)
        ax.hist(values, bins=min(40, max(10, values.size // 20)),
                color="tab:blue", alpha=0.8)
        ax.set_title(f"node {nid} tensor {i}\n"
                     f"std={rec['std']:.3g} kurt={rec['kurtosis']:.2f}",
                     fontsize=8)
        ax.tick_params(labelsize=7)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_robustness_chart(per_precision: dict[str, dict], path: str) -> None:
    """Accuracy per precision plus the float-vs-quantized output MSE."""
    tokens = list(per_precision)
    acc_f = [per_precision[t]["accuracy_float"] for t in tokens]
    acc_q = [per_precision[t]["accuracy_quant"] for t in tokens]
    mses = [per_precision[t]["output_mse"] for t in tokens]
    x = np.arange(len(tokens))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.bar(x - 0.2, acc_f, width=0.4, label="float32")
    ax1.bar(x + 0.2, acc_q, width=0.4, label="quantized")
    ax1.set_xticks(x)
    ax1.set_xticklabels(tokens)
    ax1.set_ylabel("top-1 accuracy (%)")
    ax1.legend(fontsize=8)
    ax1.grid(axis="y", alpha=0.3)
    ax2.bar(x, mses, color="tab:red", alpha=0.8)
    ax2.set_xticks(x)
    ax2.set_xticklabels(tokens)
    ax2.set_ylabel("output MSE (float vs quant)")
    ax2.set_yscale("symlog", linthresh=1e-12)
    ax2.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
