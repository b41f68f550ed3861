"""Figures rendered next to report files.

Every CLI command that writes a report also drops a PNG with the same
stem; these helpers hold the actual drawing so the command layer stays
thin. Matplotlib runs headless (Agg).
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_MB = float(2**20)


def plot_memory_breakdown(report_doc: dict, path) -> None:
    """Horizontal bars of the biggest per-layer activation costs plus a
    totals bar broken into activations / frozen / trainable params."""
    layers = sorted(
        (r for r in report_doc["layers"] if r["saved_activation_bytes"] > 0),
        key=lambda r: r["saved_activation_bytes"],
        reverse=True,
    )[:12]
    totals = report_doc["totals"]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4.2))
    if layers:
        names = [r["name"] for r in layers][::-1]
        vals = [r["saved_activation_bytes"] / _MB for r in layers][::-1]
        ax1.barh(names, vals, color="#4878cf")
    ax1.set_xlabel("saved activations (MB)")
    ax1.set_title(f"{report_doc['policy']}  batch {report_doc['batch']}  res {report_doc['resolution']}")
    parts = ["saved_activation_bytes", "frozen_param_bytes", "trainable_param_bytes"]
    labels = ["activations", "frozen params", "trainable params"]
    bottom = 0.0
    for part, label in zip(parts, labels):
        v = totals[part] / _MB
        ax2.bar(["headline"], [v], bottom=[bottom], label=label)
        bottom += v
    ax2.set_ylabel("MB")
    ax2.set_title(f"headline {totals['headline_mb']:.2f} MB")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_loss_curve(report_doc: dict, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(report_doc["loss_curve"], lw=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    acc = report_doc.get("final_acc")
    ax.set_title(f"{report_doc['policy']}  final acc {acc:.3f}" if acc is not None else report_doc["policy"])
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_sweep(rows: list, path) -> None:
    """rows: dicts with policy, resolution, headline_mb."""
    fig, ax = plt.subplots(figsize=(6.5, 4.5))
    policies = sorted({r["policy"] for r in rows})
    for pol in policies:
        pts = sorted((r for r in rows if r["policy"] == pol), key=lambda r: r["resolution"])
        ax.plot(
            [p["resolution"] for p in pts],
            [p["headline_mb"] for p in pts],
            marker="o",
            label=pol,
        )
    ax.set_xlabel("input resolution")
    ax.set_ylabel("headline footprint (MB)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_samples(dataset, path, per_class: int = 6) -> None:
    """Grid of example images, one row per class."""
    import numpy as np

    k = dataset.n_classes
    fig, axes = plt.subplots(k, per_class, figsize=(per_class * 1.3, k * 1.3))
    axes = np.atleast_2d(axes)
    for c in range(k):
        idx = np.flatnonzero(dataset.labels == c)[:per_class]
        for j in range(per_class):
            ax = axes[c][j]
            ax.axis("off")
            if j < len(idx):
                ax.imshow(dataset.images[idx[j]].transpose(1, 2, 0))
        axes[c][0].set_title(f"class {c}", fontsize=7, loc="left")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_search(history_scores: list, path) -> None:
    """Best score seen so far against number of configurations scored."""
    best = []
    cur = float("-inf")
    for s in history_scores:
        cur = max(cur, s)
        best.append(cur)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(best, lw=1.2)
    ax.set_xlabel("configurations scored")
    ax.set_ylabel("best predicted accuracy")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
