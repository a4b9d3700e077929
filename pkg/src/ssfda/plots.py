"""Matplotlib figures for run reports (Agg backend, PNG files)."""
from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}  # keep PNG bytes free of version strings


def _save(fig, path: str | os.PathLike) -> None:
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def loss_curve(losses: list[float], path: str | os.PathLike, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(1, len(losses) + 1), losses, marker="o")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def severity_bars(rows: list[dict], path: str | os.PathLike, title: str = "mIoU by severity") -> None:
    """One bar per row; rows carry 'severity' and 'miou' (None is drawn as 0)."""
    labels = [r["severity"] for r in rows]
    vals = [r["miou"] or 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(rows) + 1), 3.2))
    ax.bar(range(len(rows)), vals, color="tab:blue")
    ax.set_xticks(range(len(rows)), labels, rotation=30, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel("mIoU")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)


def curriculum_trace(snapshots: list[dict], path: str | os.PathLike) -> None:
    """Entropy before/after each step and, when present, target mIoU per batch."""
    idx = np.arange(len(snapshots))
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for key, lab in (("entropy_before", "before"), ("entropy_after_step1", "after step 1"),
                     ("entropy_after_step2", "after step 2")):
        axes[0].plot(idx, [s[key] for s in snapshots], marker="o", label=lab)
    axes[0].set_xlabel("curriculum batch")
    axes[0].set_ylabel("mean entropy")
    axes[0].legend(fontsize=8)
    m1 = [(s.get("metrics_after_step1") or {}).get("miou") for s in snapshots]
    m2 = [(s.get("metrics_after_step2") or {}).get("miou") for s in snapshots]
    if any(v is not None for v in m1 + m2):
        axes[1].plot(idx, [np.nan if v is None else v for v in m1], marker="o", label="after step 1")
        axes[1].plot(idx, [np.nan if v is None else v for v in m2], marker="s", label="after step 2")
        axes[1].legend(fontsize=8)
    axes[1].set_xlabel("curriculum batch")
    axes[1].set_ylabel("batch mIoU")
    fig.tight_layout()
    _save(fig, path)


def prediction_panel(images: np.ndarray, probs: np.ndarray, labels: np.ndarray, path: str | os.PathLike,
                     titles: list[str] | None = None) -> None:
    """Rows of (image, probability, label) for up to six scenes."""
    n = min(len(images), 6)
    fig, axes = plt.subplots(n, 3, figsize=(6, 2 * n), squeeze=False)
    for i in range(n):
        axes[i, 0].imshow(np.clip(images[i].transpose(1, 2, 0), 0, 1))
        axes[i, 1].imshow(probs[i], vmin=0, vmax=1, cmap="magma")
        axes[i, 2].imshow(labels[i], vmin=0, vmax=1, cmap="gray")
        if titles:
            axes[i, 0].set_ylabel(titles[i], fontsize=8)
        for ax in axes[i]:
            ax.set_xticks([])
            ax.set_yticks([])
    for ax, t in zip(axes[0], ("image", "P(road)", "label")):
        ax.set_title(t, fontsize=9)
    fig.tight_layout()
    _save(fig, path)
