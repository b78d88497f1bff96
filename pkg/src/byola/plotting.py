"""Report figures written next to the CLI's CSV/JSON outputs (Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # Fixed metadata keeps repeated renders byte-stable.
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def loss_curve(losses, path, window: int = 10) -> Path:
    losses = np.asarray(losses, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = np.arange(1, len(losses) + 1)
    ax.plot(steps, losses, lw=0.8, alpha=0.5, label="step loss")
    if len(losses) >= window:
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax.plot(steps[window - 1:], smooth, lw=1.6, label=f"{window}-step mean")
    ax.set_xlabel("step")
    ax.set_ylabel("symmetric loss")
    ax.legend(loc="upper right")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def probe_report(report: dict, path) -> Path:
    """Per-run (or per-fold) test scores with the mean marked."""
    if "fold_scores" in report:
        labels = [f"fold {k}" for k in report["folds"]]
        values = report["fold_scores"]
    else:
        labels = [f"run {i + 1}" for i in range(len(report["runs"]))]
        values = report["runs"]
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(values) + 2), 3.5))
    ax.bar(labels, values, color="tab:blue", alpha=0.8)
    ax.axhline(report["mean"], color="tab:red", ls="--", label=f"mean {report['mean']:.4f}")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel(report["metric"])
    ax.legend(loc="lower right")
    return _save(fig, path)


def view_pair(x: np.ndarray, v: np.ndarray, v_prime: np.ndarray, path) -> Path:
    """Input spectrogram and its two augmented views, side by side."""
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.2), sharey=True)
    for ax, img, title in zip(axes, (x, v, v_prime), ("input", "view 1", "view 2")):
        ax.imshow(img, origin="lower", aspect="auto", cmap="magma")
        ax.set_title(title)
        ax.set_xlabel("frame")
    axes[0].set_ylabel("mel bin")
    return _save(fig, path)


def value_histogram(values: np.ndarray, mu: float, sigma: float, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.hist(np.ravel(values), bins=100, color="tab:gray")
    ax.axvline(mu, color="tab:red", label=f"mean {mu:.3f}")
    ax.axvspan(mu - sigma, mu + sigma, color="tab:red", alpha=0.15, label=f"std {sigma:.3f}")
    ax.set_xlabel("log-mel value")
    ax.legend()
    return _save(fig, path)
