"""Figure rendering for reports; always uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "image.cmap": "magma",
    # stable bytes across runs
    "svg.hashsalt": "mtfa",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def attention_panels(spectrogram: np.ndarray, masks: Sequence[np.ndarray], path, title: str = "") -> Path:
    """Input spectrogram followed by one channel-averaged mask per scale.

    Args:
        spectrogram: ``(T, D)`` log-mel frames.
        masks: per-scale arrays ``(C, T_k, D_k)``, finest first.
        path: output image file.
    """
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1 + len(masks), 1, figsize=(7, 1.6 * (1 + len(masks))), squeeze=False)
        axes = axes[:, 0]
        axes[0].imshow(spectrogram.T, origin="lower", aspect="auto")
        axes[0].set_ylabel("mel")
        axes[0].set_title(title or "input")
        for k, (ax, m) in enumerate(zip(axes[1:], masks)):
            ax.imshow(m.mean(axis=0).T, origin="lower", aspect="auto", vmin=0, vmax=1)
            ax.set_ylabel(f"scale 1/{2 ** k}")
        axes[-1].set_xlabel("frame")
        fig.tight_layout()
        return _save(fig, path)


def score_bars(report, path) -> Path:
    """Per-class error rate and F1 side by side."""
    names = sorted(report.classes)
    er = [report.classes[n].error_rate for n in names]
    f1 = [100 * report.classes[n].f1 for n in names]
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=(7, 2.6))
        x = np.arange(len(names))
        a.bar(x, np.nan_to_num(er), color="tab:red")
        a.set_xticks(x, names)
        a.set_ylabel("ER")
        b.bar(x, f1, color="tab:blue")
        b.set_xticks(x, names)
        b.set_ylabel("F1 (%)")
        b.set_ylim(0, 100)
        fig.tight_layout()
        return _save(fig, path)


def loss_curve(history, path) -> Path:
    """Training and validation BCE per epoch."""
    epochs = [r.epoch for r in history]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.plot(epochs, [r.train_loss for r in history], label="train")
        ax.plot(epochs, [r.val_loss for r in history], label="validation")
        ax.set_xlabel("epoch")
        ax.set_ylabel("BCE")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
