"""Figures written next to the CSV/hex outputs of the CLI."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .fixed_point import ONE, TANH_TABLE, WORD_MIN, tanh_approx_float  # noqa: E402


def plot_history(history, path, title: str = "") -> None:
    epochs = [r.epoch for r in history]
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax_loss.plot(epochs, [r.train_loss for r in history], color="C0")
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean train loss")
    ax_acc.plot(epochs, [100 * r.test_accuracy for r in history], color="C1")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("test accuracy / %")
    if history:
        best = history[-1].test_accuracy
        ax_acc.axhline(100 * best, color="0.6", lw=0.8, ls="--")
        ax_acc.set_ylim(max(90.0, 100 * min(r.test_accuracy for r in history)), 100)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_tanh_approx(path) -> None:
    """tanh, its piecewise quadratic approximation, and the Q5.7 table on [-4, 4]."""
    x = np.linspace(-4, 4, 2001)
    raw = np.arange(-4 * ONE, 4 * ONE + 1)
    fig, (ax, ax_err) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    ax.plot(x, np.tanh(x), color="0.3", label="tanh")
    ax.plot(x, tanh_approx_float(x), color="C0", ls="--", label="approximation")
    ax.step(raw / ONE, TANH_TABLE[raw - WORD_MIN] / ONE, where="mid", color="C1", lw=0.8, label="Q5.7 table")
    ax.legend(frameon=False)
    ax.set_ylabel("y")
    ax_err.plot(x, tanh_approx_float(x) - np.tanh(x), color="C0", label="approximation - tanh")
    ax_err.plot(raw / ONE, TANH_TABLE[raw - WORD_MIN] / ONE - tanh_approx_float(raw / ONE),
                color="C1", lw=0.8, label="table - approximation")
    ax_err.legend(frameon=False)
    ax_err.set_xlabel("x")
    ax_err.set_ylabel("error")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
