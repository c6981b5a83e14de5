"""Figure rendering for the report paths: every CSV a command emits gets a
matplotlib figure next to it. Data stays primary; figures are derived."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE_KW = {"dpi": 110, "metadata": {"Software": None}}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def plot_training_log(log_path: str, out_path: str) -> None:
    updates, train_loss, val_u, val_loss = [], [], [], []
    with open(log_path) as f:
        next(f)
        for line in f:
            parts = line.rstrip("\n").split(",")
            updates.append(int(parts[0]))
            train_loss.append(float(parts[1]))
            if len(parts) > 3 and parts[3]:
                val_u.append(int(parts[0]))
                val_loss.append(float(parts[3]))
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(updates, train_loss, lw=0.7, alpha=0.6, label="train")
    if val_u:
        ax.plot(val_u, val_loss, "o-", ms=3, label="validation")
    ax.set_xlabel("update")
    ax.set_ylabel("imitation loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    _save(fig, out_path)


def plot_eval_rows(rows, out_path: str) -> None:
    """Success rate vs planning updates, one line per model."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    models = sorted({r.model for r in rows})
    for m in models:
        nps = sorted({r.n_p for r in rows if r.model == m})
        means = [np.mean([r.rate for r in rows if r.model == m and r.n_p == n])
                 for n in nps]
        ax.plot(nps, means, "o-", label=m)
    ax.set_xlabel("planning updates at test time")
    ax.set_ylabel("success rate")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    _save(fig, out_path)


def plot_heatmap(grid: np.ndarray, out_path: str, label: str = "latent distance") -> None:
    """False-color map; masked (infeasible) cells stay blank. Row 0 of the
    grid is the bottom of the arena, so plot with origin='lower'."""
    fig, ax = plt.subplots(figsize=(4.6, 4))
    masked = np.ma.masked_invalid(grid)
    im = ax.imshow(masked.T, origin="lower", cmap="viridis",
                   extent=(0, 1, 0, 1))
    fig.colorbar(im, ax=ax, label=label)
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    _save(fig, out_path)


def plot_learning_curves(curves: dict, out_path: str) -> None:
    """``curves`` maps a label to a list of (env_steps, success) arrays,
    one per seed; seed curves are averaged pointwise."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for label, runs in curves.items():
        all_steps = runs[0][0]
        rates = np.mean([r[1] for r in runs], axis=0)
        ax.plot(all_steps, rates, "o-", ms=3, label=label)
    ax.set_xlabel("environment steps")
    ax.set_ylabel("held-out success rate")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    _save(fig, out_path)
