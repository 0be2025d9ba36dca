"""Loss-curve figures rendered to image files (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_loss_curves(curves: dict, path, metric: str = "loss", log_scale: bool = True) -> Path:
    """Two stacked panels (train above, validation below), mean with a +-1 std band per curve.

    ``curves`` maps a label to aggregate rows with ``step``, ``split``,
    ``<metric>_mean`` and ``<metric>_std`` keys.
    """
    fig, axes = plt.subplots(2, 1, figsize=(6, 6), sharex=True)
    for ax, split_name in zip(axes, ("train", "val")):
        for label, rows in curves.items():
            rows = [r for r in rows if r["split"] == split_name]
            if not rows:
                continue
            step = np.array([r["step"] for r in rows])
            mu = np.array([r[f"{metric}_mean"] for r in rows])
            sd = np.array([r[f"{metric}_std"] for r in rows])
            line, = ax.plot(step, mu, label=label, lw=1.5)
            ax.fill_between(step, np.maximum(mu - sd, 1e-12 if log_scale else -np.inf), mu + sd,
                            color=line.get_color(), alpha=0.2, lw=0)
        if log_scale:
            ax.set_yscale("log")
        ax.set_ylabel(f"{split_name} {metric}")
        ax.grid(alpha=0.3)
    axes[0].legend(frameon=False, fontsize=8)
    axes[1].set_xlabel("step")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
