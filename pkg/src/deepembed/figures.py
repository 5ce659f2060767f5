"""Report figures rendered with matplotlib alongside the delimited outputs."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data_io import PALETTE


def scatter_figure(Y, labels, path, title=None):
    """Colored 2-D scatter of an embedding, one palette color per class."""
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim != 2 or Y.shape[1] < 2:
        raise ValueError(f"need an N x 2 embedding, got shape {Y.shape}")
    fig, ax = plt.subplots(figsize=(7, 7))
    if labels is None:
        ax.scatter(Y[:, 0], Y[:, 1], s=4, c=PALETTE[0], linewidths=0)
    else:
        labels = np.asarray(labels)
        for code in np.unique(labels):
            pts = Y[labels == code]
            ax.scatter(pts[:, 0], pts[:, 1], s=4, linewidths=0,
                       c=PALETTE[int(code) % len(PALETTE)], label=str(code))
        ax.legend(markerscale=3, fontsize=8, loc="best")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def loss_figure(log, path):
    """Mean loss per epoch, one colored segment per training phase."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    records = log.records
    if records:
        phases = sorted({r.phase_index for r in records})
        for pi in phases:
            rs = [r for r in records if r.phase_index == pi]
            ax.plot([r.global_epoch for r in rs], [r.mean_loss for r in rs],
                    color=PALETTE[pi % len(PALETTE)], lw=1.5,
                    label=f"{pi}: {rs[0].phase_label}")
        ax.legend(fontsize=8)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean batch loss")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
