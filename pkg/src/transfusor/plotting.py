"""
PNG figures rendered next to the delimited outputs of the command-line tool.

Each function takes arrays already written to text files and draws them; no
numbers are computed here that are not also in those files.
"""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .labels import ConditionLabel, table_order  # noqa: E402


def _save(fig, path):
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}.png"
    fig.savefig(tmp, dpi=110, bbox_inches="tight")
    plt.close(fig)
    os.replace(tmp, path)
    return path


def plot_trajectories(path, by_category, title=None):
    """One panel per category, origin-aligned trajectories in the canonical frame."""
    cats = [c for c in sorted(by_category) if len(by_category[c])]
    cols = min(3, max(1, len(cats)))
    rows = max(1, -(-len(cats) // cols))
    fig, axes = plt.subplots(rows, cols, figsize=(4.2 * cols, 2.6 * rows), squeeze=False)
    for ax in axes.flat:
        ax.set_visible(False)
    for ax, cat in zip(axes.flat, cats):
        ax.set_visible(True)
        pts = np.asarray(by_category[cat], dtype=float)
        pts = pts - pts[:, :1]
        for p in pts:
            ax.plot(p[:, 0], p[:, 1], lw=0.8, alpha=0.6)
        ax.set_title(ConditionLabel.from_index(cat).symbol(), fontsize=9)
        ax.set_xlabel("x [m]", fontsize=8)
        ax.set_ylabel("y [m]", fontsize=8)
        ax.tick_params(labelsize=7)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_kde_ladder(path, grids, label=None):
    """Density panels for a sequence of diffusion steps, shared color scale per panel."""
    fig, axes = plt.subplots(1, len(grids), figsize=(3.2 * len(grids), 3.0), squeeze=False)
    for ax, g in zip(axes[0], grids):
        ax.pcolormesh(g.xs, g.ys, g.density, shading="auto", cmap="viridis")
        ax.set_title(f"k = {g.step}", fontsize=9)
        ax.set_xlabel("x [m]", fontsize=8)
        ax.tick_params(labelsize=7)
    axes[0][0].set_ylabel("y [m]", fontsize=8)
    if label is not None:
        fig.suptitle(str(label))
    fig.tight_layout()
    return _save(fig, path)


def plot_coverage(path, reports, threshold):
    """Grouped bars of c1 and c2 per category at one ADE threshold."""
    labels = table_order()
    fig, ax = plt.subplots(figsize=(11, 3.6))
    width = 0.8 / (2 * len(reports))
    x = np.arange(len(labels))
    for i, rep in enumerate(reports):
        c1 = [rep.row(lab, threshold).c1 for lab in labels]
        c2 = [rep.row(lab, threshold).c2 for lab in labels]
        ax.bar(x + (2 * i) * width, c1, width, label=f"{rep.method} c1")
        ax.bar(x + (2 * i + 1) * width, c2, width, label=f"{rep.method} c2")
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels([lab.symbol() for lab in labels], rotation=45, ha="right", fontsize=7)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel(f"coverage at ADE < {threshold:g} m")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, path)


def plot_loss(path, history):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(1, len(history) + 1), history)
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean training loss")
    fig.tight_layout()
    return _save(fig, path)


def plot_speed_ratios(path, corpus):
    """Histogram of speed ratios per vehicle class with the tier cut points."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    for ax, vclass in zip(axes, ("car", "truck")):
        r = np.array([t.ratio for t in corpus.trajectories
                      if t.label.vehicle_class == vclass and np.isfinite(t.ratio)])
        if r.size:
            ax.hist(r, bins=40, color="0.6")
        st = corpus.stats.get(vclass)
        if st is not None:
            for v in (st.mu - st.sigma, st.mu + st.sigma):
                ax.axvline(v, color="k", ls="--", lw=0.8)
        ax.set_title(vclass, fontsize=9)
        ax.set_xlabel("mean |vy| / mean |vx|", fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
