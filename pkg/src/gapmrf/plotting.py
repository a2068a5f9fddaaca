"""Matplotlib figures for reconstructions and sweeps (file output only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# Display ranges: proton density in a.u., T1 and T2 in ms.
MAP_RANGES = {"rho": (0.0, 400.0), "t1": (0.0, 5100.0), "t2": (0.0, 600.0)}

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "savefig.dpi": 120,
    "svg.hashsalt": "gapmrf",
}


def _image(ax, img, vmin, vmax, title, cmap="viridis"):
    im = ax.imshow(img, vmin=vmin, vmax=vmax, cmap=cmap, interpolation="nearest")
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    return im


def plot_tissue_maps(path, truth_maps, est_maps, names, residual=None, dims=None):
    """Ground-truth and estimated proton-density maps, one column per tissue."""
    truth_maps = np.asarray(truth_maps)
    est_maps = np.asarray(est_maps)
    T = truth_maps.shape[1]
    ncols = T + (residual is not None)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, ncols, figsize=(1.6 * ncols, 3.4), squeeze=False)
        lo, hi = MAP_RANGES["rho"]
        for t in range(T):
            _image(axes[0, t], truth_maps[:, t].reshape(dims), lo, hi, names[t])
            im = _image(axes[1, t], est_maps[:, t].reshape(dims), lo, hi, "")
        if residual is not None:
            axes[0, -1].axis("off")
            _image(axes[1, -1], np.asarray(residual).reshape(dims), lo, hi, "other")
        axes[0, 0].set_ylabel("truth")
        axes[1, 0].set_ylabel("estimate")
        fig.colorbar(im, ax=axes, shrink=0.7)
        fig.savefig(path)
        plt.close(fig)


def plot_dominant_maps(path, maps, dims):
    """Density, T1 and T2 of the dominant tissue in each voxel."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(7.5, 2.6))
        for ax, key, label in zip(axes, ("rho", "t1", "t2"), ("density", "T1 (ms)", "T2 (ms)")):
            lo, hi = MAP_RANGES[key]
            im = _image(ax, np.asarray(maps[key]).reshape(dims), lo, hi, label)
            fig.colorbar(im, ax=ax, shrink=0.8)
        fig.savefig(path)
        plt.close(fig)


def plot_energy(path, histories):
    """Energy traces on a log scale, one line per labelled run."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        for label, hist in histories.items():
            h = np.asarray(hist, dtype=float)
            ax.semilogy(np.arange(h.size), np.maximum(h, 1e-300), label=label)
        ax.set_xlabel("iteration")
        ax.set_ylabel("||h(M) - Y||^2")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)


def plot_sweep(path, x, series, xlabel, ylabel):
    """Mean and standard deviation over seeds for each method.

    ``series`` maps a label to a (mean, std) pair of arrays aligned with ``x``.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        for label, (mean, std) in series.items():
            ax.errorbar(x, mean, yerr=std, marker="o", capsize=3, label=label)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
