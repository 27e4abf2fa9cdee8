"""Matplotlib figures for routing analysis, written as byte-stable SVG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import Normalize  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

_RC = {
    "svg.hashsalt": "visionmoe",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}


def _save(fig, path) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format=path.suffix.lstrip(".") or "svg", metadata={"Date": None})
    except OSError as exc:
        raise OSError(f"could not write figure {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def _cells(ax, matrix: np.ndarray, cmap, norm, gid: str = "cell"):
    rows, cols = matrix.shape
    for i in range(rows):
        for j in range(cols):
            r = Rectangle((j, i), 1, 1, facecolor=cmap(norm(matrix[i, j])), edgecolor="none")
            r.set_gid(f"{gid}-{i}-{j}")
            ax.add_patch(r)
    ax.set_xlim(0, cols)
    ax.set_ylim(rows, 0)
    ax.set_aspect("equal" if max(rows, cols) <= 4 * min(rows, cols) else "auto")


def heatmap(matrix, path, title: str = "", xlabel: str = "", ylabel: str = "",
            vmin: float | None = None, vmax: float | None = None, cmap: str = "viridis") -> Path:
    """One rectangle per cell (gid ``cell-i-j``) plus a colorbar legend."""
    m = np.asarray(matrix, dtype=float)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.8, 4.0))
        cm = plt.get_cmap(cmap)
        norm = Normalize(vmin=np.nanmin(m) if vmin is None else vmin,
                         vmax=np.nanmax(m) if vmax is None else vmax)
        _cells(ax, m, cm, norm)
        for axis, n in ((ax.xaxis, m.shape[1]), (ax.yaxis, m.shape[0])):
            ticks = range(0, n, max(1, n // 10) if n > 20 else 1)
            axis.set_ticks(np.array(ticks) + 0.5, [str(t) for t in ticks])
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        fig.colorbar(plt.cm.ScalarMappable(norm=norm, cmap=cm), ax=ax)
        fig.tight_layout()
        return _save(fig, path)


def spatial_panels(freq: np.ndarray, path, title: str = "") -> Path:
    """Small multiples: per-expert ``H x W`` frequency maps sharing one scale."""
    H, W, N = freq.shape
    cols = min(N, 4)
    rows = -(-N // cols)
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows + 0.4), squeeze=False)
        cm = plt.get_cmap("magma")
        norm = Normalize(0.0, 1.0)
        for e in range(rows * cols):
            ax = axes[e // cols][e % cols]
            if e >= N:
                ax.axis("off")
                continue
            _cells(ax, freq[:, :, e], cm, norm, gid=f"expert{e}")
            ax.set_title(f"expert {e}")
            ax.set_xticks([])
            ax.set_yticks([])
        fig.suptitle(title)
        fig.colorbar(plt.cm.ScalarMappable(norm=norm, cmap=cm), ax=axes.ravel().tolist(), shrink=0.8)
        return _save(fig, path)


def cdf_plot(cdfs: dict[int, object], tokens_per_image: int, path, title: str = "") -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for e, cdf in sorted(cdfs.items()):
            if cdf.empty:
                continue
            x = np.concatenate([[1], cdf.values, [tokens_per_image]])
            y = np.concatenate([[0.0], cdf.fractions, [1.0]])
            ax.step(x, y, where="post", label=f"expert {e}")
        ax.set_xlim(1, tokens_per_image)
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("patches per image")
        ax.set_ylabel("fraction of active images")
        ax.set_title(title)
        ax.legend(loc="lower right", ncol=2)
        fig.tight_layout()
        return _save(fig, path)


def pareto_plot(points, front, path, xlabel: str = "activated params per token",
                ylabel: str = "accuracy", title: str = "") -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.6))
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        ax.scatter(xs, ys, s=18, color="0.6", label="runs")
        fx = [p[0] for p in front]
        fy = [p[1] for p in front]
        ax.plot(fx, fy, "o-", color="C3", label="front")
        for p in front:
            ax.annotate(str(p[2]), (p[0], p[1]), fontsize=6, xytext=(3, 3), textcoords="offset points")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(loc="lower right")
        fig.tight_layout()
        return _save(fig, path)


def bar_plot(labels, values, path, ylabel: str = "", title: str = "") -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        ax.bar(range(len(values)), values, color="C0")
        ax.set_xticks(range(len(values)), labels, rotation=45, ha="right")
        ax.axhline(0.0, color="k", lw=0.6)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)
