"""Report figures (matplotlib, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import IOFailure  # noqa: E402


def _save(fig, path):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=100, bbox_inches="tight")
    except OSError as exc:
        raise IOFailure(f"cannot write plot {path}: {exc}") from exc
    finally:
        plt.close(fig)
    return path


def confidence_histogram(reports, path, title="confidence on target class"):
    """``reports`` maps a label to a ConfidenceReport; bars are normalized per series."""
    fig, ax = plt.subplots(figsize=(6, 3.5))
    n = max(len(reports), 1)
    for i, (label, rep) in enumerate(reports.items()):
        edges = rep.edges
        width = (edges[1] - edges[0]) / n
        total = max(sum(rep.counts), 1)
        ax.bar([e + i * width for e in edges[:-1]], [c / total for c in rep.counts], width=width,
               align="edge", label=f"{label} (mean {rep.mean:.3f})", alpha=0.85)
    ax.set_xlim(0, 1)
    ax.set_xlabel("probability of target class")
    ax.set_ylabel("fraction of images")
    ax.set_title(title)
    ax.legend()
    return _save(fig, path)


def noise_curve(curves, path):
    """``curves`` maps a label to ``[(p, accuracy), ...]``."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, pts in curves.items():
        ax.plot([100 * p for p, _ in pts], [100 * a for _, a in pts], marker="o", label=label)
    ax.set_xlabel("labels distorted (%)")
    ax.set_ylabel("GAN-test accuracy (%)")
    ax.legend()
    return _save(fig, path)


def table_figure(header, rows, path, title=""):
    fig, ax = plt.subplots(figsize=(1.4 * len(header), 0.45 * (len(rows) + 2)))
    ax.axis("off")
    cells = [[f"{c:.4g}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    ax.table(cellText=cells, colLabels=list(header), loc="center")
    if title:
        ax.set_title(title)
    return _save(fig, path)
