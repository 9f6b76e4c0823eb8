"""Static SVG plots of ablation results."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

CELL_PREFIX = "cell-"


def accuracy_memory_plot(rows: Sequence, path: str | Path, title: str = "Accuracy vs retained memory") -> Path:
    """Scatter of mean test accuracy against retained activation bytes.

    Each cell becomes its own SVG group with id ``cell-<i>`` so the file can
    be parsed back and matched against the CSV.
    """
    path = Path(path)
    plt.rcParams["svg.hashsalt"] = "sherl"
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, row in enumerate(rows):
        lo, hi = row.spread
        bars = ax.errorbar([row.retained_bytes / 1024], [row.mean], yerr=[[row.mean - lo], [hi - row.mean]],
                           fmt="o", capsize=3, label=row.label)
        bars.lines[0].set_gid(f"{CELL_PREFIX}{i}")
    ax.set_xlabel("retained activations (KiB, first batch)")
    ax.set_ylabel("test accuracy (mean, min..max)")
    ax.set_title(title)
    ax.legend(fontsize=7, loc="best")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def count_cells(path: str | Path) -> int:
    """Number of plotted cells in an SVG written by :func:`accuracy_memory_plot`."""
    root = ET.parse(path).getroot()
    return sum(1 for el in root.iter() if (el.get("id") or "").startswith(CELL_PREFIX))
