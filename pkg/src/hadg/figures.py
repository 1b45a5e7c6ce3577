"""Matplotlib renderings: accuracy bars and the embedding scatter.

Both figures are written to files (no interactive backend); they accompany
the delimited report and embedding dumps produced by the eval-report layer.
"""

import csv

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import report_rows


def report_figure(reports, path, dpi: int = 150):
    """Grouped accuracy bars per held-out hospital, mean group included."""
    rows = report_rows(reports)
    labels = [row[0] for row in rows]
    x = np.arange(len(labels), dtype=np.float64)
    width = 0.38

    fig, ax = plt.subplots(figsize=(1.6 * len(labels) + 2.0, 4.0))
    for offset, column, title, color in (
        (-width / 2, 1, "hospital-agnostic", "#4c72b0"),
        (width / 2, 2, "baseline", "#dd8452"),
    ):
        xs = [x[i] + offset for i, row in enumerate(rows) if row[column] is not None]
        ys = [row[column] for row in rows if row[column] is not None]
        if xs:
            ax.bar(xs, ys, width, label=title, color=color)
    ax.set_xticks(x)
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("slide-level accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(loc="lower right")
    ax.set_axisbelow(True)
    ax.grid(axis="y", alpha=0.3)
    fig.savefig(path, dpi=dpi, bbox_inches="tight")
    plt.close(fig)
    return path


def _read_embedding_csv(csv_path):
    with open(csv_path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader)
        body = list(reader)
    if not body:
        raise ValueError(f"{csv_path} has no embedding rows")
    return header, body


def embeddings_figure(csv_path, path, color_by: str = "class", dpi: int = 150):
    """2-D scatter of an embedding dump: translucent patches, opaque slides.

    Needs at least two projection columns (pc0, pc1); raw-feature dumps
    (k=0) are rejected because there is no canonical 2-D view of them.
    """
    if color_by not in ("class", "hospital"):
        raise ValueError(f"color_by must be 'class' or 'hospital', got {color_by!r}")
    header, body = _read_embedding_csv(csv_path)
    needed = ("pc0", "pc1", "slide_pc0", "slide_pc1")
    if not all(c in header for c in needed):
        raise ValueError(f"{csv_path} lacks 2-D projection columns {needed}")
    col = {name: header.index(name) for name in needed}
    key_col = header.index(color_by if color_by == "hospital" else "class")
    slide_col = header.index("slide_id")

    keys = sorted({row[key_col] for row in body})
    cmap = plt.get_cmap("tab10")
    colors = {k: cmap(i % 10) for i, k in enumerate(keys)}

    fig, ax = plt.subplots(figsize=(6.0, 5.0))
    for key in keys:
        rows = [row for row in body if row[key_col] == key]
        ax.scatter(
            [float(r[col["pc0"]]) for r in rows],
            [float(r[col["pc1"]]) for r in rows],
            s=12,
            alpha=0.25,
            color=colors[key],
            linewidths=0,
            label=f"{color_by} {key}",
        )
        seen = set()
        sx, sy = [], []
        for r in rows:
            if r[slide_col] not in seen:
                seen.add(r[slide_col])
                sx.append(float(r[col["slide_pc0"]]))
                sy.append(float(r[col["slide_pc1"]]))
        ax.scatter(sx, sy, s=60, alpha=1.0, color=colors[key], edgecolors="black")
    ax.set_xlabel("pc0")
    ax.set_ylabel("pc1")
    ax.legend(loc="best", fontsize=8)
    fig.savefig(path, dpi=dpi, bbox_inches="tight")
    plt.close(fig)
    return path
