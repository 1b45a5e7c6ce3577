"""Slide-level evaluation, PCA embedding export, and accuracy reporting.

Patch softmax vectors are averaged per slide; the slide prediction is the
argmax of the mean, with ties broken toward the lowest class index. Reports
render one row per held-out hospital plus a mean row, in CSV and aligned
plain text. Embedding dumps carry optional PCA projections alongside the
per-slide mean projection so external tools can plot patch and slide markers.
"""

import csv
import io
from dataclasses import dataclass

import numpy as np

from .model import ParamSet, forward_pass
from .tensor import Tensor

EVAL_BATCH = 64
MISSING = "n/a"


@dataclass(frozen=True)
class SlidePrediction:
    slide_id: str
    hospital: str
    label: int
    probabilities: np.ndarray
    predicted: int


@dataclass(frozen=True)
class FoldReport:
    hospital: str
    regime: str
    slide_count: int
    accuracy: float

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 100.0:
            raise ValueError(f"accuracy {self.accuracy} outside [0, 100]")


def aggregate_slide(probabilities, slide_id: str, hospital: str = "", label: int = -1) -> SlidePrediction:
    """Average patch probability vectors into one slide prediction."""
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError(f"slide {slide_id!r} needs a nonempty (patches, classes) array")
    mean = probs.mean(axis=0)
    total = mean.sum()
    if abs(total - 1.0) > 1e-5:
        raise ValueError(f"slide {slide_id!r} probabilities sum to {total}, not 1")
    # argmax already returns the lowest index among exact ties
    return SlidePrediction(slide_id, hospital, label, mean, int(np.argmax(mean)))


def slide_accuracy(predictions) -> float:
    if not predictions:
        raise ValueError("no predictions to score")
    correct = sum(1 for p in predictions if p.predicted == p.label)
    return 100.0 * correct / len(predictions)


def _batched_forward(params: ParamSet, x: np.ndarray, stage: str) -> np.ndarray:
    outs = []
    for start in range(0, x.shape[0], EVAL_BATCH):
        batch = Tensor(x[start : start + EVAL_BATCH], requires_grad=False)
        outs.append(forward_pass(params, batch, stage).data)
    return np.concatenate(outs, axis=0)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted.astype(np.float64))
    return e / e.sum(axis=-1, keepdims=True)


def predict_slides(params: ParamSet, patches: dict) -> list:
    """Score every slide in a load_patches dict, in first-appearance order."""
    probs = _softmax_rows(_batched_forward(params, patches["x"], "logits"))
    order: list = []
    rows: dict = {}
    for i, sid in enumerate(patches["slide_id"]):
        if sid not in rows:
            order.append(sid)
            rows[sid] = []
        rows[sid].append(i)
    preds = []
    for sid in order:
        idx = rows[sid]
        preds.append(
            aggregate_slide(
                probs[idx],
                sid,
                hospital=patches["hospital"][idx[0]],
                label=int(patches["y"][idx[0]]),
            )
        )
    return preds


def pca_project(embeddings, k: int) -> tuple:
    """Top-k PCA: returns (projections, components, explained ratios).

    Components come from a full symmetric eigendecomposition of the sample
    covariance, orthonormal within 1e-4, sign-fixed so the largest-magnitude
    entry of each component is positive. Ratios are reported descending.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("embeddings must be a (samples, features) matrix")
    n, d = x.shape
    limit = min(n - 1, d)
    if not 1 <= k <= limit:
        raise ValueError(f"k={k} outside [1, {limit}] for {n}x{d} data")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    top = np.argsort(eigvals)[::-1][:k]
    components = eigvecs[:, top].T
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    total = max(eigvals.sum(), np.finfo(np.float64).tiny)
    ratios = np.maximum(eigvals[top], 0.0) / total
    return centered @ components.T, components, ratios


def export_embeddings(params: ParamSet, patches: dict, path, k: int = 20):
    """Dump per-patch features (or PCA projections) to CSV in manifest order.

    With k > 0 each row also carries the per-slide mean projection, giving
    plotting tools both the translucent patch markers and the opaque slide
    markers without a second pass. k = 0 exports raw features unprojected.
    """
    feats = _batched_forward(params, patches["x"], "features").astype(np.float64)
    if k < 0:
        raise ValueError("k must be >= 0")
    if k == 0:
        values = feats
        prefix = "f"
        slide_means = None
    else:
        values, _, _ = pca_project(feats, k)
        prefix = "pc"
        sums: dict = {}
        for i, sid in enumerate(patches["slide_id"]):
            acc = sums.setdefault(sid, [np.zeros(k), 0])
            acc[0] += values[i]
            acc[1] += 1
        slide_means = {sid: acc[0] / acc[1] for sid, acc in sums.items()}

    header = ["slide_id", "hospital", "class"]
    header += [f"{prefix}{j}" for j in range(values.shape[1])]
    if slide_means is not None:
        header += [f"slide_pc{j}" for j in range(k)]

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for i, sid in enumerate(patches["slide_id"]):
        row = [sid, patches["hospital"][i], int(patches["y"][i])]
        row += [f"{v:.6g}" for v in values[i]]
        if slide_means is not None:
            row += [f"{v:.6g}" for v in slide_means[sid]]
        writer.writerow(row)
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())
    return path


def _fmt(value, signed: bool = False) -> str:
    if value is None:
        return MISSING
    return f"{value:+.2f}" if signed else f"{value:.2f}"


def report_rows(reports) -> list:
    """[(hospital, agnostic, baseline, delta)] plus the mean row, floats or None."""
    if not reports:
        raise ValueError("no fold reports to render")
    order: list = []
    cells: dict = {}
    for rep in reports:
        if rep.hospital not in cells:
            order.append(rep.hospital)
            cells[rep.hospital] = {}
        if rep.regime in cells[rep.hospital]:
            raise ValueError(f"duplicate regime {rep.regime!r} for {rep.hospital!r}")
        cells[rep.hospital][rep.regime] = rep.accuracy
    rows = []
    for hospital in order:
        agnostic = cells[hospital].get("masf")
        baseline = cells[hospital].get("baseline")
        delta = None if agnostic is None or baseline is None else agnostic - baseline
        rows.append((hospital, agnostic, baseline, delta))
    means = []
    for col in range(1, 4):
        present = [row[col] for row in rows if row[col] is not None]
        means.append(sum(present) / len(present) if present else None)
    rows.append(("mean", *means))
    return rows


REPORT_FOOTER = "baseline and hospital-agnostic runs share the per-fold initialization seed"


def render_report(reports, csv_path, txt_path):
    """Write the accuracy table as CSV and aligned text; returns both paths."""
    rows = report_rows(reports)
    header = ["hospital", "agnostic", "baseline", "delta"]
    formatted = [
        [hospital, _fmt(agnostic), _fmt(baseline), _fmt(delta, signed=True)]
        for hospital, agnostic, baseline, delta in rows
    ]

    with open(csv_path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(formatted)

    widths = [max(len(header[j]), *(len(r[j]) for r in formatted)) for j in range(4)]
    lines = ["  ".join(h.ljust(widths[j]) for j, h in enumerate(header)).rstrip()]
    lines.append("  ".join("-" * w for w in widths))
    for row in formatted:
        lines.append("  ".join(c.ljust(widths[j]) for j, c in enumerate(row)).rstrip())
    lines.append("")
    lines.append(REPORT_FOOTER)
    with open(txt_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return csv_path, txt_path
