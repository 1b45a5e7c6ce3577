"""Slide-to-patch pipeline: Otsu foreground segmentation, morphological
closing, non-overlapping patch extraction with background rejection, balanced
resampling, slide-level splits, and the patch manifest.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

MANIFEST_FIELDS = (
    "slide_id",
    "hospital",
    "label",
    "row",
    "col",
    "background_fraction",
    "split",
    "path",
)


@dataclass
class SlideImage:
    slide_id: str
    hospital: str
    label: int
    pixels: np.ndarray  # (rows, cols, 3) uint8


@dataclass
class PatchRecord:
    slide_id: str
    hospital: str
    label: int
    row: int
    col: int
    background_fraction: float
    split: str = ""
    path: str = ""

    def sort_key(self):
        return (self.hospital, self.slide_id, self.row, self.col)


def rgb_to_gray(pixels: np.ndarray) -> np.ndarray:
    """Rounded channel mean; (r+g+b+1)//3 rounds thirds to nearest."""
    total = pixels.astype(np.uint16).sum(axis=-1)
    return ((total + 1) // 3).astype(np.uint8)


def gray_histogram(gray: np.ndarray) -> np.ndarray:
    return np.bincount(gray.reshape(-1), minlength=256)


def otsu_threshold(hist) -> tuple:
    """Threshold maximizing between-class variance over {<=t, >t}.

    Ties go to the smallest t. Returns (threshold, degenerate); a
    single-valued histogram returns that value with the degenerate flag set.
    """
    hist = np.asarray(hist, dtype=np.float64)
    if hist.shape != (256,):
        raise ValueError(f"expected a 256-bin histogram, got shape {hist.shape}")
    total = hist.sum()
    if total < 1:
        raise ValueError("histogram is empty")
    if np.count_nonzero(hist) <= 1:
        return int(np.argmax(hist)), True
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(hist)
    m0sum = np.cumsum(hist * levels)
    w1 = total - w0
    msum_total = m0sum[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0sum / w0
        mu1 = (msum_total - m0sum) / w1
        var = (w0 / total) * (w1 / total) * (mu0 - mu1) ** 2
    var[(w0 == 0) | (w1 == 0)] = 0.0
    return int(np.argmax(var)), False


def tissue_mask(pixels: np.ndarray, tissue_darker: bool = True) -> tuple:
    """Binary tissue mask from the Otsu threshold on the gray histogram.

    Returns (mask, threshold, degenerate). Tissue is the darker side by
    default (stain absorbs light); flip with tissue_darker=False.
    """
    gray = rgb_to_gray(pixels)
    t, degenerate = otsu_threshold(gray_histogram(gray))
    mask = gray <= t if tissue_darker else gray > t
    if degenerate:
        mask = np.ones_like(mask)
    return mask.astype(bool), t, degenerate


def _shift_extreme(padded: np.ndarray, reduce_max: bool) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    return win.max(axis=(2, 3)) if reduce_max else win.min(axis=(2, 3))


def morphological_close(mask: np.ndarray) -> np.ndarray:
    """Dilation then erosion with a 3x3 square, on an implicit infinite
    background so the result always contains the original mask."""
    m = np.asarray(mask).astype(np.uint8)
    canvas = np.pad(m, 1)  # room for dilation to grow past the frame
    dilated = _shift_extreme(np.pad(canvas, 1), reduce_max=True)
    eroded = _shift_extreme(np.pad(dilated, 1), reduce_max=False)
    return eroded[1:-1, 1:-1].astype(bool)


def extract_patches(
    slide: SlideImage,
    mask: np.ndarray,
    size: int,
    stride: int | None = None,
    max_background: float = 0.5,
) -> list:
    """Tile the slide on a grid from the origin; keep patches whose
    mask-background fraction does not exceed max_background."""
    h, w = slide.pixels.shape[:2]
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds slide dims {(h, w)}")
    if mask.shape != (h, w):
        raise ValueError(f"mask shape {mask.shape} does not match slide {(h, w)}")
    stride = size if stride is None else stride
    records = []
    for gr, r in enumerate(range(0, h - size + 1, stride)):
        for gc, c in enumerate(range(0, w - size + 1, stride)):
            tile = mask[r : r + size, c : c + size]
            bg = 1.0 - float(tile.mean())
            if bg <= max_background:
                records.append(
                    PatchRecord(
                        slide_id=slide.slide_id,
                        hospital=slide.hospital,
                        label=slide.label,
                        row=gr,
                        col=gc,
                        background_fraction=bg,
                    )
                )
    return records


def balance_resample(records, seed, expected_cells=None, cap: int | None = None) -> list:
    """Downsample every (hospital, label) cell to the global minimum count.

    Optional cap bounds the common cell size; expected_cells (pairs) lets the
    caller demand coverage and get a named error for an empty cell.
    """
    cells = {}
    for rec in sorted(records, key=PatchRecord.sort_key):
        cells.setdefault((rec.hospital, rec.label), []).append(rec)
    if expected_cells is not None:
        for cell in expected_cells:
            if cell not in cells:
                raise ValueError(f"cell (hospital={cell[0]!r}, class={cell[1]}) has no patches")
    if not cells:
        raise ValueError("no records to balance")
    target = min(len(v) for v in cells.values())
    if cap is not None:
        target = min(target, cap)
    rng = np.random.default_rng(seed)
    out = []
    for key in sorted(cells):
        group = cells[key]
        idx = rng.choice(len(group), size=target, replace=False)
        out.extend(group[i] for i in sorted(idx))
    return out


def split_train_val_test(slides_by_hospital: dict, fractions=(0.45, 0.45, 0.10), seed=0) -> dict:
    """Assign each slide to train/val/test at the slide level, per hospital.

    Counts are floor(n * fraction); leftover slides go to train, then val,
    then test. Returns slide_id -> split.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative values summing to 1: {fractions}")
    rng = np.random.default_rng(seed)
    assignment = {}
    for hospital in sorted(slides_by_hospital):
        slides = sorted(slides_by_hospital[hospital])
        if len(slides) < 3:
            raise ValueError(f"hospital {hospital!r} has {len(slides)} slides; need >= 3")
        order = rng.permutation(len(slides))
        counts = [int(len(slides) * f) for f in fractions]
        leftover = len(slides) - sum(counts)
        for i in range(leftover):
            counts[i % 3] += 1
        names = ["train"] * counts[0] + ["val"] * counts[1] + ["test"] * counts[2]
        for idx, split in zip(order, names):
            assignment[slides[idx]] = split
    return assignment


def build_manifest(records, path) -> None:
    """JSON Lines manifest, one record per line, canonically sorted."""
    path = Path(path)
    lines = []
    for rec in sorted(records, key=PatchRecord.sort_key):
        d = asdict(rec)
        lines.append(json.dumps({k: d[k] for k in MANIFEST_FIELDS}))
    try:
        path.write_text("\n".join(lines) + ("\n" if lines else ""))
    except OSError as e:
        raise OSError(f"cannot write manifest {path}: {e}") from e


def load_manifest(path) -> list:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        records.append(PatchRecord(**{k: d[k] for k in MANIFEST_FIELDS}))
    return records


# ---------------------------------------------------------------------------
# corpus pipeline


def discover_slides(corpus_dir) -> list:
    """Find <corpus>/<hospital>/class<label>/<slide-id>.png inputs."""
    corpus_dir = Path(corpus_dir)
    slides = []
    for png in sorted(corpus_dir.glob("*/*/*.png")):
        class_dir = png.parent.name
        if not class_dir.startswith("class"):
            raise ValueError(f"unexpected class directory {class_dir!r} for {png}")
        slides.append(
            SlideImage(
                slide_id=png.stem,
                hospital=png.parent.parent.name,
                label=int(class_dir[len("class") :]),
                pixels=np.asarray(Image.open(png).convert("RGB")),
            )
        )
    if not slides:
        raise ValueError(f"no slides found under {corpus_dir}")
    return slides


def preprocess_corpus(
    corpus_dir,
    out_dir,
    patch_size: int = 64,
    max_background: float = 0.5,
    fractions=(0.45, 0.45, 0.10),
    seed: int = 0,
    cell_cap: int | None = 512,
    tissue_darker: bool = True,
) -> Path:
    """Full slide-to-manifest pipeline; returns the manifest path.

    Patches are written as PNGs under out_dir/patches; the manifest covers
    the balanced train split plus the untouched val/test splits.
    """
    out_dir = Path(out_dir)
    slides = discover_slides(corpus_dir)
    patch_root = out_dir / "patches"
    all_records = []
    slides_by_hospital = {}
    for slide in slides:
        slides_by_hospital.setdefault(slide.hospital, []).append(slide.slide_id)
        mask, _t, _deg = tissue_mask(slide.pixels, tissue_darker)
        mask = morphological_close(mask)
        records = extract_patches(slide, mask, patch_size, max_background=max_background)
        for rec in records:
            rel = Path("patches") / slide.hospital / f"{slide.slide_id}_r{rec.row}_c{rec.col}.png"
            rec.path = str(rel)
            dest = out_dir / rel
            dest.parent.mkdir(parents=True, exist_ok=True)
            r0, c0 = rec.row * patch_size, rec.col * patch_size
            tile = slide.pixels[r0 : r0 + patch_size, c0 : c0 + patch_size]
            Image.fromarray(tile).save(dest)
        all_records.extend(records)
    patch_root.mkdir(parents=True, exist_ok=True)

    assignment = split_train_val_test(slides_by_hospital, fractions, seed)
    for rec in all_records:
        rec.split = assignment[rec.slide_id]

    hospitals = sorted(slides_by_hospital)
    labels = sorted({s.label for s in slides})
    train = [r for r in all_records if r.split == "train"]
    expected = [(h, c) for h in hospitals for c in labels]
    train = balance_resample(train, seed=seed, expected_cells=expected, cap=cell_cap)
    rest = [r for r in all_records if r.split != "train"]

    manifest_path = out_dir / "manifest.jsonl"
    build_manifest(train + rest, manifest_path)
    return manifest_path


def load_patches(records, root) -> dict:
    """Decode patch PNGs into float32 arrays in [0, 1].

    Returns arrays keyed: x (n, 3, s, s), y, hospital, slide_id, split, in
    manifest (canonical) order.
    """
    root = Path(root)
    records = sorted(records, key=PatchRecord.sort_key)
    xs = np.stack(
        [np.asarray(Image.open(root / r.path).convert("RGB"), dtype=np.float32) for r in records]
    )
    return {
        "x": np.ascontiguousarray(xs.transpose(0, 3, 1, 2)) / np.float32(255.0),
        "y": np.array([r.label for r in records], dtype=np.int64),
        "hospital": np.array([r.hospital for r in records]),
        "slide_id": np.array([r.slide_id for r in records]),
        "split": np.array([r.split for r in records]),
    }
