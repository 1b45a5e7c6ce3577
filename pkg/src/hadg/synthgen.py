"""Deterministic multi-hospital synthetic slide generator.

Class determines geometry (sparse blobs, dense blobs, stripes) drawn on a
bright background; hospital determines appearance through a color-mixing
DomainTransform. Geometry never depends on the hospital, so cross-hospital
shift is purely photometric, with the last hospital carrying the strongest
shift by default.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

BACKGROUND = np.array([232.0, 228.0, 235.0], dtype=np.float32)
TISSUE = np.array([118.0, 64.0, 138.0], dtype=np.float32)
PATTERN = np.array([196.0, 128.0, 168.0], dtype=np.float32)


@dataclass
class DomainTransform:
    """Per-hospital appearance shift: 3x3 color mixing, brightness, noise."""

    mixing: tuple  # 3 rows of 3 entries in [0, 1.5]
    brightness: float = 0.0
    noise: float = 0.0

    def __post_init__(self):
        m = np.asarray(self.mixing, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"mixing matrix must be 3x3, got {m.shape}")
        if m.min() < 0.0 or m.max() > 1.5:
            raise ValueError("mixing entries must lie in [0, 1.5]")
        self.mixing = tuple(tuple(float(v) for v in row) for row in m)

    def matrix(self) -> np.ndarray:
        return np.asarray(self.mixing, dtype=np.float32)

    def to_dict(self) -> dict:
        return {"mixing": [list(r) for r in self.mixing], "brightness": self.brightness,
                "noise": self.noise}

    @staticmethod
    def from_dict(d: dict) -> "DomainTransform":
        return DomainTransform(tuple(tuple(r) for r in d["mixing"]), d["brightness"], d["noise"])


IDENTITY = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))

_INTERNAL_TRANSFORMS = (
    DomainTransform(IDENTITY, brightness=0.0, noise=3.0),
    DomainTransform(
        ((0.0, 0.0, 1.0), (0.0, 1.0, 0.0), (1.0, 0.0, 0.0)), brightness=6.0, noise=4.0
    ),
    DomainTransform(
        ((1.0, 0.0, 0.0), (0.0, 0.0, 1.0), (0.0, 1.0, 0.0)), brightness=-8.0, noise=4.0
    ),
    DomainTransform(
        ((0.90, 0.05, 0.05), (0.05, 0.85, 0.05), (0.05, 0.05, 1.00)), brightness=10.0, noise=5.0
    ),
)

STRONG_SHIFT = DomainTransform(
    ((0.15, 0.80, 0.05), (0.80, 0.15, 0.05), (0.05, 0.10, 0.85)), brightness=-15.0, noise=6.0
)


def default_transforms(hospitals: int) -> tuple:
    """Internal hospitals cycle mild transforms; the last one shifts hardest."""
    internal = [
        _INTERNAL_TRANSFORMS[i % len(_INTERNAL_TRANSFORMS)] for i in range(hospitals - 1)
    ]
    return tuple(internal) + (STRONG_SHIFT,)


@dataclass
class SynthConfig:
    hospitals: int = 4
    classes: int = 3
    slides_per_cell: int = 12
    size: int = 256
    seed: int = 0
    patch_analog: int = 64  # the tile size this corpus is meant to be cut into
    transforms: tuple = field(default=None)

    def __post_init__(self):
        if self.hospitals < 3:
            raise ValueError(f"need at least 3 hospitals, got {self.hospitals}")
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if self.slides_per_cell < 1:
            raise ValueError("slides_per_cell must be positive")
        if self.size < 4 * self.patch_analog:
            raise ValueError(
                f"slide size {self.size} must be at least 4x the patch analog "
                f"{self.patch_analog} so slide-level aggregation is exercised"
            )
        if self.transforms is None:
            self.transforms = default_transforms(self.hospitals)
        else:
            self.transforms = tuple(
                t if isinstance(t, DomainTransform) else DomainTransform.from_dict(t)
                for t in self.transforms
            )
        if len(self.transforms) != self.hospitals:
            raise ValueError(
                f"{len(self.transforms)} transforms for {self.hospitals} hospitals"
            )

    def hospital_names(self) -> list:
        return [f"H{i}" for i in range(self.hospitals)]

    def to_dict(self) -> dict:
        return {
            "hospitals": self.hospitals,
            "classes": self.classes,
            "slides_per_cell": self.slides_per_cell,
            "size": self.size,
            "seed": self.seed,
            "patch_analog": self.patch_analog,
            "transforms": [t.to_dict() for t in self.transforms],
        }


def _disc(canvas, cy, cx, radius):
    size = canvas.shape[0]
    rr = np.arange(size)
    dist2 = (rr[:, None] - cy) ** 2 + (rr[None, :] - cx) ** 2
    canvas |= dist2 <= radius * radius


def render_geometry(config: SynthConfig, label: int, slide_index: int) -> np.ndarray:
    """Pre-transform RGB slide; depends on (seed, class, slide index) only."""
    if not (0 <= label < config.classes):
        raise ValueError(f"label {label} outside [0, {config.classes})")
    s = config.size
    rng = np.random.default_rng([config.seed, 1, label, slide_index])
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float32)

    # tissue region: wobbled ellipse covering most of the slide
    cy, cx = s / 2 + rng.uniform(-0.04, 0.04, 2) * s
    ry, rx = rng.uniform(0.40, 0.47, 2) * s
    theta = np.arctan2(yy - cy, xx - cx)
    rho = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    wobble = 1.0 + 0.08 * np.sin(3 * theta + rng.uniform(0, 2 * np.pi)) + 0.05 * np.sin(
        5 * theta + rng.uniform(0, 2 * np.pi)
    )
    tissue = rho <= wobble

    kind = label % 3
    scale = 1 + label // 3  # extra classes re-use patterns at higher density
    pattern = np.zeros((s, s), dtype=bool)
    if kind in (0, 1):
        if kind == 0:
            count = int(rng.integers(4, 8)) * scale
            radii = rng.integers(9, 15, size=count)
        else:
            count = int(rng.integers(14, 25)) * scale  # at least 2x the sparse count
            radii = rng.integers(7, 12, size=count)
        lo, hi = int(0.15 * s), int(0.85 * s)
        centers = rng.integers(lo, hi, size=(count, 2))
        for (cy2, cx2), radius in zip(centers, radii):
            _disc(pattern, cy2, cx2, int(radius))
    else:
        angle = rng.uniform(0, np.pi)
        thickness = rng.integers(6, 10)
        period = rng.integers(18, 27)
        proj = xx * np.cos(angle) + yy * np.sin(angle)
        pattern = np.mod(proj, period) < thickness

    img = np.empty((s, s, 3), dtype=np.float32)
    img[:] = BACKGROUND
    img[tissue] = TISSUE
    img[tissue & pattern] = PATTERN
    return img


def apply_transform(img: np.ndarray, transform: DomainTransform, rng) -> np.ndarray:
    mixed = img @ transform.matrix().T + np.float32(transform.brightness)
    if transform.noise > 0:
        mixed = mixed + rng.normal(0.0, transform.noise, size=img.shape)
    return np.clip(np.rint(mixed), 0, 255).astype(np.uint8)


def generate_slide(config: SynthConfig, label: int, hospital_index: int, slide_index: int) -> np.ndarray:
    """Deterministic slide pixels for (class, hospital, slide seed)."""
    if not (0 <= hospital_index < config.hospitals):
        raise ValueError(f"hospital index {hospital_index} outside [0, {config.hospitals})")
    geometry = render_geometry(config, label, slide_index)
    rng = np.random.default_rng([config.seed, 2, hospital_index, label, slide_index])
    return apply_transform(geometry, config.transforms[hospital_index], rng)


def generate_corpus(config: SynthConfig, out_dir) -> Path:
    """Write the slide tree <out>/<hospital>/class<label>/<slide-id>.png
    plus corpus.json echoing the full config."""
    out_dir = Path(out_dir)
    for h, hospital in enumerate(config.hospital_names()):
        for label in range(config.classes):
            d = out_dir / hospital / f"class{label}"
            d.mkdir(parents=True, exist_ok=True)
            for i in range(config.slides_per_cell):
                pixels = generate_slide(config, label, h, i)
                Image.fromarray(pixels).save(d / f"{hospital}_class{label}_s{i:03d}.png")
    descriptor = out_dir / "corpus.json"
    descriptor.write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    return descriptor
