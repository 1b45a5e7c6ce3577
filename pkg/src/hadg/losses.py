"""The three training losses: hospital-nested cross-entropy, symmetrized-KL
hospital alignment over soft confusion matrices, and margin triplet loss,
plus the seeded triplet sampler.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ParamSet, forward_pass, metric_head
from .tensor import Tensor

PROB_FLOOR = 1e-12


@dataclass
class HospitalGroup:
    """One hospital's labeled instances inside a batch."""

    hospital: str
    x: np.ndarray  # (n, channels, rows, cols) float32
    y: np.ndarray  # (n,) integer labels

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float32)
        self.y = np.asarray(self.y, dtype=np.int64)
        if len(self.x) == 0:
            raise ValueError(f"hospital group {self.hospital!r} is empty")
        if len(self.x) != len(self.y):
            raise ValueError(f"group {self.hospital!r}: {len(self.x)} patches, {len(self.y)} labels")


@dataclass
class SoftConfusion:
    """Per-class mean of temperature-softened predictions for one hospital."""

    hospital: str
    matrix: Tensor  # (n_classes, n_classes)
    counts: np.ndarray  # instances per class used for each row

    def missing_classes(self) -> list:
        return [c for c, n in enumerate(self.counts) if n == 0]


@dataclass
class TripletBatch:
    """B (anchor, positive, negative) patch triples with their ids."""

    xa: np.ndarray
    xp: np.ndarray
    xn: np.ndarray
    class_a: np.ndarray
    class_n: np.ndarray
    hospital_a: np.ndarray
    hospital_p: np.ndarray

    def __post_init__(self):
        if len(self.xa) == 0:
            raise ValueError("triplet batch is empty")
        if not (len(self.xa) == len(self.xp) == len(self.xn)):
            raise ValueError("triplet batch sides have different lengths")
        if np.any(self.class_a == self.class_n):
            raise ValueError("negative shares the anchor class in some triple")

    def __len__(self):
        return len(self.xa)


def _validate_batch(batch, n_classes):
    if not batch:
        raise ValueError("batch has no hospital groups")
    for g in batch:
        if np.any(g.y < 0) or np.any(g.y >= n_classes):
            raise ValueError(f"group {g.hospital!r} has labels outside [0, {n_classes})")


def cross_entropy(params: ParamSet, batch) -> Tensor:
    """Mean over hospitals of the per-hospital mean of -log p(true class).

    Hospitals are weighted equally regardless of their group sizes.
    """
    n_classes = params.config.class_count
    _validate_batch(batch, n_classes)
    xs = np.concatenate([g.x for g in batch], axis=0)
    ys = np.concatenate([g.y for g in batch])
    n = len(ys)
    onehot = np.zeros((n, n_classes), dtype=np.float32)
    onehot[np.arange(n), ys] = 1.0
    weights = np.concatenate(
        [np.full(len(g.y), 1.0 / (len(batch) * len(g.y)), dtype=np.float32) for g in batch]
    )
    logits = forward_pass(params, xs, "logits")
    probs = T.softmax_with_temperature(logits, 1.0)
    picked = T.tsum(probs * Tensor(onehot), axis=1)
    logp = T.log(picked + Tensor(np.float32(PROB_FLOOR)))
    return T.tsum(logp * Tensor(weights)) * -1.0


def soft_confusion(params: ParamSet, group: HospitalGroup, tau: float) -> SoftConfusion:
    """Row c is the mean softened prediction over the group's class-c instances.

    Rows are floored at 1e-12 and renormalized. Classes with no instances get
    zero counts and are reported by missing_classes(); their rows are filler.
    """
    if tau <= 1.0:
        raise ValueError(f"soft confusion needs temperature > 1, got {tau}")
    n_classes = params.config.class_count
    _validate_batch([group], n_classes)
    counts = np.bincount(group.y, minlength=n_classes)
    sel = np.zeros((n_classes, len(group.y)), dtype=np.float32)
    for c in range(n_classes):
        if counts[c] > 0:
            sel[c, group.y == c] = 1.0 / counts[c]
    logits = forward_pass(params, group.x, "logits")
    probs = T.softmax_with_temperature(logits, tau)
    rows = T.matmul(Tensor(sel), probs)
    floored = T.relu(rows - np.float32(PROB_FLOOR)) + np.float32(PROB_FLOOR)
    normed = T.div(floored, T.tsum(floored, axis=1, keepdims=True))
    return SoftConfusion(group.hospital, normed, counts)


def _confusion_tensor(s):
    if isinstance(s, SoftConfusion):
        missing = s.missing_classes()
        if missing:
            raise ValueError(f"hospital {s.hospital!r} has no instances of classes {missing}")
        return s.matrix
    return s if isinstance(s, Tensor) else Tensor(s)


def hospital_alignment_pair(sa, sb) -> Tensor:
    """Mean over class rows of the symmetrized KL divergence.

    Computed as (0.5 / rows) * sum((a - b) * (log a - log b)), which equals
    0.5 * [KL(a||b) + KL(b||a)] row-averaged and is exactly symmetric in
    floating point.
    """
    a, b = _confusion_tensor(sa), _confusion_tensor(sb)
    if a.shape != b.shape:
        raise T.ShapeError(f"alignment pair: shapes {a.shape} vs {b.shape}")
    rows = a.shape[0]
    diff = a - b
    logdiff = T.log(a) - T.log(b)
    return T.tsum(diff * logdiff) * (0.5 / rows)


def hospital_alignment_total(meta_train, meta_test) -> Tensor:
    """Mean of hospital_alignment_pair over all meta-train x meta-test pairs."""
    if not meta_train or not meta_test:
        raise ValueError("alignment needs non-empty meta-train and meta-test sets")
    total = None
    for sa in meta_train:
        for sb in meta_test:
            pair = hospital_alignment_pair(sa, sb)
            total = pair if total is None else total + pair
    return total * (1.0 / (len(meta_train) * len(meta_test)))


def triplet_from_embeddings(ea: Tensor, ep: Tensor, en: Tensor, margin: float) -> Tensor:
    """(1/B) * sum max(||ea-ep||^2 - ||ea-en||^2 + margin, 0)."""
    if margin < 0:
        raise ValueError(f"margin must be non-negative, got {margin}")
    violation = T.squared_distance(ea, ep) - T.squared_distance(ea, en) + np.float32(margin)
    return T.tmean(T.relu(violation))


def triplet_loss(params: ParamSet, batch: TripletBatch, margin: float) -> Tensor:
    """Triplet loss on metric embeddings of the raw patch triples."""
    ea = forward_pass(params, batch.xa, "metric")
    ep = forward_pass(params, batch.xp, "metric")
    en = forward_pass(params, batch.xn, "metric")
    return triplet_from_embeddings(ea, ep, en, margin)


def triplet_indices(y: np.ndarray, hospitals: np.ndarray, count: int, seed) -> tuple:
    """Sample (anchor, positive, negative) index triples from a labeled pool.

    Anchors are uniform; positives share the anchor class and prefer a
    different hospital when one exists; negatives are any other class.
    Fully determined by the seed.
    """
    y = np.asarray(y)
    hospitals = np.asarray(hospitals)
    n = len(y)
    if count < 1:
        raise ValueError(f"triplet count must be >= 1, got {count}")
    if len(np.unique(y)) < 2:
        raise ValueError("triplet sampling needs at least 2 classes in the pool")
    rng = np.random.default_rng(seed)
    anchors, positives, negatives = [], [], []
    attempts = 0
    while len(anchors) < count:
        attempts += 1
        if attempts > 200 * count:
            raise ValueError("could not sample triplets: no class has two instances")
        a = int(rng.integers(n))
        same = np.flatnonzero((y == y[a]) & (np.arange(n) != a))
        if len(same) == 0:
            continue  # resample anchor: its class has a single instance
        cross = same[hospitals[same] != hospitals[a]]
        pool = cross if len(cross) else same
        p = int(rng.choice(pool))
        other = np.flatnonzero(y != y[a])
        ng = int(rng.choice(other))
        anchors.append(a)
        positives.append(p)
        negatives.append(ng)
    return np.array(anchors), np.array(positives), np.array(negatives)


def sample_triplets(x: np.ndarray, y: np.ndarray, hospitals: np.ndarray, count: int, seed) -> TripletBatch:
    """Assemble a TripletBatch from a pooled labeled patch array."""
    ia, ip, ing = triplet_indices(y, hospitals, count, seed)
    hospitals = np.asarray(hospitals)
    y = np.asarray(y)
    return TripletBatch(
        xa=x[ia],
        xp=x[ip],
        xn=x[ing],
        class_a=y[ia],
        class_n=y[ing],
        hospital_a=hospitals[ia],
        hospital_p=hospitals[ip],
    )
