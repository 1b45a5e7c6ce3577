"""Episodic hospital-agnostic training, the pooled baseline, and the
leave-one-hospital-out outer loop.

Each masf episode splits the internal hospitals into meta-train and a
single meta-test hospital, takes a clipped plain-descent inner step on the
meta-train cross entropy, evaluates the alignment and triplet losses at the
stepped parameters, and applies the first-order combined gradient with Adam.
The metric head trains on its own Adam step from the triplet loss alone.
The baseline regime pools all internal hospitals and trains cross entropy
with the same hyperparameters. Checkpoint selection is by best internal
validation slide accuracy, probed on a fixed cadence.
"""

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluate import FoldReport, predict_slides, slide_accuracy
from .losses import (
    HospitalGroup,
    cross_entropy,
    hospital_alignment_total,
    sample_triplets,
    soft_confusion,
    triplet_loss,
)
from .model import ModelConfig, ParamSet, init_params, save_checkpoint
from .tensor import Adam, Tensor, backward, clip_by_global_norm, global_norm

REGIMES = ("masf", "baseline")

# rng stream tags so episode draws never collide with the meta split draw
_BATCH_STREAM = 3
_TRIPLET_STREAM = 4


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters shared by both regimes."""

    alpha_inner: float = 1e-5
    eta: float = 1e-5
    gamma: float = 1e-5
    beta1: float = 1.0
    beta2: float = 0.005
    tau: float = 2.0
    margin: float = 10.0
    clip_threshold: float = 2.0
    batch_per_class: int = 8
    max_iterations: int = 1000
    eval_every: int = 50
    seed: int = 0
    regime: str = "masf"

    def __post_init__(self):
        for name in ("alpha_inner", "eta", "gamma", "beta1", "beta2", "clip_threshold"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.tau <= 1.0:
            raise ValueError(f"tau must exceed 1, got {self.tau}")
        if self.margin < 0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")
        if self.batch_per_class < 1:
            raise ValueError(f"batch_per_class must be >= 1, got {self.batch_per_class}")
        if self.max_iterations < 0:
            raise ValueError(f"max_iterations must be >= 0, got {self.max_iterations}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")

    def to_dict(self) -> dict:
        return {
            "alpha_inner": self.alpha_inner,
            "eta": self.eta,
            "gamma": self.gamma,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "tau": self.tau,
            "margin": self.margin,
            "clip_threshold": self.clip_threshold,
            "batch_per_class": self.batch_per_class,
            "max_iterations": self.max_iterations,
            "eval_every": self.eval_every,
            "seed": self.seed,
            "regime": self.regime,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        defaults = TrainConfig()
        unknown = set(d) - set(defaults.to_dict())
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return TrainConfig(**{**defaults.to_dict(), **d})


@dataclass(frozen=True)
class FoldPlan:
    """One leave-one-hospital-out fold: the held-out site and the rest."""

    held_out: str
    internal: tuple
    splits: dict = field(default_factory=dict)  # hospital -> split -> slide ids

    def __post_init__(self):
        if not self.internal:
            raise ValueError("fold plan needs at least one internal hospital")
        if self.held_out in self.internal:
            raise ValueError(f"held-out hospital {self.held_out!r} appears in internal set")


def make_fold_plan(records, held_out: str) -> FoldPlan:
    hospitals = sorted({r.hospital for r in records})
    if held_out not in hospitals:
        raise ValueError(f"held-out hospital {held_out!r} not present in manifest")
    splits: dict = {}
    for r in records:
        splits.setdefault(r.hospital, {}).setdefault(r.split, set()).add(r.slide_id)
    splits = {
        h: {s: tuple(sorted(ids)) for s, ids in by_split.items()} for h, by_split in splits.items()
    }
    internal = tuple(h for h in hospitals if h != held_out)
    return FoldPlan(held_out, internal, splits)


@dataclass(frozen=True)
class IterationLog:
    iteration: int
    fold: str
    l_ce: float
    l_align: float
    l_triplet: float
    l_meta: float
    pre_clip_grad_norm: float
    seed: int

    def __post_init__(self):
        for name in ("l_ce", "l_align", "l_triplet", "l_meta"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name}={v} must be finite and non-negative")
        if not math.isfinite(self.pre_clip_grad_norm):
            raise ValueError(f"pre_clip_grad_norm={self.pre_clip_grad_norm} must be finite")

    def to_json(self) -> str:
        return json.dumps(
            {
                "iteration": self.iteration,
                "fold": self.fold,
                "l_ce": self.l_ce,
                "l_align": self.l_align,
                "l_triplet": self.l_triplet,
                "l_meta": self.l_meta,
                "pre_clip_grad_norm": self.pre_clip_grad_norm,
                "seed": self.seed,
            }
        )


def split_meta(internal, seed: int, iteration: int) -> tuple:
    """Disjoint covering (meta-train, meta-test) split with |meta-test| = 1."""
    internal = tuple(internal)
    if len(internal) < 2:
        raise ValueError(f"meta split needs >= 2 internal hospitals, got {len(internal)}")
    rng = np.random.default_rng([seed, iteration])
    pick = int(rng.integers(len(internal)))
    meta_test = (internal[pick],)
    meta_train = tuple(h for h in internal if h != internal[pick])
    return meta_train, meta_test


@dataclass
class InnerStep:
    """Result of one clipped plain-descent step on the meta-train CE."""

    prime: ParamSet  # psi'/theta' copies; phi shared with the live params
    l_ce: float
    grads: dict  # unclipped CE gradients for psi/theta, by name
    pre_clip_norm: float


def inner_update(params: ParamSet, batch, alpha_inner: float, clip_threshold: float) -> InnerStep:
    """Clipped plain-descent step on L_ce; the live params stay untouched."""
    loss = cross_entropy(params, batch)
    pt = params.subset(("psi", "theta"))
    names = list(pt)
    grads = backward(loss, [pt[n] for n in names])
    norm = global_norm(grads)
    clipped = clip_by_global_norm(grads, clip_threshold)
    step = np.float32(alpha_inner)
    prime_tensors = {}
    for name, tensor in params.tensors.items():
        if name in pt:
            i = names.index(name)
            prime_tensors[name] = Tensor(tensor.data - step * clipped[i], requires_grad=True)
        else:
            prime_tensors[name] = tensor
    prime = ParamSet(prime_tensors, config=params.config)
    return InnerStep(prime, float(loss.data), dict(zip(names, grads)), norm)


@dataclass
class MetaLoss:
    """Weighted episode loss with its two addends kept for logging/backward."""

    total: Tensor
    align: Tensor
    triplet: Tensor


def meta_loss(
    prime: ParamSet,
    meta_train_groups,
    meta_test_groups,
    triplets,
    beta1: float,
    beta2: float,
    tau: float,
    margin: float,
) -> MetaLoss:
    """beta1 * L_align + beta2 * L_triplet, all evaluated at the prime params."""
    train_conf = [soft_confusion(prime, g, tau) for g in meta_train_groups]
    test_conf = [soft_confusion(prime, g, tau) for g in meta_test_groups]
    align = hospital_alignment_total(train_conf, test_conf)
    trip = triplet_loss(prime, triplets, margin)
    total = align * np.float32(beta1) + trip * np.float32(beta2)
    return MetaLoss(total, align, trip)


def meta_update(params: ParamSet, grads_ce: dict, grads_meta: dict, optimizer) -> None:
    """Apply the first-order combined gradient to the live psi/theta."""
    pt = params.subset(("psi", "theta"))
    unknown = set(grads_ce) | set(grads_meta)
    if not unknown <= set(pt):
        raise ValueError(f"meta_update gradients outside psi/theta: {sorted(unknown - set(pt))}")
    combined = {n: grads_ce[n] + grads_meta.get(n, np.float32(0.0)) for n in grads_ce}
    optimizer.step(pt, combined)


def metric_update(params: ParamSet, grads_phi: dict, optimizer) -> None:
    """Adaptive step on phi only."""
    phi = params.subset("phi")
    if not set(grads_phi) <= set(phi):
        raise ValueError(f"metric_update gradients outside phi: {sorted(set(grads_phi) - set(phi))}")
    optimizer.step(phi, grads_phi)


def subset_patches(data: dict, mask: np.ndarray) -> dict:
    return {k: v[mask] for k, v in data.items()}


class EpisodeSampler:
    """Seeded class-complete batch draws from the internal train split."""

    def __init__(self, data: dict, internal, n_classes: int, per_class: int):
        self.data = data
        self.internal = tuple(internal)
        self.n_classes = n_classes
        self.per_class = per_class
        train = data["split"] == "train"
        self.pools = {}
        for h in self.internal:
            for c in range(n_classes):
                pool = np.flatnonzero(train & (data["hospital"] == h) & (data["y"] == c))
                if pool.size == 0:
                    raise ValueError(f"hospital {h!r} train split lacks class {c}")
                self.pools[h, c] = pool
        self.train_slide_ids = set(data["slide_id"][train][np.isin(data["hospital"][train], self.internal)])

    def batch_indices(self, hospital: str, rng) -> np.ndarray:
        picks = []
        for c in range(self.n_classes):
            pool = self.pools[hospital, c]
            picks.append(rng.choice(pool, size=self.per_class, replace=pool.size < self.per_class))
        return np.concatenate(picks)

    def group(self, hospital: str, idx: np.ndarray) -> HospitalGroup:
        return HospitalGroup(hospital, self.data["x"][idx], self.data["y"][idx])


@dataclass
class TrainResult:
    params: ParamSet
    logs: list
    best_val_accuracy: float | None
    best_iteration: int


def _audit_no_leakage(sampler: EpisodeSampler, data: dict, held_out: str) -> None:
    held_ids = set(data["slide_id"][data["hospital"] == held_out])
    leaked = sampler.train_slide_ids & held_ids
    if leaked:
        raise RuntimeError(f"held-out slides reachable from training pools: {sorted(leaked)}")


def _model_config_for(data: dict, model_config) -> ModelConfig:
    if model_config is not None:
        return model_config
    return ModelConfig(input_shape=tuple(data["x"].shape[1:]))


def _validation_subset(data: dict, internal) -> dict:
    mask = (data["split"] == "val") & np.isin(data["hospital"], list(internal))
    return subset_patches(data, mask)


class _Selector:
    """Tracks the best internal-validation checkpoint on the eval cadence."""

    def __init__(self, params: ParamSet, val_data: dict):
        self.best = params.copy()
        self.best_acc = None
        self.best_iter = -1
        self.val_data = val_data

    def probe(self, params: ParamSet, iteration: int) -> None:
        if self.val_data["x"].shape[0] == 0:
            self.best = params.copy()
            self.best_iter = iteration
            return
        acc = slide_accuracy(predict_slides(params, self.val_data))
        if self.best_acc is None or acc > self.best_acc:
            self.best = params.copy()
            self.best_acc = acc
            self.best_iter = iteration


def _write_logs(logs, log_path) -> None:
    if log_path is None:
        return
    log_path = Path(log_path)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", encoding="utf-8") as f:
        for entry in logs:
            f.write(entry.to_json() + "\n")


def train_masf(
    plan: FoldPlan, data: dict, config: TrainConfig, model_config=None, log_path=None
) -> TrainResult:
    """Algorithm-1 episodic loop; returns the best-validation checkpoint."""
    model_config = _model_config_for(data, model_config)
    params = init_params(model_config, config.seed)
    sampler = EpisodeSampler(data, plan.internal, model_config.class_count, config.batch_per_class)
    _audit_no_leakage(sampler, data, plan.held_out)
    selector = _Selector(params, _validation_subset(data, plan.internal))
    meta_opt = Adam(config.eta)
    metric_opt = Adam(config.gamma)
    pt_names = list(params.subset(("psi", "theta")))
    phi_names = list(params.subset("phi"))
    logs = []
    for it in range(config.max_iterations):
        meta_train, meta_test = split_meta(plan.internal, config.seed, it)
        rng = np.random.default_rng([config.seed, _BATCH_STREAM, it])
        batches = {h: sampler.batch_indices(h, rng) for h in plan.internal}
        train_groups = [sampler.group(h, batches[h]) for h in meta_train]
        test_groups = [sampler.group(h, batches[h]) for h in meta_test]

        step = inner_update(params, train_groups, config.alpha_inner, config.clip_threshold)

        union = np.concatenate([batches[h] for h in plan.internal])
        triplets = sample_triplets(
            data["x"][union],
            data["y"][union],
            data["hospital"][union],
            count=config.batch_per_class * model_config.class_count,
            seed=[config.seed, _TRIPLET_STREAM, it],
        )
        ml = meta_loss(
            step.prime,
            train_groups,
            test_groups,
            triplets,
            config.beta1,
            config.beta2,
            config.tau,
            config.margin,
        )
        g_meta = backward(ml.total, [step.prime.tensors[n] for n in pt_names])
        g_phi = backward(ml.triplet, [step.prime.tensors[n] for n in phi_names])
        meta_update(params, step.grads, dict(zip(pt_names, g_meta)), meta_opt)
        metric_update(params, dict(zip(phi_names, g_phi)), metric_opt)

        logs.append(
            IterationLog(
                it,
                plan.held_out,
                step.l_ce,
                float(ml.align.data),
                float(ml.triplet.data),
                float(ml.total.data),
                step.pre_clip_norm,
                config.seed,
            )
        )
        if (it + 1) % config.eval_every == 0 or it + 1 == config.max_iterations:
            selector.probe(params, it)
    _write_logs(logs, log_path)
    return TrainResult(selector.best, logs, selector.best_acc, selector.best_iter)


def train_baseline(
    plan: FoldPlan, data: dict, config: TrainConfig, model_config=None, log_path=None
) -> TrainResult:
    """Pooled cross-entropy training with the same hyperparameters."""
    model_config = _model_config_for(data, model_config)
    params = init_params(model_config, config.seed)
    sampler = EpisodeSampler(data, plan.internal, model_config.class_count, config.batch_per_class)
    _audit_no_leakage(sampler, data, plan.held_out)
    selector = _Selector(params, _validation_subset(data, plan.internal))
    opt = Adam(config.eta)
    pt = params.subset(("psi", "theta"))
    names = list(pt)
    logs = []
    for it in range(config.max_iterations):
        rng = np.random.default_rng([config.seed, _BATCH_STREAM, it])
        union = np.concatenate([sampler.batch_indices(h, rng) for h in plan.internal])
        pooled = [HospitalGroup("pooled", data["x"][union], data["y"][union])]
        loss = cross_entropy(params, pooled)
        grads = backward(loss, [pt[n] for n in names])
        opt.step(pt, dict(zip(names, grads)))
        logs.append(
            IterationLog(
                it, plan.held_out, float(loss.data), 0.0, 0.0, 0.0, global_norm(grads), config.seed
            )
        )
        if (it + 1) % config.eval_every == 0 or it + 1 == config.max_iterations:
            selector.probe(params, it)
    _write_logs(logs, log_path)
    return TrainResult(selector.best, logs, selector.best_acc, selector.best_iter)


def train_fold(
    plan: FoldPlan, data: dict, config: TrainConfig, model_config=None, log_path=None
) -> TrainResult:
    run = train_masf if config.regime == "masf" else train_baseline
    return run(plan, data, config, model_config=model_config, log_path=log_path)


def _holdout_subset(data: dict, held_out: str, holdout_split: str) -> dict:
    mask = data["hospital"] == held_out
    if holdout_split == "test":
        mask &= data["split"] == "test"
    elif holdout_split != "all":
        raise ValueError(f"holdout_split must be 'all' or 'test', got {holdout_split!r}")
    return subset_patches(data, mask)


def run_fold(
    records,
    data: dict,
    held_out: str,
    config: TrainConfig,
    model_config=None,
    run_root=None,
    holdout_split: str = "all",
) -> FoldReport:
    """Train one fold and score its held-out hospital at slide level."""
    plan = make_fold_plan(records, held_out)
    log_path = None
    fold_dir = None
    if run_root is not None:
        fold_dir = Path(run_root) / held_out / config.regime
        fold_dir.mkdir(parents=True, exist_ok=True)
        log_path = fold_dir / "metrics.jsonl"
    result = train_fold(plan, data, config, model_config=model_config, log_path=log_path)
    if fold_dir is not None:
        save_checkpoint(result.params, fold_dir / "best.ckpt")
    preds = predict_slides(result.params, _holdout_subset(data, held_out, holdout_split))
    return FoldReport(held_out, config.regime, len(preds), slide_accuracy(preds))


def leave_one_hospital_out(
    records,
    data: dict,
    config: TrainConfig,
    model_config=None,
    run_root=None,
    holdout_split: str = "all",
    jobs: int = 1,
) -> list:
    """One fold per hospital; returns FoldReports in hospital order."""
    hospitals = sorted({r.hospital for r in records})
    if len(hospitals) < 3:
        raise ValueError(f"leave-one-hospital-out needs >= 3 hospitals, got {len(hospitals)}")

    def one(held_out):
        return run_fold(
            records,
            data,
            held_out,
            config,
            model_config=model_config,
            run_root=run_root,
            holdout_split=holdout_split,
        )

    if jobs <= 1:
        return [one(h) for h in hospitals]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, hospitals))
