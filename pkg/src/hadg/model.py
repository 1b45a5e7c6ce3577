"""The three-part network: feature extractor (psi), classifier (theta) and
metric head (phi), with seeded initialization and a binary checkpoint format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor, conv2d, flatten, matmul, maxpool2d, relu, reshape

MAGIC = b"HADG"
VERSION = 1
PARTITIONS = ("psi", "theta", "phi")


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file does not follow the binary format."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    conv_stages entries are (out_channels, kernel, pool). The metric head is
    a two-layer funnel (wider layer first), the desk-scale analog of a large
    (1024, 256) head.
    """

    input_shape: tuple = (3, 64, 64)
    conv_stages: tuple = ((8, 3, 2), (16, 3, 2))
    feature_dim: int = 64
    class_count: int = 3
    metric_widths: tuple = (32, 16)

    def __post_init__(self):
        dims = (*self.input_shape, self.feature_dim, self.class_count, *self.metric_widths)
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"all model dimensions must be positive: {self}")
        for stage in self.conv_stages:
            if len(stage) != 3 or any(int(v) <= 0 for v in stage):
                raise ValueError(f"bad conv stage {stage}; expected (channels, kernel, pool)")
        w0, w1 = self.metric_widths
        if w0 <= w1:
            raise ValueError(
                f"metric widths {self.metric_widths} must descend (wider layer first)"
            )

    def conv_output_shape(self) -> tuple:
        c, h, w = self.input_shape
        for out_c, k, pool in self.conv_stages:
            h, w = h - k + 1, w - k + 1
            if h <= 0 or w <= 0:
                raise ValueError(f"conv stages shrink input {self.input_shape} below 1x1")
            h, w = h // pool, w // pool
            c = out_c
        return c, h, w

    def flat_dim(self) -> int:
        c, h, w = self.conv_output_shape()
        return c * h * w

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "conv_stages": [list(s) for s in self.conv_stages],
            "feature_dim": self.feature_dim,
            "class_count": self.class_count,
            "metric_widths": list(self.metric_widths),
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            input_shape=tuple(d["input_shape"]),
            conv_stages=tuple(tuple(s) for s in d["conv_stages"]),
            feature_dim=int(d["feature_dim"]),
            class_count=int(d["class_count"]),
            metric_widths=tuple(d["metric_widths"]),
        )


@dataclass
class ParamSet:
    """Named parameter tensors partitioned by name prefix into psi/theta/phi."""

    tensors: dict
    config: ModelConfig | None = field(default=None, compare=False)

    def __post_init__(self):
        for name in self.tensors:
            if self.partition_of(name) not in PARTITIONS:
                raise ValueError(f"parameter {name!r} lies outside psi/theta/phi")

    @staticmethod
    def partition_of(name: str) -> str:
        return name.split(".", 1)[0]

    def subset(self, parts) -> dict:
        """Ordered name -> Tensor for the given partitions."""
        if isinstance(parts, str):
            parts = (parts,)
        return {n: t for n, t in self.tensors.items() if self.partition_of(n) in parts}

    def names(self) -> list:
        return list(self.tensors)

    def copy(self) -> "ParamSet":
        return ParamSet(
            {n: Tensor(t.data.copy(), requires_grad=True) for n, t in self.tensors.items()},
            config=self.config,
        )

    def equals(self, other: "ParamSet") -> bool:
        if set(self.tensors) != set(other.tensors):
            return False
        return all(np.array_equal(self.tensors[n].data, other.tensors[n].data) for n in self.tensors)


def init_params(config: ModelConfig, seed: int) -> ParamSet:
    """Seeded init: weights uniform in [-b, b] with b = sqrt(6 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}

    def weight(name, shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        tensors[name] = Tensor(
            rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True
        )

    def bias(name, width):
        tensors[name] = Tensor(np.zeros(width, dtype=np.float32), requires_grad=True)

    c_in = config.input_shape[0]
    for i, (out_c, k, _pool) in enumerate(config.conv_stages):
        weight(f"psi.conv{i}.w", (out_c, c_in, k, k), c_in * k * k)
        bias(f"psi.conv{i}.b", out_c)
        c_in = out_c
    flat = config.flat_dim()
    weight("psi.fc.w", (flat, config.feature_dim), flat)
    bias("psi.fc.b", config.feature_dim)
    weight("theta.out.w", (config.feature_dim, config.class_count), config.feature_dim)
    bias("theta.out.b", config.class_count)
    w0, w1 = config.metric_widths
    weight("phi.fc0.w", (config.feature_dim, w0), config.feature_dim)
    bias("phi.fc0.b", w0)
    weight("phi.fc1.w", (w0, w1), w0)
    bias("phi.fc1.b", w1)
    return ParamSet(tensors, config=config)


def forward_pass(params: ParamSet, batch, stage: str) -> Tensor:
    """Run the network to the requested stage: features | logits | metric."""
    if stage not in ("features", "logits", "metric"):
        raise ValueError(f"unknown stage {stage!r}")
    config = params.config
    if config is None:
        raise ValueError("ParamSet carries no ModelConfig; attach one before forward_pass")
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if x.data.ndim != 4 or x.data.shape[1:] != tuple(config.input_shape):
        raise ShapeError(
            f"forward_pass: batch shape {x.data.shape} does not match input {config.input_shape}"
        )
    t = params.tensors
    h = x
    for i, (_out_c, _k, pool) in enumerate(config.conv_stages):
        h = conv2d(h, t[f"psi.conv{i}.w"])
        h = h + reshape(t[f"psi.conv{i}.b"], (1, -1, 1, 1))
        h = relu(h)
        if pool > 1:
            h = maxpool2d(h, pool)
    h = flatten(h)
    feats = relu(matmul(h, t["psi.fc.w"]) + t["psi.fc.b"])
    if stage == "features":
        return feats
    if stage == "logits":
        return matmul(feats, t["theta.out.w"]) + t["theta.out.b"]
    return metric_head(params, feats)


def metric_head(params: ParamSet, feats: Tensor) -> Tensor:
    """Apply the two-layer metric head to already-computed features."""
    t = params.tensors
    m = relu(matmul(feats, t["phi.fc0.w"]) + t["phi.fc0.b"])
    return matmul(m, t["phi.fc1.w"]) + t["phi.fc1.b"]


def save_checkpoint(params: ParamSet, path) -> None:
    """Write the bit-exact little-endian checkpoint format."""
    parts = []
    parts.append(MAGIC)
    parts.append(struct.pack("<I", VERSION))
    names = sorted(params.tensors)
    parts.append(struct.pack("<I", len(names)))
    for name in names:
        tensor = params.tensors[name]
        encoded = name.encode("utf-8")
        tag = PARTITIONS.index(ParamSet.partition_of(name))
        arr = np.ascontiguousarray(tensor.data, dtype="<f4")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    try:
        with open(path, "wb") as f:
            f.write(b"".join(parts))
    except OSError as e:
        raise OSError(f"cannot write checkpoint {path}: {e}") from e


def load_checkpoint(path, config: ModelConfig | None = None) -> ParamSet:
    """Read a checkpoint; rejects bad magic, version, or truncated entries."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise OSError(f"cannot read checkpoint {path}: {e}") from e

    view = memoryview(blob)
    offset = 0

    def take(n, what):
        nonlocal offset
        if offset + n > len(view):
            raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
        chunk = view[offset : offset + n]
        offset += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointFormatError(f"bad magic in {path}; not a checkpoint file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    tensors = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"entry {i} name length"))
        name = bytes(take(name_len, f"entry {i} name")).decode("utf-8")
        tag, rank = struct.unpack("<BB", take(2, f"{name} header"))
        if tag >= len(PARTITIONS):
            raise CheckpointFormatError(f"entry {name!r} has unknown partition tag {tag}")
        if PARTITIONS[tag] != ParamSet.partition_of(name):
            raise CheckpointFormatError(
                f"entry {name!r} tagged {PARTITIONS[tag]} contradicts its name"
            )
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"{name} dims"))
        n_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = take(4 * n_values, f"{name} data")
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
        if name in tensors:
            raise CheckpointFormatError(f"duplicate entry {name!r}")
        tensors[name] = Tensor(arr, requires_grad=True)
    if offset != len(view):
        raise CheckpointFormatError(f"{len(view) - offset} trailing bytes after last entry")
    return ParamSet(tensors, config=config)
