"""Dense float32 tensors with reverse-mode differentiation, plus gradient
clipping and the two optimizers used by the training regimes.

Every differentiable primitive builds a node in an implicit tape: the output
tensor keeps references to its parents and a closure that propagates the
output gradient to them. `backward` walks the tape in reverse topological
order. Arrays are float32 throughout; gradient accumulation for the global
norm is done in float64 where it matters.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform to an op's rule."""


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (used for evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_f32(data):
    arr = np.asarray(data, dtype=np.float32)
    return arr


class Tensor:
    """A float32 array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = _as_f32(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0])

    # operator sugar; scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __neg__(self):
        return mul(self, _wrap(-1.0))

    def __sub__(self, other):
        return add(self, mul(_wrap(other), _wrap(-1.0)))

    def __rsub__(self, other):
        return add(_wrap(other), mul(self, _wrap(-1.0)))

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))


def _wrap(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float32))


def _make(data, parents, backward):
    """Build an op output; records the tape node only when grad is armed."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.astype(np.float32, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a, b, opname):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeError(
            f"{opname}: shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "multiply")
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "divide")
    out_data = a.data / b.data

    def backward(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul: shapes {a.data.shape} and {b.data.shape} do not conform"
        )
    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0.0)

    def backward(g):
        # derivative at exactly 0 is 0: strict inequality
        _accum(a, g * (a.data > 0.0))

    return _make(out_data, (a,), backward)


def log(a: Tensor) -> Tensor:
    out_data = np.log(a.data)

    def backward(g):
        _accum(a, g / a.data)

    return _make(out_data, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    out_data = a.data.reshape(shape)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), backward)


def flatten(a: Tensor) -> Tensor:
    """Collapse all axes after the first (batch) axis."""
    return reshape(a, (a.data.shape[0], -1))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).astype(np.float32))
            return
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        _accum(a, np.broadcast_to(gg, a.data.shape).astype(np.float32))

    return _make(out_data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), _wrap(1.0 / n))


def squared_distance(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise squared L2 distance between (N, D) tensors -> (N,)."""
    if a.data.shape != b.data.shape or a.data.ndim != 2:
        raise ShapeError(
            f"squared_distance: shapes {a.data.shape} and {b.data.shape} must be equal 2-D"
        )
    diff = a.data - b.data
    out_data = np.sum(diff * diff, axis=1)

    def backward(g):
        scaled = (2.0 * g)[:, None] * diff
        _accum(a, scaled)
        _accum(b, -scaled)

    return _make(out_data, (a, b), backward)


def softmax_with_temperature(logits: Tensor, tau: float) -> Tensor:
    """Row softmax of logits / tau along the last axis, max-subtracted."""
    if tau <= 0:
        raise ValueError(f"softmax temperature must be positive, got {tau}")
    z = logits.data / np.float32(tau)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    # saturated rows can round an entry to exactly 0 in float32; keep the
    # output strictly positive
    s = np.maximum(s, np.float32(1e-30))
    s = s / s.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * s).sum(axis=-1, keepdims=True)
        _accum(logits, (s * (g - inner)) / np.float32(tau))

    return _make(s, (logits,), backward)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int):
    b, c, h, w = x.shape
    oh = (h - kh) // stride + 1
    ow = (w - kw) // stride + 1
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (b, c, kh, kw, oh, ow), (s0, s1, s2, s3, s2 * stride, s3 * stride)
    )
    cols = np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3))
    return cols.reshape(b * oh * ow, c * kh * kw), oh, ow


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Valid-padding 2-D convolution; x is (B, C, H, W), w is (O, C, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.data.shape[1] != w.data.shape[1]:
        raise ShapeError(
            f"conv2d: input {x.data.shape} and kernel {w.data.shape} do not conform"
        )
    b, c, h, wdt = x.data.shape
    o, _, kh, kw = w.data.shape
    if kh > h or kw > wdt:
        raise ShapeError(
            f"conv2d: kernel {w.data.shape} larger than input {x.data.shape}"
        )
    cols, oh, ow = _im2col(x.data, kh, kw, stride)
    wmat = w.data.reshape(o, -1)
    out = cols @ wmat.T
    out_data = out.reshape(b, oh, ow, o).transpose(0, 3, 1, 2)

    def backward(g):
        gcols = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * oh * ow, o)
        if w.requires_grad:
            _accum(w, (gcols.T @ cols).reshape(w.data.shape))
        if x.requires_grad:
            dcols = (gcols @ wmat).reshape(b, oh, ow, c, kh, kw)
            dx = np.zeros_like(x.data)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            _accum(x, dx)

    return _make(out_data, (x, w), backward)


def maxpool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping 2-D max pool (stride = size); trailing rows/cols dropped."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: expected 4-D input, got {x.data.shape}")
    b, c, h, w = x.data.shape
    oh, ow = h // size, w // size
    if oh == 0 or ow == 0:
        raise ShapeError(f"maxpool2d: window {size} larger than input {x.data.shape}")
    crop = x.data[:, :, : oh * size, : ow * size]
    win = crop.reshape(b, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(b, c, oh, ow, size * size)
    idx = flat.argmax(axis=-1)  # first max wins on ties
    out_data = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dx = np.zeros_like(x.data)
        bi, ci, oi, oj = np.ogrid[:b, :c, :oh, :ow]
        ri = oi * size + idx // size
        cj = oj * size + idx % size
        dx[bi, ci, ri, cj] = g
        _accum(x, dx)

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# backward driver


def backward(loss: Tensor, targets) -> list[np.ndarray]:
    """Reverse-accumulate d loss / d target for each target tensor.

    Targets that did not participate in the computation get zero gradients.
    The tape's transient gradients are cleared afterwards, so several
    backward calls may reuse one forward graph.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)

    grads = []
    for t in targets:
        if t.grad is None:
            grads.append(np.zeros_like(t.data))
        else:
            grads.append(t.grad)
    for node in topo:
        node.grad = None
    for t in targets:
        t.grad = None
    return grads


# ---------------------------------------------------------------------------
# clipping and optimizers


def global_norm(grads) -> float:
    """L2 norm over the concatenation of all gradient arrays (float64 accumulation)."""
    total = 0.0
    for g in grads:
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def clip_by_global_norm(grads, threshold: float):
    """Scale all gradients by threshold/norm when the global norm exceeds it.

    A small guard band (1e-6 relative) keeps the op exactly idempotent in
    float32: a freshly clipped set re-enters within the band and is returned
    unchanged.
    """
    if threshold <= 0:
        raise ValueError(f"clip threshold must be positive, got {threshold}")
    grads = list(grads)
    norm = global_norm(grads)
    if norm > threshold * (1.0 + 1e-6):
        scale = np.float32(threshold / norm)
        return [g * scale for g in grads]
    return [g.copy() for g in grads]


class SGD:
    """Plain non-adaptive gradient descent: p <- p - lr * g."""

    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, params: dict, grads: dict):
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"optimizer_step: gradient {g.shape} misaligned with "
                    f"parameter {p.data.shape} for {name!r}"
                )
            p.data -= np.float32(self.lr) * g


class Adam:
    """Bias-corrected adaptive-moment optimizer."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, g in grads.items():
            p = params[name]
            if g.shape != p.data.shape:
                raise ShapeError(
                    f"optimizer_step: gradient {g.shape} misaligned with "
                    f"parameter {p.data.shape} for {name!r}"
                )
            m = self.m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                self.m[name] = m
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= np.float32(b1)
            m += np.float32(1.0 - b1) * g
            v *= np.float32(b2)
            v += np.float32(1.0 - b2) * (g * g)
            mhat = m / np.float32(bc1)
            vhat = v / np.float32(bc2)
            p.data -= np.float32(self.lr) * mhat / (np.sqrt(vhat) + np.float32(self.eps))
