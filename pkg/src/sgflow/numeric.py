"""Dense float64 tensors with a reverse-mode tape, plus Adam.

Ops are module-level functions. When a :class:`Tape` is active on the current
thread and any input requires a gradient, the op appends a record holding its
inputs, output and a closure mapping the output gradient to input gradients.
Outside a tape every op is a plain numpy computation.
"""

from __future__ import annotations

import hashlib
import json
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

FORMAT_VERSION = 1

_local = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an op."""


class TapeError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Records differentiable ops executed on this thread while active.

    Use as a context manager; one tape per training step.
    """

    def __init__(self, check_finite: bool = False):
        self.records: list[_Record] = []
        self.check_finite = check_finite
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev

    def gradient(self, loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
        if loss.data.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(f"{rec.op}: gradient shape {gi.shape} != input shape {t.shape}")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        out = {}
        for name, p in params.items():
            g = grads.get(id(p))
            out[name] = np.zeros_like(p.data) if g is None else g
            if self.check_finite and not np.all(np.isfinite(out[name])):
                raise NonFiniteError(f"non-finite gradient for {name}")
        return out


def active_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Gradients of a scalar ``loss`` for every tensor in ``params``.

    Parameters the loss does not reach get zero gradients.
    """
    tape = active_tape()
    if tape is None:
        raise TapeError("backward: no active tape")
    return tape.gradient(loss, params)


def _emit(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], bwd) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if tape is not None and tape.check_finite and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"{op}: non-finite output")
    if track:
        tape.records.append(_Record(tuple(inputs), out, bwd, op))
    return out


# ---------------------------------------------------------------- elementwise


def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    # row vector broadcast over the leading axes
    if b.ndim == 1 and a.ndim >= 1 and sb[0] == sa[-1]:
        return
    if a.ndim == 1 and b.ndim >= 1 and sa[0] == sb[-1]:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    return g.reshape(-1, shape[-1]).sum(axis=0) if len(shape) == 1 else g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _emit("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _emit("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise ValueError("log: non-positive input")
    return _emit("log", np.log(ad), (a,), lambda g: (g / ad,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _emit("clamp", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading axes of either operand are batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        if a.ndim == 2 and b.ndim > 2:
            ga = ga.sum(axis=tuple(range(b.ndim - 2)))
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = a.shape
    if axis is None:
        return _emit("sum", np.asarray(a.data.sum()), (a,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim
    return _emit("sum", a.data.sum(axis=ax), (a,),
                 lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", s, (a,), bwd)


def log_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _emit("log_softmax", out, (a,),
                 lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


# ---------------------------------------------------------------- structure


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != tensors[0].shape[:ax] + tensors[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {tensors[0].shape} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=ax)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def index(a: Tensor, key) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    shape = a.shape

    def bwd(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _emit("index", a.data[key], (a,), bwd)


def take_rows(a: Tensor, rows) -> Tensor:
    """Gather rows of a 2-D tensor by integer index (repeats allowed)."""
    rows = np.asarray(rows, dtype=np.int64)
    if a.ndim != 2:
        raise ShapeError(f"take_rows: expected 2-D input, got {a.shape}")
    shape = a.shape

    def bwd(g):
        out = np.zeros(shape)
        np.add.at(out, rows, g)
        return (out,)

    return _emit("take_rows", a.data[rows], (a,), bwd)


def segment_max(x: Tensor, segments, count: int) -> Tensor:
    """Per-segment elementwise max of the rows of ``x``.

    Gradient goes to the arg-max row of each (segment, column); ties go to
    the lowest row index.
    """
    seg = np.asarray(segments, dtype=np.int64)
    if x.ndim != 2 or seg.shape != (x.shape[0],):
        raise ShapeError(f"segment_max: shapes {x.shape} and {seg.shape} do not conform")
    if seg.size and (seg.min() < 0 or seg.max() >= count):
        raise ValueError(f"segment_max: segment ids outside [0, {count})")
    present = np.bincount(seg, minlength=count)
    missing = np.flatnonzero(present == 0)
    if missing.size:
        raise ValueError(f"segment_max: instances with no points: {missing.tolist()}")
    order = np.argsort(seg, kind="stable")
    xs = x.data[order]
    starts = np.concatenate([[0], np.cumsum(present)[:-1]])
    mx = np.maximum.reduceat(xs, starts, axis=0)
    seg_sorted = seg[order]
    hit = xs == mx[seg_sorted]
    pos = np.where(hit, np.arange(len(order))[:, None], len(order))
    first = np.minimum.reduceat(pos, starts, axis=0)
    argrow = order[first]  # (count, d) original row indices
    cols = np.broadcast_to(np.arange(x.shape[1]), argrow.shape)
    shape = x.shape

    def bwd(g):
        out = np.zeros(shape)
        np.add.at(out, (argrow, cols), g)
        return (out,)

    return _emit("segment_max", mx, (x,), bwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: dict, training: bool,
               momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Normalize each feature (last axis) over all leading axes.

    ``state`` holds ``running_mean``/``running_var`` arrays and is updated in
    place in training mode: ``new = momentum * old + (1 - momentum) * batch``.
    """
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"batch_norm: feature size {d} vs gamma {gamma.shape}, beta {beta.shape}")
    flat = x.data.reshape(-1, d)
    if training:
        mu = flat.mean(axis=0)
        var = flat.var(axis=0)
        state["running_mean"] = momentum * state["running_mean"] + (1 - momentum) * mu
        state["running_var"] = momentum * state["running_var"] + (1 - momentum) * var
    else:
        mu = state["running_mean"]
        var = state["running_var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (flat - mu) * inv
    out = (xhat * gamma.data + beta.data).reshape(x.shape)
    n = flat.shape[0]
    shape = x.shape

    def bwd(g):
        g2 = g.reshape(-1, d)
        dgamma = (g2 * xhat).sum(axis=0)
        dbeta = g2.sum(axis=0)
        dxhat = g2 * gamma.data
        if training:
            dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv
        return dx.reshape(shape), dgamma, dbeta

    return _emit("batch_norm", out, (x, gamma, beta), bwd)


# ---------------------------------------------------------------- parameters


def init_uniform(rng: np.random.Generator, fan_in: int, shape: Sequence[int]) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=tuple(shape))


@dataclass
class ModelParams:
    """Named trainable tensors plus non-trainable buffers and a config echo."""

    params: dict[str, Tensor] = field(default_factory=dict)
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def add_batch_norm(self, name: str, width: int) -> None:
        self.add(f"{name}.gamma", np.ones(width))
        self.add(f"{name}.beta", np.zeros(width))
        self.buffers[name] = {"running_mean": np.zeros(width), "running_var": np.ones(width)}

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "config": self.config,
            "params": {k: {"shape": list(v.shape), "data": v.data.ravel().tolist()}
                       for k, v in self.params.items()},
            "buffers": {k: {kk: {"shape": list(vv.shape), "data": vv.ravel().tolist()}
                            for kk, vv in v.items()}
                        for k, v in self.buffers.items()},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ModelParams":
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format_version {doc.get('format_version')!r}")
        mp = cls(config=doc.get("config", {}))
        for k, v in doc["params"].items():
            mp.add(k, _from_flat(k, v))
        for k, v in doc.get("buffers", {}).items():
            mp.buffers[k] = {kk: _from_flat(f"{k}.{kk}", vv) for kk, vv in v.items()}
        return mp

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def load(cls, path) -> "ModelParams":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _from_flat(name: str, entry: dict) -> np.ndarray:
    shape = tuple(entry["shape"])
    data = np.asarray(entry["data"], dtype=np.float64)
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise ValueError(f"{name}: data length {data.size} does not match shape {shape}")
    return data.reshape(shape)


def label_checksum(object_classes: Iterable[str], relation_classes: Iterable[str]) -> str:
    blob = json.dumps([list(object_classes), list(relation_classes)]).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if name in state.m and state.m[name].shape != p.shape:
            raise ShapeError(f"adam_step: moment for {name} has shape {state.m[name].shape}, parameter {p.shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state
