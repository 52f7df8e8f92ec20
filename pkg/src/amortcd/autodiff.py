"""Dense tensors with a reverse-mode tape, a LAMB optimizer and checkpoint I/O.

The primitive set is deliberately small: it is exactly what the inference
network needs, and every primitive carries a hand-written backward rule that
is checked against finite differences in the test suite.

Broadcasting is restricted to leading batch axes: a binary op accepts two
operands when the shape of one is a suffix of the shape of the other.
"""

from __future__ import annotations

import contextlib
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

DTYPE = np.float64

_taping = True
_dtype = DTYPE


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _taping
    prev = _taping
    _taping = False
    try:
        yield
    finally:
        _taping = prev


def is_taping() -> bool:
    return _taping


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Storage dtype for tensors created inside the block (float64 by default)."""
    global _dtype
    prev = _dtype
    _dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _dtype = prev


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple["Tensor", ...]
    # maps the output cotangent to one cotangent per input (None = no flow)
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_dtype)
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None
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
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
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
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, out: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{op}: non-finite output")
    t = Tensor(out)
    if _taping and any(x.requires_grad for x in inputs):
        t.requires_grad = True
        t.node = TapeNode(op, inputs, backward)
    return t


def _check_suffix(op: str, a: tuple, b: tuple) -> None:
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


# ----------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _finish("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_suffix("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _finish("mul", ad * bd, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    Leading axes must agree, or ``b`` may be a plain matrix shared across
    all leading axes of ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    shared = b.ndim == 2 and a.ndim > 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    bd = b.data
    if shared:
        # one GEMM over all leading axes
        a2 = np.ascontiguousarray(a.data).reshape(-1, a.shape[-1])
        out = (a2 @ bd).reshape(a.shape[:-1] + (bd.shape[-1],))

        def bw(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _finish("matmul", out, (a, b), bw)

    ad = a.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return _finish("matmul", ad @ bd, (a, b), bw)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort(axes))
    return _finish("transpose", np.ascontiguousarray(np.transpose(a.data, axes)), (a,),
                   lambda g: (np.ascontiguousarray(np.transpose(g, inv)),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from exc
    return _finish("reshape", out, (a,), lambda g: (g.reshape(src),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _finish("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _finish("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise NonFiniteError("log: non-positive input")
    return _finish("log", np.log(x), (a,), lambda g: (g / x,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    return _finish("exp", y, (a,), lambda g: (g * y,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _finish("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def _axis(op: str, a: Tensor, axis: int) -> int:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"{op}: axis {axis} invalid for shape {a.shape}")
    return axis % a.ndim


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    axis = _axis("softmax", a, axis)
    y = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=axis, keepdims=True)

    def bw(g):
        gy = g * y
        gy -= y * gy.sum(axis=axis, keepdims=True)
        return (gy,)

    return _finish("softmax", y, (a,), bw)


def layer_norm(a, gain, offset, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a learned gain and offset.

    Feature means are taken in float64 whatever the storage dtype.
    """
    a, gain, offset = as_tensor(a), as_tensor(gain), as_tensor(offset)
    k = a.shape[-1]
    if gain.shape != (k,) or offset.shape != (k,):
        raise ShapeError(
            f"layer_norm: gain/offset {gain.shape}/{offset.shape} vs features {k}")
    x = np.ascontiguousarray(a.data).reshape(-1, k)
    avg = np.full(k, 1.0 / k)
    mu = (x @ avg.astype(x.dtype)) if x.dtype == np.float64 else x.astype(np.float64) @ avg
    xc = x - mu.astype(x.dtype)[:, None]
    var = (xc * xc).astype(np.float64) @ avg
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)[:, None]
    xhat = xc * inv
    gd = gain.data
    shape = a.shape

    def bw(g):
        g = g.reshape(-1, k)
        gx = gy = go = None
        if a.requires_grad:
            gh = g * gd
            m1 = (gh @ avg.astype(gh.dtype))[:, None]
            m2 = ((gh * xhat) @ avg.astype(gh.dtype))[:, None]
            gx = (inv * (gh - m1 - xhat * m2)).reshape(shape)
        if gain.requires_grad:
            gy = (g * xhat).sum(axis=0)
        if offset.requires_grad:
            go = g.sum(axis=0)
        return gx, gy, go

    return _finish("layer_norm", (xhat * gd + offset.data).reshape(shape), (a, gain, offset), bw)


def max_pool(a, axis: int) -> Tensor:
    """Maximum over ``axis``; tied maxima share the cotangent equally."""
    a = as_tensor(a)
    axis = _axis("max_pool", a, axis)
    y = a.data.max(axis=axis)
    hit = a.data == np.expand_dims(y, axis)
    share = (hit / hit.sum(axis=axis, keepdims=True)).astype(y.dtype)
    return _finish("max_pool", y, (a,),
                   lambda g: (np.expand_dims(g, axis) * share,))


def dropout(a, mask: np.ndarray | None) -> Tensor:
    """Multiply by a pre-sampled mask of zeros and ``1/(1-rate)``."""
    if mask is None:
        return as_tensor(a)
    return mul(a, Tensor(mask))


def reduce_sum(a, axis: int | tuple[int, ...] | None = None) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    y = a.data.sum(axis=axis)
    if axis is None:
        return _finish("sum", np.asarray(y), (a,), lambda g: (np.broadcast_to(g, src).copy(),))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % a.ndim for ax in axes)
    return _finish("sum", y, (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, axes), src).copy(),))


def mean(a, axis: int | tuple[int, ...] | None = None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(reduce_sum(a, axis), 1.0 / count)


def dropout_mask(rng: np.random.Generator, shape: Sequence[int], rate: float) -> np.ndarray | None:
    if rate <= 0.0:
        return None
    keep = rng.random(tuple(shape)) >= rate
    return keep / (1.0 - rate)


# ----------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for x in t.node.inputs:
                if x.requires_grad and id(x) not in seen:
                    stack.append((x, False))
    return order


def backward(loss: Tensor, params: Mapping[str, Tensor] | Iterable[Tensor]) -> dict:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Returns a dict keyed like ``params`` (names for a mapping, positions for a
    sequence). Parameters that do not influence ``loss`` get zeros.
    """
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    named = dict(params) if isinstance(params, Mapping) else dict(enumerate(params))
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    if loss.requires_grad:
        for t in reversed(_topo_order(loss)):
            g = grads.get(id(t))
            if g is None or t.node is None:
                continue
            for x, gx in zip(t.node.inputs, t.node.backward(g)):
                if gx is None or not x.requires_grad:
                    continue
                if id(x) in grads:
                    grads[id(x)] = grads[id(x)] + gx
                else:
                    grads[id(x)] = gx
    return {k: np.array(grads.get(id(p), np.zeros_like(p.data)), dtype=DTYPE).reshape(p.shape)
            for k, p in named.items()}


# ----------------------------------------------------------------------------
# parameters and optimizer


@dataclass
class ParamStore:
    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, p in self.params.items():
            out.add(k, p.data.copy())
            out.m[k] = self.m[k].copy()
            out.v[k] = self.v[k].copy()
        return out


def lamb_update(store: ParamStore, grads: Mapping[str, np.ndarray], step: int, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-6,
                weight_decay: float = 0.0) -> list[str]:
    """One LAMB step applied in place. Returns names skipped for non-finite gradients."""
    if step < 1:
        raise ValueError("step must be >= 1")
    skipped = []
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, p in store.params.items():
        dt = p.data.dtype
        g = np.asarray(grads[name], dtype=dt)
        if g.shape != p.shape:
            raise ShapeError(f"lamb_update: gradient {g.shape} vs parameter {p.shape} for {name}")
        if not np.all(np.isfinite(g)):
            skipped.append(name)
            continue
        m = store.m[name] = (beta1 * store.m[name] + (1.0 - beta1) * g).astype(dt, copy=False)
        v = store.v[name] = (beta2 * store.v[name] + (1.0 - beta2) * g * g).astype(dt, copy=False)
        r = (m / c1) / (np.sqrt(v / c2) + eps) + weight_decay * p.data
        p_norm = float(np.linalg.norm(p.data))
        r_norm = float(np.linalg.norm(r))
        ratio = p_norm / r_norm if p_norm > 0 and r_norm > 0 else 1.0
        p.data = (p.data - lr * ratio * r).astype(dt, copy=False)
    return skipped


# ----------------------------------------------------------------------------
# checkpoints: JSON manifest + flat little-endian float64 blob

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | os.PathLike, store: ParamStore, meta: dict | None = None,
                    with_slots: bool = True) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (row-major blob)."""
    path = os.fspath(path)
    entries = []
    chunks = []
    offset = 0

    def put(key, arr):
        nonlocal offset
        buf = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"path": key, "shape": list(arr.shape), "dtype": "float64",
                        "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)

    for name, p in store.params.items():
        put(name, p.data)
    if with_slots:
        for name in store.params:
            put(f"slots/m/{name}", store.m[name])
            put(f"slots/v/{name}", store.v[name])
    blob = os.path.basename(path) + ".bin"
    manifest = {"version": CHECKPOINT_VERSION, "byte_order": "little", "blob": blob,
                "tensors": entries, "meta": meta or {}}
    with open(path + ".bin", "wb") as fh:
        fh.write(b"".join(chunks))
    with open(path + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path: str | os.PathLike) -> tuple[ParamStore, dict]:
    path = os.fspath(path)
    if path.endswith(".json"):
        path = path[:-5]
    with open(path + ".json") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
    blob_path = os.path.join(os.path.dirname(path), manifest["blob"])
    with open(blob_path, "rb") as fh:
        blob = fh.read()
    store = ParamStore()
    slots = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).astype(DTYPE)
        if e["path"].startswith("slots/"):
            slots[e["path"]] = arr
        else:
            store.add(e["path"], arr)
    for name in store.params:
        if f"slots/m/{name}" in slots:
            dt = store.params[name].data.dtype
            store.m[name] = slots[f"slots/m/{name}"].astype(dt)
            store.v[name] = slots[f"slots/v/{name}"].astype(dt)
    return store, manifest["meta"]
