"""Minimal reverse-mode differentiation over numpy arrays.

Operations record a node on the active :class:`Tape` only when at least one
input requires a gradient.  Each node lists the buffers its backward rule
reads; the tape registers those buffers once under the caller-assigned origin
label, which is what the memory accountant reads back.

Parameters (tensors created with ``is_param=True``) are never counted as
retained buffers: their storage is accounted as parameter bytes instead.
"""

from __future__ import annotations

import builtins
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

NORM_EPS = 1e-12

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextmanager
def paused() -> Iterator[None]:
    """Run the enclosed block without recording anything."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


@contextmanager
def origin(label: str) -> Iterator[None]:
    """Attribute buffers recorded in the block to ``label`` on the active tape."""
    tape = active_tape()
    if tape is None:
        yield
        return
    with tape.origin(label):
        yield


class Tensor:
    """Dense float64 array with a gradient-participation flag."""

    __slots__ = ("data", "requires_grad", "node", "name", "is_param")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 is_param: bool = False):
        self.data = np.require(data, dtype=np.float64, requirements="C")
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.name = name
        self.is_param = is_param

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def node_id(self) -> int | None:
        return None if self.node is None else self.node.id

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def parameter(data, name: str | None = None, trainable: bool = True) -> Tensor:
    return Tensor(data, requires_grad=trainable, name=name, is_param=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


@dataclass(eq=False)
class Node:
    id: int
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    forward: Callable[..., np.ndarray]
    saved: tuple[np.ndarray, ...]
    origin: str


@dataclass(eq=False)
class Tape:
    """Ordered record of differentiable operations and their retained buffers."""

    nodes: list[Node] = field(default_factory=list)
    finalized: bool = False
    _origins: list[str] = field(default_factory=lambda: ["unlabeled"])
    _retained: dict[int, tuple[str, int]] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        if self.finalized:
            raise ContractError("tape already finalized")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted")
        stack.pop()
        self.finalized = True

    @contextmanager
    def origin(self, label: str) -> Iterator[None]:
        self._origins.append(label)
        try:
            yield
        finally:
            self._origins.pop()

    @property
    def current_origin(self) -> str:
        return self._origins[-1]

    def _add(self, op, inputs, out, backward, forward, saved) -> None:
        arrays = []
        for item in saved:
            if isinstance(item, Tensor):
                if item.is_param:
                    continue
                item = item.data
            arrays.append(item)
            key = id(item)
            if key not in self._retained:
                self._retained[key] = (self.current_origin, int(item.nbytes))
        node = Node(len(self.nodes), op, tuple(inputs), out, backward, forward,
                    tuple(arrays), self.current_origin)
        out.node = node
        self.nodes.append(node)

    @property
    def retained_bytes_by_origin(self) -> dict[str, int]:
        totals: dict[str, int] = {}
        for origin, nbytes in self._retained.values():
            totals[origin] = totals.get(origin, 0) + nbytes
        return totals

    @property
    def retained_bytes(self) -> int:
        return builtins.sum(nbytes for _, nbytes in self._retained.values())

    def nodes_by_origin(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for node in self.nodes:
            counts[node.origin] = counts.get(node.origin, 0) + 1
        return counts


def _record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward,
            forward, saved: Iterable = ()) -> Tensor:
    tape = active_tape()
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=track)
    if track:
        tape._add(op, inputs, out, backward, forward, saved)
    return out


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(np.asarray(x, dtype=np.float64))


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


# --------------------------------------------------------------------------
# linear algebra and arithmetic

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch axes of ``a`` are allowed when ``b`` is 2-D."""
    a, b = _tensor(a), _tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch axes differ {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                k, n = a.shape[-1], g.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    saved = []
    if a.requires_grad:
        saved.append(b)
    if b.requires_grad:
        saved.append(a)
    return _record("matmul", (a, b), out, backward, np.matmul, saved)


def add(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_pair(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _record("add", (a, b), out, backward, np.add)


def sub(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_pair(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _record("sub", (a, b), out, backward, np.subtract)


def mul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_pair(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        ga = _reduce_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _reduce_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    saved = []
    if a.requires_grad:
        saved.append(b)
    if b.requires_grad:
        saved.append(a)
    return _record("mul", (a, b), out, backward, np.multiply, saved)


def div(a, b, eps: float = NORM_EPS) -> Tensor:
    """Elementwise ``a / b`` that yields 0 wherever ``|b| < eps``."""
    a, b = _tensor(a), _tensor(b)
    _check_pair(a, b, "div")

    def forward(x, y):
        ok = np.abs(y) >= eps
        return np.where(ok, x / np.where(ok, y, 1.0), 0.0)

    out = forward(a.data, b.data)

    def backward(g):
        ok = np.abs(b.data) >= eps
        safe = np.where(ok, b.data, 1.0)
        ga = _reduce_to(np.where(ok, g / safe, 0.0), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _reduce_to(np.where(ok, -g * out / safe, 0.0), b.shape)
        return ga, gb

    return _record("div", (a, b), out, backward, forward, (b, out))


def scale(x: Tensor, c: float) -> Tensor:
    x = _tensor(x)
    c = float(c)
    return _record("scale", (x,), x.data * c, lambda g: (g * c,), lambda v: v * c)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x``."""
    x, bias = _tensor(x), _tensor(bias)
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match {x.shape}")
    out = x.data + bias.data

    def backward(g):
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if bias.requires_grad else None
        return g, gb

    return _record("add_bias", (x, bias), out, backward, np.add)


def relu(x: Tensor) -> Tensor:
    x = _tensor(x)
    out = np.maximum(x.data, 0.0)
    return _record("relu", (x,), out, lambda g: (g * (out > 0),),
                   lambda v: np.maximum(v, 0.0), (out,))


def sigmoid(x: Tensor) -> Tensor:
    x = _tensor(x)

    def forward(v):
        return 0.5 * (np.tanh(0.5 * v) + 1.0)

    out = forward(x.data)
    return _record("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),), forward, (out,))


def tanh(x: Tensor) -> Tensor:
    x = _tensor(x)
    out = np.tanh(x.data)
    return _record("tanh", (x,), out, lambda g: (g * (1.0 - out * out),), np.tanh, (out,))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}
_BINARY = {"add": add, "mul": mul}


def elementwise(kind: str, *inputs, factor: float | None = None) -> Tensor:
    """Dispatch to a pointwise operation by name."""
    if kind in _UNARY:
        (x,) = inputs
        return _UNARY[kind](x)
    if kind in _BINARY:
        a, b = inputs
        return _BINARY[kind](a, b)
    if kind == "scale":
        (x,) = inputs
        if factor is None:
            raise ContractError("scale needs a factor")
        return scale(x, factor)
    raise ContractError(f"unknown elementwise kind {kind!r}")


# --------------------------------------------------------------------------
# reductions and shape manipulation

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = _tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (x,), np.asarray(out), backward,
                   lambda v: np.asarray(np.sum(v, axis=axis, keepdims=keepdims)))


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _tensor(x)
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def amax(x: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximiser."""
    x = _tensor(x)
    idx = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _record("amax", (x,), out, backward, lambda v: np.max(v, axis=axis), (x,))


def reshape(x: Tensor, shape) -> Tensor:
    x = _tensor(x)
    old = x.shape
    return _record("reshape", (x,), x.data.reshape(shape),
                   lambda g: (g.reshape(old),), lambda v: v.reshape(shape))


def transpose(x: Tensor, axes) -> Tensor:
    x = _tensor(x)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", (x,), np.transpose(x.data, axes),
                   lambda g: (np.transpose(g, inv),), lambda v: np.transpose(v, axes))


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def expand(x: Tensor, shape) -> Tensor:
    """Broadcast ``x`` to ``shape`` by prepending axes or stretching unit axes."""
    x = _tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise DimensionError(f"expand: cannot broadcast {x.shape} to {shape}") from exc
    lead = len(shape) - x.ndim
    stretched = tuple(i + lead for i, n in enumerate(x.shape) if n == 1 and shape[i + lead] != 1)

    def backward(g):
        g = g.sum(axis=tuple(range(lead)) + stretched, keepdims=True)
        return (g.reshape(x.shape),)

    return _record("expand", (x,), out, backward, lambda v: np.broadcast_to(v, shape).copy())


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_tensor(t) for t in tensors]
    if len({t.shape for t in tensors}) != 1:
        raise DimensionError("stack: shapes differ")
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[i] for i in range(len(tensors)))

    return _record("stack", tensors, out, backward, lambda *vs: np.stack(vs, axis=axis))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", tensors, out, backward,
                   lambda *vs: np.concatenate(vs, axis=axis))


def getitem(x: Tensor, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    x = _tensor(x)
    out = x.data[key]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return _record("getitem", (x,), np.array(out), backward, lambda v: np.array(v[key]))


# --------------------------------------------------------------------------
# normalisations

def l2_rows(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale every vector along the last axis to unit l2 norm (zeros stay zero)."""
    x = _tensor(x)

    def forward(v):
        n = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
        ok = n >= eps
        return np.where(ok, v / np.where(ok, n, 1.0), 0.0)

    out = forward(x.data)
    norms = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))

    def backward(g):
        ok = norms >= eps
        proj = np.sum(g * out, axis=-1, keepdims=True)
        return (np.where(ok, (g - out * proj) / np.where(ok, norms, 1.0), 0.0),)

    return _record("l2_rows", (x,), out, backward, forward, (out, norms))


def l1_vector(x: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Scale every vector along the last axis to unit l1 norm (zeros stay zero)."""
    x = _tensor(x)

    def forward(v):
        s = np.sum(np.abs(v), axis=-1, keepdims=True)
        ok = s >= eps
        return np.where(ok, v / np.where(ok, s, 1.0), 0.0)

    out = forward(x.data)
    sums = np.sum(np.abs(x.data), axis=-1, keepdims=True)

    def backward(g):
        ok = sums >= eps
        proj = np.sum(g * out, axis=-1, keepdims=True)
        gx = (g - np.sign(x.data) * proj) / np.where(ok, sums, 1.0)
        return (np.where(ok, gx, 0.0),)

    return _record("l1_vector", (x,), out, backward, forward, (x, out, sums))


def normalize(kind: str, x: Tensor, eps: float = NORM_EPS) -> Tensor:
    if kind == "l2_rows":
        return l2_rows(x, eps)
    if kind == "l1_vector":
        return l1_vector(x, eps)
    raise ContractError(f"unknown normalization {kind!r}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _tensor(x)

    def forward(v):
        e = np.exp(v - np.max(v, axis=axis, keepdims=True))
        return e / np.sum(e, axis=axis, keepdims=True)

    out = forward(x.data)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _record("softmax", (x,), out, backward, forward, (out,))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _tensor(x), _tensor(gamma), _tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError("layer_norm: affine parameters must match the last axis")

    def forward(v, gm, bt):
        mu = v.mean(axis=-1, keepdims=True)
        var = ((v - mu) ** 2).mean(axis=-1, keepdims=True)
        return (v - mu) / np.sqrt(var + eps) * gm + bt

    mu = x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(((x.data - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = ggm = gbt = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if gamma.requires_grad:
            ggm = (g * xhat).reshape(-1, n).sum(axis=0)
        if beta.requires_grad:
            gbt = g.reshape(-1, n).sum(axis=0)
        return gx, ggm, gbt

    saved = [gamma] if x.requires_grad else []
    saved += [xhat, inv] if (x.requires_grad or gamma.requires_grad) else []
    return _record("layer_norm", (x, gamma, beta), out, backward, forward, saved)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    logits = _tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy expects (B, C) logits and (B,) labels")
    rows = np.arange(labels.size)

    def forward(v):
        z = v - v.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return np.asarray(-logp[rows, labels].mean())

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    out = forward(logits.data)

    def backward(g):
        gl = probs.copy()
        gl[rows, labels] -= 1.0
        return (gl * (g / labels.size),)

    return _record("cross_entropy", (logits,), out, backward, forward, (probs,))


# --------------------------------------------------------------------------
# spatial operations

def _windows(x: np.ndarray, k: int, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # B, C, Ho, Wo, k, k


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 1) -> Tensor:
    """2-D cross-correlation of ``x`` (B, C, H, W) with square kernels ``w`` (O, C, k, k)."""
    x, w, b = _tensor(x), _tensor(w), _tensor(b)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]

    def forward(xv, wv, bv):
        cols = _windows(xv, k, stride, padding)
        return np.einsum("bchwij,ocij->bohw", cols, wv, optimize=True) + bv[None, :, None, None]

    cols = np.ascontiguousarray(_windows(x.data, k, stride, padding))
    out = np.einsum("bchwij,ocij->bohw", cols, w.data, optimize=True) + b.data[None, :, None, None]
    ho, wo = out.shape[2], out.shape[3]

    def backward(g):
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.einsum("bohw,bchwij->ocij", g, cols, optimize=True)
        if b.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            bsz, c, h, wd = x.shape
            gpad = np.zeros((bsz, c, h + 2 * padding, wd + 2 * padding))
            for i in range(k):
                for j in range(k):
                    contrib = np.einsum("bohw,oc->bchw", g, w.data[:, :, i, j], optimize=True)
                    gpad[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
            gx = gpad[:, :, padding:padding + h, padding:padding + wd]
        return gx, gw, gb

    saved = [w] if x.requires_grad else []
    if w.requires_grad:
        saved.append(cols)
    return _record("conv2d", (x, w, b), out, backward, forward, saved)


def _bins(size: int, target: int) -> list[tuple[int, int]]:
    return [(i * size // target, -((-(i + 1) * size) // target)) for i in range(target)]


def pooling(kind: str, x: Tensor, target: tuple[int, int]) -> Tensor:
    """Pool the two trailing spatial axes down to ``target`` with adaptive bins.

    ``x`` is (C, H, W) or (B, C, H, W).  ``max`` and ``avg`` use the same
    bin partition as ``adaptive_avg``; they differ only in the reduction.
    """
    x = _tensor(x)
    if kind not in ("max", "avg", "adaptive_avg"):
        raise ContractError(f"unknown pooling kind {kind!r}")
    if x.ndim not in (3, 4):
        raise DimensionError(f"pooling expects (C,H,W) or (B,C,H,W), got {x.shape}")
    th, tw = target
    h, w = x.shape[-2:]
    if th > h or tw > w or th < 1 or tw < 1:
        raise DimensionError(f"pooling cannot map {h}x{w} to {th}x{tw}")
    hb, wb = _bins(h, th), _bins(w, tw)
    use_max = kind == "max"

    def forward(v):
        res = np.empty(v.shape[:-2] + (th, tw))
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                cell = v[..., h0:h1, w0:w1]
                res[..., i, j] = cell.max(axis=(-2, -1)) if use_max else cell.mean(axis=(-2, -1))
        return res

    out = forward(x.data)

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                gij = g[..., i, j][..., None, None]
                if use_max:
                    cell = x.data[..., h0:h1, w0:w1]
                    flat = cell.reshape(cell.shape[:-2] + (-1,))
                    hit = np.zeros_like(flat)
                    np.put_along_axis(hit, flat.argmax(axis=-1)[..., None], 1.0, axis=-1)
                    gx[..., h0:h1, w0:w1] += hit.reshape(cell.shape) * gij
                else:
                    gx[..., h0:h1, w0:w1] += gij / ((h1 - h0) * (w1 - w0))
        return (gx,)

    return _record(f"pool_{kind}", (x,), out, backward, forward, (x,) if use_max else ())


# --------------------------------------------------------------------------
# differentiation

def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Return gradients of a scalar ``loss`` for every reachable trainable leaf.

    Intermediate tensors listed in ``wrt`` are reported as well.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    if not tape.finalized:
        raise ContractError("backward needs a finalized tape")
    if loss.node is None or loss.node.id >= len(tape.nodes) or tape.nodes[loss.node.id] is not loss.node:
        raise ContractError("loss was not recorded on this tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    wanted = {id(t): t for t in wrt}
    kept: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes[: loss.node.id + 1]):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        if id(node.output) in wanted:
            kept[node.output] = g
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            grads[key] = grads[key] + gi if key in grads else gi
            if t.node is None:
                leaves[key] = t
    out = {t: grads[k] for k, t in leaves.items()}
    out.update(kept)
    return out


def replay(tape: Tape, feeds: dict[Tensor, np.ndarray] | None = None) -> list[np.ndarray]:
    """Re-run every recorded node, optionally substituting leaf values."""
    values = {id(t): np.asarray(v, dtype=np.float64) for t, v in (feeds or {}).items()}
    outputs = []
    for node in tape.nodes:
        args = [values.get(id(t), t.data) for t in node.inputs]
        out = node.forward(*args)
        values[id(node.output)] = out
        outputs.append(out)
    return outputs


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 3e-5,
               eps: float = 1e-5) -> float:
    """Largest relative disagreement between backprop and central differences.

    ``f`` must rebuild the scalar loss from the current contents of
    ``params`` each time it is called.  The numeric derivative uses the
    fourth-order central stencil, and the error for one entry is
    ``|analytic - numeric| / (|numeric| + eps)``.
    """
    with Tape() as tape:
        loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite")
    grads = backward(tape, loss)
    worst = 0.0
    for p in params:
        analytic = grads.get(p, np.zeros_like(p.data)).reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            with paused():
                for dx in (2 * step, step, -step, -2 * step):
                    flat[i] = orig + dx
                    vals.append(f().item())
            flat[i] = orig
            if not np.isfinite(vals).all():
                raise NumericError(f"non-finite loss while perturbing {p.name or 'parameter'}")
            num = (-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * step)
            worst = max(worst, abs(analytic[i] - num) / (abs(num) + eps))
    return float(worst)
