"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every :class:`Tensor` gets a monotonically increasing id at creation, so the
inputs of an operation always carry smaller ids than its output.  Sorting the
reachable tensors by id therefore yields a topological order without any
explicit tape.

Operations only record a graph node when at least one input is tracked
(``requires_grad`` leaf or output of a tracked op), and backward closures skip
gradients for inputs that do not need one.  Frozen model weights thus cost
nothing on the backward pass.

Shapes must agree exactly.  The only implicit broadcasting is the boolean
mask of :func:`mask_fill`; everything else goes through :func:`expand`.
"""

from __future__ import annotations

import contextlib
import contextvars
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_dtype: contextvars.ContextVar = contextvars.ContextVar("rlkv_dtype", default=np.float32)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, kind: str, *shapes, detail: str = ""):
        shp = ", ".join(str(tuple(s)) for s in shapes)
        msg = f"{kind}: incompatible shapes {shp}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.kind = kind
        self.shapes = shapes


def get_dtype():
    return _dtype.get()


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype new tensors are created with.

    Used by gradient-check oracles that need float64 evaluation.
    """
    token = _dtype.set(np.dtype(dtype).type)
    try:
        yield
    finally:
        _dtype.reset(token)


class Node:
    __slots__ = ("kind", "inputs", "backward")

    def __init__(self, kind: str, inputs: tuple, backward: Callable):
        self.kind = kind
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """Dense array plus optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "id", "_node", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=get_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self._node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def kind(self) -> str:
        return self._node.kind if self._node is not None else "leaf"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, kind={self.kind}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(_as_tensor(other, self), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return scale(tsum(self), 1.0 / self.size)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad


def _make(kind: str, out: np.ndarray, inputs: tuple, backward: Callable) -> Tensor:
    res = Tensor(out)
    if any(_tracked(t) for t in inputs):
        res.requires_grad = True
        res._node = Node(kind, inputs, backward)
    return res


def _needs(inputs) -> tuple:
    return tuple(t.requires_grad for t in inputs)


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(kind, a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b), lambda g, n: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b), lambda g, n: (g, -g if n[1] else None))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g, n):
        return (g * bd if n[0] else None, g * ad if n[1] else None)

    return _make("mul", ad * bd, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _make("scale", a.data * c, (a,), lambda g, n: (g * c,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g, n: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _make("log", np.log(ad), (a,), lambda g, n: (g / ad,))


def tabs(a: Tensor) -> Tensor:
    """Absolute value; subgradient at 0 is 0."""
    sg = np.sign(a.data)
    return _make("abs", np.abs(a.data), (a,), lambda g, n: (g * sg,))


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    x = a.data
    dt = x.dtype.type
    c, k = dt(np.sqrt(2.0 / np.pi)), dt(0.044715)
    x2 = x * x
    th = np.tanh(c * x * (dt(1.0) + k * x2))
    out = dt(0.5) * x * (dt(1.0) + th)

    def bw(g, n):
        dinner = c * (dt(1.0) + dt(3.0) * k * x2)
        return (g * (dt(0.5) * (dt(1.0) + th) + dt(0.5) * x * (dt(1.0) - th * th) * dinner),)

    return _make("gelu", out, (a,), bw)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    _same_shape("minimum", a, b)
    pick_a = a.data <= b.data

    def bw(g, n):
        return (np.where(pick_a, g, 0) if n[0] else None,
                np.where(pick_a, 0, g) if n[1] else None)

    return _make("minimum", np.where(pick_a, a.data, b.data), (a, b), bw)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    out = np.clip(a.data, lo, hi).astype(a.data.dtype, copy=False)
    return _make("clip", out, (a,), lambda g, n: (np.where(inside, g, 0),))


def mask_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value``.

    ``mask`` must be boolean and broadcastable to ``a``.
    """
    mask = np.asarray(mask)
    if mask.dtype != np.bool_:
        raise ShapeError("mask_fill", a.shape, mask.shape, detail=f"mask dtype {mask.dtype} is not bool")
    try:
        np.broadcast_shapes(mask.shape, a.shape)
    except ValueError:
        raise ShapeError("mask_fill", a.shape, mask.shape) from None
    if np.broadcast_shapes(mask.shape, a.shape) != a.shape:
        raise ShapeError("mask_fill", a.shape, mask.shape, detail="mask broadcasts beyond input")
    out = np.where(mask, a.data.dtype.type(value), a.data)
    return _make("mask_fill", out, (a,), lambda g, n: (np.where(mask, 0, g),))


# ---------------------------------------------------------------------------
# shape ops

def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    old = a.shape
    return _make("reshape", out, (a,), lambda g, n: (g.reshape(old),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, detail=f"bad axes {axes}")
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g, n: (g.transpose(inv),))


def expand(a: Tensor, shape) -> Tensor:
    """Explicit broadcast of size-1 axes to ``shape`` (same rank)."""
    shape = tuple(shape)
    if len(shape) != a.ndim or any(s != d and s != 1 for s, d in zip(a.shape, shape)):
        raise ShapeError("expand", a.shape, shape)
    axes = tuple(i for i, (s, d) in enumerate(zip(a.shape, shape)) if s != d)

    def bw(g, n):
        return (g.sum(axis=axes, keepdims=True) if axes else g,)

    return _make("expand", np.broadcast_to(a.data, shape), (a,), bw)


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    shape, dt = a.shape, a.data.dtype

    def bw(g, n):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, idx, g)
        return (full,)

    return _make("getitem", np.array(out), (a,), bw)


def concat_lastdim(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ShapeError("concat_lastdim", detail="no inputs")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError("concat_lastdim", *(q.shape for q in parts))
    sizes = np.cumsum([p.shape[-1] for p in parts])[:-1]

    def bw(g, n):
        return tuple(np.split(g, sizes, axis=-1))

    return _make("concat_lastdim", np.concatenate([p.data for p in parts], axis=-1), parts, bw)


def tsum(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=axis is not None)
    if axis is None:
        out = out.reshape(())

    def bw(g, n):
        return (np.broadcast_to(g, shape).copy() if axis is not None else np.full(shape, g, dtype=a.data.dtype),)

    return _make("sum", out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and NN primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` may be a 2-D weight applied to the last axis of ``a``; otherwise
    both operands must share their leading (batch) axes exactly.
    """
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    if b.ndim == 2:
        k, m = bd.shape

        def bw(g, n):
            da = g @ bd.T if n[0] else None
            db = ad.reshape(-1, k).T @ g.reshape(-1, m) if n[1] else None
            return da, db

        return _make("matmul", ad @ bd, (a, b), bw)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch axes differ")

    def bw(g, n):
        da = g @ np.swapaxes(bd, -1, -2) if n[0] else None
        db = np.swapaxes(ad, -1, -2) @ g if n[1] else None
        return da, db

    return _make("matmul", ad @ bd, (a, b), bw)


def softmax_lastdim(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g, n):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make("softmax_lastdim", y, (a,), bw)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layernorm", x.shape, gamma.shape, beta.shape)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g, n):
        dx = dg = db = None
        if n[0]:
            gh = g * gd
            dx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        if n[1]:
            dg = (g * xhat).reshape(-1, d).sum(axis=0)
        if n[2]:
            db = g.reshape(-1, d).sum(axis=0)
        return dx, dg, db

    return _make("layernorm", out.astype(xd.dtype, copy=False), (x, gamma, beta), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeError("embedding_lookup", table.shape, ids.shape, detail="ids must be integers")
    if table.ndim != 2 or (ids.size and (ids.min() < 0 or ids.max() >= table.shape[0])):
        raise ShapeError("embedding_lookup", table.shape, ids.shape, detail="id out of range")

    def bw(g, n):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dt,)

    return _make("embedding_lookup", table.data[ids], (table,), bw)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotary embedding on the last axis (rotate-half layout).

    ``cos``/``sin`` have shape (T, head_dim // 2) and broadcast over the
    leading axes of ``x`` (..., T, head_dim).
    """
    half = x.shape[-1] // 2
    if x.shape[-1] % 2 or cos.shape != (x.shape[-2], half):
        raise ShapeError("rope", x.shape, cos.shape)
    xd = x.data
    c = cos.astype(xd.dtype, copy=False)
    s = sin.astype(xd.dtype, copy=False)
    x1, x2 = xd[..., :half], xd[..., half:]
    out = np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)

    def bw(g, n):
        g1, g2 = g[..., :half], g[..., half:]
        return (np.concatenate([g1 * c + g2 * s, -g1 * s + g2 * c], axis=-1),)

    return _make("rope", out, (x,), bw)


def cross_entropy(logits: Tensor, targets, weights=None, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer ``targets`` under softmax(logits).

    ``logits`` is (N, V).  With ``reduction="mean"`` the result is the
    ``weights``-weighted mean; ``"none"`` returns per-row values (N,).
    """
    targets = np.asarray(targets).reshape(-1)
    if logits.ndim != 2 or targets.shape[0] != logits.shape[0]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=-1))
    rows = np.arange(x.shape[0])
    nll = (lse - x[rows, targets]).astype(x.dtype, copy=False)
    probs = np.exp(x - lse[:, None])

    if reduction == "none":
        def bw(g, n):
            d = probs * g[:, None]
            d[rows, targets] -= g
            return (d,)

        return _make("cross_entropy", nll, (logits,), bw)

    if reduction != "mean":
        raise ValueError(f"unknown reduction {reduction!r}")
    w = np.ones(x.shape[0], dtype=x.dtype) if weights is None else np.asarray(weights, dtype=x.dtype).reshape(-1)
    if w.shape[0] != x.shape[0]:
        raise ShapeError("cross_entropy", logits.shape, w.shape, detail="weights")
    wsum = w.sum()
    if wsum <= 0:
        raise ValueError("cross_entropy: weights sum to zero")
    coef = (w / wsum).astype(x.dtype)
    out = np.asarray((nll * coef).sum(), dtype=x.dtype)

    def bw(g, n):
        d = probs * (coef * g)[:, None]
        d[rows, targets] -= coef * g
        return (d,)

    return _make("cross_entropy", out, (logits,), bw)


# ---------------------------------------------------------------------------
# graph traversal

class ComputationGraph:
    """Tracked tensors reachable from a root, in topological (id) order."""

    def __init__(self, root: Tensor):
        seen: dict[int, Tensor] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            if t.id in seen or not t.requires_grad:
                continue
            seen[t.id] = t
            if t._node is not None:
                stack.extend(t._node.inputs)
        self.tensors = [seen[i] for i in sorted(seen)]

    @property
    def nodes(self) -> list:
        """(kind, input ids, output tensor) for every non-leaf, in order."""
        return [(t._node.kind, tuple(i.id for i in t._node.inputs), t)
                for t in self.tensors if t._node is not None]

    @property
    def leaves(self) -> list:
        return [t for t in self.tensors if t._node is None]


def backward(loss: Tensor) -> dict:
    """Reverse-mode sweep from a scalar ``loss``.

    Returns a mapping from tensor id to its gradient array for every tracked
    tensor reached.  Leaves with ``requires_grad`` also get ``.grad`` set
    (overwritten, never accumulated across calls).
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    graph = ComputationGraph(loss)
    grads: dict[int, np.ndarray] = {loss.id: np.ones(loss.shape, dtype=loss.data.dtype)}
    for t in reversed(graph.tensors):
        g = grads.get(t.id)
        if g is None or t._node is None:
            continue
        node = t._node
        in_grads = node.backward(g, _needs(node.inputs))
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            ig = np.asarray(ig, dtype=inp.data.dtype)
            if ig.shape != inp.shape:
                ig = ig.reshape(inp.shape)
            prev = grads.get(inp.id)
            grads[inp.id] = ig if prev is None else prev + ig
    for leaf in graph.leaves:
        leaf.grad = grads.get(leaf.id, np.zeros(leaf.shape, dtype=leaf.data.dtype))
    return grads


def finite_diff_grad(f: Callable[[np.ndarray], float], point, step: float = 1e-3,
                     indices: Iterable | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``point``.

    ``f`` receives a perturbed copy of ``point``.  ``indices`` restricts the
    coordinates probed (flat indices); others are left at zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    grad = np.zeros(x0.size)
    flat = x0.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        grad[i] = (float(f(xp.reshape(x0.shape))) - float(f(xm.reshape(x0.shape)))) / (2.0 * step)
    return grad.reshape(x0.shape)
