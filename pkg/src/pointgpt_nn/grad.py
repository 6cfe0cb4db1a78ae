"""A small dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays. Each op records its parents and a closure that
pushes the output gradient back to them. There is no implicit
broadcasting: shapes must agree exactly, except in :func:`embedding_add`
which adds a vector onto every row of a matrix (optionally per batch).

Example::

    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = sum_(mul(x, x))
    loss.backward()
    x.grad  # array([2., 4.])
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DoubleBackward, NonScalarLoss, ShapeMismatch, StepOutOfRange
from .kernels import backend as _k

_DEBUG = False


@contextlib.contextmanager
def debug_mode(enabled: bool = True):
    """Trap NaN/Inf at every op boundary while active."""
    global _DEBUG
    prev, _DEBUG = _DEBUG, enabled
    try:
        yield
    finally:
        _DEBUG = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None,
                 _parents: tuple = (), _op: str = ""):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = _parents
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        self._op = _op
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f" op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if _DEBUG and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {op}")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=op)
    if needs:
        out._backward = backward_fn
    return out


def _acc(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.dtype, copy=True)
    else:
        t.grad += g


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a)
    _same_shape("add", a, b)

    def bw(g):
        _acc(a, g)
        _acc(b, g)
    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a)
    _same_shape("sub", a, b)

    def bw(g):
        _acc(a, g)
        _acc(b, -g)
    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a)
    _same_shape("mul", a, b)

    def bw(g):
        _acc(a, g * b.data)
        _acc(b, g * a.data)
    return _make(a.data * b.data, (a, b), bw, "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bw(g):
        _acc(a, g * c)
    return _make(a.data * a.dtype.type(c), (a,), bw, "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bw(g):
        _acc(a, g * mask)
    return _make(a.data * mask, (a,), bw, "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(inner)

    def bw(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        _acc(a, g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * d_inner))
    return _make(0.5 * x * (1.0 + th), (a,), bw, "gelu")


def embedding_add(x: Tensor, v: Tensor) -> Tensor:
    """Add vector ``v`` onto every row of ``x``.

    ``v`` has shape ``x.shape[-1:]`` (shared by all rows) or
    ``x.shape[:-2] + x.shape[-1:]`` (one vector per leading batch entry).
    """
    x, v = as_tensor(x), as_tensor(v, x)
    if v.shape == x.shape[-1:]:
        vb = v.data
        red = tuple(range(x.ndim - 1))
    elif x.ndim >= 2 and v.shape == x.shape[:-2] + x.shape[-1:]:
        vb = v.data[..., None, :]
        red = (x.ndim - 2,)
    else:
        raise ShapeMismatch(f"embedding_add: cannot add {v.shape} onto rows of {x.shape}")

    def bw(g):
        _acc(x, g)
        _acc(v, g.sum(axis=red))
    return _make(x.data + vb, (x, v), bw, "embedding_add")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` over the last two axes.

    ``b`` is either 2-D (shared weight) or has the same leading axes as ``a``.
    """
    a, b = as_tensor(a), as_tensor(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul: batch axes {a.shape[:-2]} vs {b.shape[:-2]}")

    def bw(g):
        if a.requires_grad:
            _acc(a, g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if b.ndim == 2:
                a2 = a.data.reshape(-1, a.shape[-1])
                _acc(b, a2.T @ g.reshape(-1, g.shape[-1]))
            else:
                _acc(b, np.swapaxes(a.data, -1, -2) @ g)
    return _make(a.data @ b.data, (a, b), bw, "matmul")


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, w)
    return embedding_add(y, b) if b is not None else y


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _acc(a, np.transpose(g, inv))
    return _make(np.transpose(a.data, axes), (a,), bw, "transpose")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: {exc}") from None

    def bw(g):
        _acc(a, g.reshape(a.shape))
    return _make(out, (a,), bw, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(lo, hi)
            _acc(t, g[tuple(sl)])
    return _make(out, tensors, bw, "concat")


def slice_(a: Tensor, idx) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _acc(a, full)
    return _make(np.array(a.data[idx]), (a,), bw, "slice")


# ---------------------------------------------------------------- reductions

def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g, a.shape))
    return _make(np.asarray(out), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _acc(a, np.broadcast_to(g / count, a.shape))
    return _make(np.asarray(out), (a,), bw, "mean")


def amax(a: Tensor, axis: int) -> Tensor:
    """Maximum along one axis; the gradient goes to the first maximal entry."""
    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis)

    def bw(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, idx, np.expand_dims(g, axis), axis=axis)
        _acc(a, full)
    return _make(np.squeeze(out, axis), (a,), bw, "amax")


# ---------------------------------------------------------------- normalization

def softmax(a: Tensor) -> Tensor:
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _acc(a, y * (g - (g * y).sum(axis=-1, keepdims=True)))
    return _make(y, (a,), bw, "softmax")


def layer_norm(x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    D = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    w = weight.data if weight is not None else None
    out = xhat * w if w is not None else xhat
    if bias is not None:
        out = out + bias.data
    parents = tuple(t for t in (x, weight, bias) if t is not None)
    red = tuple(range(x.ndim - 1))

    def bw(g):
        if weight is not None:
            _acc(weight, (g * xhat).sum(axis=red))
        if bias is not None:
            _acc(bias, g.sum(axis=red))
        if x.requires_grad:
            gx = g * w if w is not None else g
            _acc(x, rstd * (gx - gx.mean(axis=-1, keepdims=True)
                            - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))
    if weight is not None and weight.shape != (D,) or bias is not None and bias.shape != (D,):
        raise ShapeMismatch("layer_norm: affine parameters must have shape (D,)")
    return _make(out, parents, bw, "layer_norm")


# ---------------------------------------------------------------- fused losses

def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of (B, C) logits against 0-based integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    x = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x).sum(axis=1))
    rows = np.arange(len(labels))
    loss = (lse - x[rows, labels]).mean()

    def bw(g):
        p = np.exp(x - lse[:, None])
        p[rows, labels] -= 1.0
        _acc(logits, p * (g / len(labels)))
    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def chamfer(pred: Tensor, target) -> Tensor:
    """Per-pair Chamfer distance (l1-form plus l2-form), shape (M,).

    ``pred`` and ``target`` are (M, a, 3) and (M, b, 3) batches of point
    sets. Nearest-neighbour assignments are treated as constants; the
    gradient of a zero distance in the l1 term is taken as zero.
    """
    target = as_tensor(target, pred)
    if pred.ndim != 3 or target.ndim != 3 or pred.shape[0] != target.shape[0] \
            or pred.shape[2] != 3 or target.shape[2] != 3:
        raise ShapeMismatch(f"chamfer: {pred.shape} vs {target.shape}")
    P = np.ascontiguousarray(pred.data, dtype=np.float64)
    Q = np.ascontiguousarray(target.data, dtype=np.float64)
    _, i_pq = _k.nearest_sq(P, Q)
    _, i_qp = _k.nearest_sq(Q, P)
    diff_pq = pred.data - np.take_along_axis(target.data, i_pq[..., None], axis=1)  # (M, a, 3)
    diff_qp = target.data - np.take_along_axis(pred.data, i_qp[..., None], axis=1)  # (M, b, 3)
    sq_pq = (diff_pq * diff_pq).sum(-1)
    sq_qp = (diff_qp * diff_qp).sum(-1)
    d_pq = np.sqrt(sq_pq)
    d_qp = np.sqrt(sq_qp)
    na, nb = pred.shape[1], target.shape[1]
    out = d_pq.mean(1) + d_qp.mean(1) + sq_pq.mean(1) + sq_qp.mean(1)

    def bw(g):
        g = g[:, None, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            u_pq = np.where(d_pq[..., None] > 0, diff_pq / d_pq[..., None], 0.0)
            u_qp = np.where(d_qp[..., None] > 0, diff_qp / d_qp[..., None], 0.0)
        c_pq = g * (u_pq + 2.0 * diff_pq) / na  # d/d pred[a], minus for its target partner
        c_qp = g * (u_qp + 2.0 * diff_qp) / nb  # d/d target[b], minus for its pred partner
        M = pred.shape[0]
        rows_a = np.repeat(np.arange(M), na)
        rows_b = np.repeat(np.arange(M), nb)
        if pred.requires_grad:
            gp = np.array(c_pq, copy=True)
            np.add.at(gp, (rows_b, i_qp.ravel()), -c_qp.reshape(-1, 3))
            _acc(pred, gp)
        if target.requires_grad:
            gt = np.array(c_qp, copy=True)
            np.add.at(gt, (rows_a, i_pq.ravel()), -c_pq.reshape(-1, 3))
            _acc(target, gt)
    return _make(out, (pred, target), bw, "chamfer")


# ---------------------------------------------------------------- backward

@dataclass
class Graph:
    """Nodes reachable from a loss, in topological order (inputs first)."""

    nodes: list = field(default_factory=list)
    leaves: list = field(default_factory=list)

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        leaves = [n for n in order if n.is_leaf and n.requires_grad]
        return cls(order, leaves)


def backward(loss: Tensor) -> Graph:
    """Populate ``.grad`` on every leaf that requires it.

    Intermediate gradients are released afterwards; a second call on the
    same loss raises :class:`DoubleBackward`.
    """
    if loss.data.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if loss._consumed:
        raise DoubleBackward("backward already ran on this graph; rebuild it with a new forward pass")
    graph = Graph.from_loss(loss)
    if not loss.requires_grad:
        loss._consumed = True
        return graph
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in graph.nodes:
        if not node.is_leaf:
            node.grad = None
            node._backward = None
            node._consumed = True
    loss._consumed = True
    return graph


# ---------------------------------------------------------------- optimization

@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float,
               betas=(0.9, 0.999), weight_decay: float = 0.05, eps: float = 1e-8,
               no_decay: frozenset = frozenset()) -> AdamWState:
    """One AdamW update, in place on ``params`` (name -> ndarray).

    Only names present in ``grads`` are touched. Weight decay is decoupled
    (``p -= lr * wd * p`` before the Adam step) and skipped for ``no_decay``.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in sorted(grads):
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"adamw: grad for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if m.shape != p.shape:
            raise ShapeMismatch(f"adamw: state for {name} has shape {m.shape}")
        if weight_decay and name not in no_decay:
            p *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


class AdamW:
    def __init__(self, params: dict, lr: float = 1e-4, betas=(0.9, 0.999),
                 weight_decay: float = 0.05, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.state = AdamWState()
        # biases and LayerNorm gains are not decayed
        self.no_decay = frozenset(k for k, p in params.items() if p.ndim < 2)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: Optional[float] = None):
        arrays = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        adamw_step(arrays, grads, self.state, self.lr if lr is None else lr,
                   self.betas, self.weight_decay, self.eps, self.no_decay)


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 0.0,
              warmup_steps: int = 0) -> float:
    if not 0 <= step <= total_steps:
        raise StepOutOfRange(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return base_lr
    frac = (step - warmup_steps) / span
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * frac))
