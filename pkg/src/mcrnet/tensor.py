"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``backward`` sorts the reachable graph topologically (the
tape) and accumulates gradients into leaf tensors additively.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_GRAD_ENABLED = True
CHECK_FINITE = True


class ShapeError(ValueError):
    """Raised when operand shapes violate an op contract."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf from finite inputs."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 stream; the same seed always yields the same draws."""
    return np.random.default_rng(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    # operator sugar
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __getitem__(self, key):
        return index(self, key)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    # python scalars adopt the tensor operand's dtype so float32 graphs stay float32
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        if all(np.isfinite(p.data).all() for p in parents):
            raise NonFiniteError(f"non-finite output from {backward_fn.__qualname__.split('.')[0]}")
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def _add_backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, (a, b), _add_backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc

    def _sub_backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(data, (a, b), _sub_backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def _mul_backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(data, (a, b), _mul_backward)


def neg(a: Tensor) -> Tensor:
    def _neg_backward(g):
        return (-g,)

    return _result(-a.data, (a,), _neg_backward)


def relu(x: Tensor) -> Tensor:
    active = x.data > 0

    def _relu_backward(g):
        return (g * active,)

    return _result(np.where(active, x.data, 0.0).astype(x.dtype, copy=False), (x,), _relu_backward)


def sigmoid(x: Tensor) -> Tensor:
    # split branches keep exp() from overflowing for large |x|
    z = x.data
    e = np.exp(-np.abs(z))
    out = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)

    def _sigmoid_backward(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), _sigmoid_backward)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of non-positive value")

    def _log_backward(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), _log_backward)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient flows only where the value was inside ``[lo, hi]``."""
    inside = (x.data >= lo) & (x.data <= hi)

    def _clip_backward(g):
        return (g * inside,)

    return _result(np.clip(x.data, lo, hi), (x,), _clip_backward)


# ---------------------------------------------------------------------------
# shape and reduction


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = np.sum(x.data, axis=axis, keepdims=keepdims)

    def _sum_backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(data), (x,), _sum_backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {x.shape} -> {tuple(shape)}") from exc

    def _reshape_backward(g):
        return (g.reshape(x.shape),)

    return _result(data, (x,), _reshape_backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    data = np.transpose(x.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def _transpose_backward(g):
        return (np.transpose(g, inverse),)

    return _result(data, (x,), _transpose_backward)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: {x.shape} -> {tuple(shape)}") from exc

    def _broadcast_backward(g):
        return (_unbroadcast(g, x.shape),)

    return _result(data, (x,), _broadcast_backward)


def concat_last(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate along the feature (last) axis; leading dims must agree."""
    tensors = [as_tensor(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat_last: leading dims {[t.shape for t in tensors]}")
    data = np.concatenate([t.data for t in tensors], axis=-1)
    splits = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def _concat_backward(g):
        return tuple(np.split(g, splits, axis=-1))

    return _result(data, tensors, _concat_backward)


def index(x: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing, ``x[key]``."""
    data = x.data[key]

    def _index_backward(g):
        out = np.zeros_like(x.data)
        out[key] = g
        return (out,)

    return _result(np.array(data), (x,), _index_backward)


def take_along_last(x: Tensor, index: np.ndarray) -> Tensor:
    """Pick ``x[..., index[...]]``: one entry per leading position."""
    index = np.asarray(index, dtype=np.int64)
    if index.shape != x.shape[:-1]:
        raise ShapeError(f"take_along_last: index {index.shape} vs {x.shape}")
    data = np.take_along_axis(x.data, index[..., None], axis=-1)[..., 0]

    def _take_backward(g):
        out = np.zeros_like(x.data)
        np.put_along_axis(out, index[..., None], g[..., None], axis=-1)
        return (out,)

    return _result(data, (x,), _take_backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding: id out of range for table {table.shape}")
    data = table.data[ids]

    def _embedding_backward(g):
        out = np.zeros_like(table.data)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _result(data, (table,), _embedding_backward)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError("matmul needs at least 1-d operands")
    k_a = a.shape[-1]
    k_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if k_a != k_b:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def _matmul_backward(g):
        A, B = a.data, b.data
        if B.ndim == 1:
            # (..., k) @ (k,) -> (...)
            ga = g[..., None] * B
            gb = np.tensordot(g, A, axes=(tuple(range(g.ndim)), tuple(range(g.ndim))))
            return _unbroadcast(ga, a.shape), gb
        if A.ndim == 1:
            ga = np.matmul(B, g[..., None])[..., 0]
            gb = A[:, None] * g[..., None, :]
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
        ga = np.matmul(g, np.swapaxes(B, -1, -2))
        if B.ndim == 2:
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(A, -1, -2), g), b.shape)
        return _unbroadcast(ga, a.shape), gb

    return _result(data, (a, b), _matmul_backward)


def affine(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"affine: x {x.shape} with W {weight.shape}")
    out = matmul(x, weight)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"affine: bias {bias.shape} for W {weight.shape}")
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# attention primitives


def masked_softmax(logits: Tensor, mask, axis: int = -1) -> Tensor:
    """Softmax with masked-out entries forced to exactly zero.

    ``mask`` is boolean and broadcastable to ``logits``; every slice along
    ``axis`` needs at least one true entry.
    """
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, logits.shape)
    except ValueError as exc:
        raise ShapeError(f"masked_softmax: mask {mask.shape} vs logits {logits.shape}") from exc
    if not full.any(axis=axis).all():
        raise ValueError("masked_softmax: a slice has every position masked")
    z = np.where(full, logits.data, -np.inf)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = (e / e.sum(axis=axis, keepdims=True)).astype(logits.dtype, copy=False)

    def _masked_softmax_backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _result(out, (logits,), _masked_softmax_backward)


def weighted_sum(weights: Tensor, rows: Tensor) -> Tensor:
    """Convex combination ``sum_t weights[..., t] * rows[..., t, :]``."""
    if rows.ndim < 2 or weights.shape != rows.shape[:-1]:
        raise ShapeError(f"weighted_sum: weights {weights.shape} vs rows {rows.shape}")
    data = np.matmul(weights.data[..., None, :], rows.data)[..., 0, :]

    def _weighted_sum_backward(g):
        gw = np.matmul(rows.data, g[..., :, None])[..., 0]
        gr = weights.data[..., :, None] * g[..., None, :]
        return gw, gr

    return _result(data, (weights, rows), _weighted_sum_backward)


def row_dot(rows: Tensor, vec: Tensor) -> Tensor:
    """Per-position dot product: rows (..., L, h) with vec (..., h) -> (..., L)."""
    if rows.shape[:-2] != vec.shape[:-1] or rows.shape[-1] != vec.shape[-1]:
        raise ShapeError(f"row_dot: rows {rows.shape} vs vec {vec.shape}")
    data = np.matmul(rows.data, vec.data[..., :, None])[..., 0]

    def _row_dot_backward(g):
        gr = g[..., :, None] * vec.data[..., None, :]
        gv = np.matmul(g[..., None, :], rows.data)[..., 0, :]
        return gr, gv

    return _result(data, (rows, vec), _row_dot_backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * gain.data + shift.data

    def _layer_norm_backward(g):
        n = x.shape[-1]
        gx_hat = g * gain.data
        gx = inv / n * (n * gx_hat - gx_hat.sum(-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(-1, keepdims=True))
        ggain = (g * xhat).reshape(-1, n).sum(0)
        gshift = g.reshape(-1, n).sum(0)
        return gx, ggain, gshift

    return _result(data, (x, gain, shift), _layer_norm_backward)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)

    def _dropout_backward(g):
        return (g * keep,)

    return _result(x.data * keep, (x,), _dropout_backward)


# ---------------------------------------------------------------------------
# reverse mode


def build_tape(loss: Tensor) -> list[Tensor]:
    """Topologically ordered list of graph nodes reachable from ``loss``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, tape: list[Tensor] | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if tape is None:
        tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# finite-difference gradient check


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def worst(self) -> str | None:
        if not self.per_param:
            return None
        return max(self.per_param, key=self.per_param.get)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               tol: float = 1e-5, names: Sequence[str] | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``f`` rebuilds the graph from the current parameter values and returns a
    scalar. Relative error per entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)``.
    """
    names = list(names) if names is not None else [p.name or f"param{i}" for i, p in enumerate(params)]
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, {p.name} is {p.data.dtype}")
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("grad_check: loss is non-finite at the base point")
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    report = GradCheckReport(0.0, tol)
    with no_grad():
        for name, p, a in zip(names, params, analytic):
            flat = p.data.reshape(-1)
            numeric = np.empty_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                try:
                    flat[i] = orig + eps
                    fp = float(f().data)
                    flat[i] = orig - eps
                    fm = float(f().data)
                except NonFiniteError as exc:
                    raise NonFiniteError(f"grad_check: perturbing {name}[{i}] failed: {exc}") from exc
                finally:
                    flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise NonFiniteError(f"grad_check: non-finite loss perturbing {name}[{i}]")
                numeric[i] = (fp - fm) / (2 * eps)
            a = a.reshape(-1)
            denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
            err = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
            report.per_param[name] = err
            report.max_rel_error = max(report.max_rel_error, err)
    for p in params:
        p.grad = None
    return report


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
                               m=[np.zeros_like(p.data) for p in self.params],
                               v=[np.zeros_like(p.data) for p in self.params])

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)

    def zero_grad(self) -> None:
        zero_grad(self.params)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState) -> None:
    """Bias-corrected Adam update applied in place; missing grads count as zero."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("adam_step: params, grads and state disagree in length")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"adam_step: grad {g.shape} vs param {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)
