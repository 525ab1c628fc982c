"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a node on the active :class:`Tape`.
:func:`backward` replays the tape in reverse, accumulating gradients into
every tensor that requires them, and clears the tape afterwards.

Binary elementwise operations accept operands of equal shape, or operands
where one shape is a trailing suffix of the other (expansion along leading
axes only). Anything else is a :class:`DimensionError`; use
:func:`broadcast_to` to expand explicitly.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "DomainError",
    "EmptyAttentionError",
    "ContractError",
    "tensor",
    "constant",
    "current_tape",
    "no_grad",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "sigmoid",
    "tanh",
    "relu",
    "softplus",
    "exp",
    "log",
    "elementwise",
    "matmul",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "stack",
    "getitem",
    "broadcast_to",
    "embedding",
    "softmax",
    "detach",
    "where",
    "gru_step",
    "GRUParams",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class EmptyAttentionError(ValueError):
    """Every position of an attention distribution is masked."""


class ContractError(ValueError):
    """A caller violated an operation precondition."""


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, key):
        return getitem(self, key)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = fn


class Tape:
    """Ordered record of executed differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        self.nodes.append(_Node(out, inputs, fn))

    def clear(self) -> None:
        self.nodes.clear()

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


_local = threading.local()


def _tape_stack() -> list[Tape]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = [Tape()]
    return stack


def current_tape() -> Tape:
    """The tape that operations on this thread record onto."""
    return _tape_stack()[-1]


class no_grad:
    """Context in which operations are computed but not recorded."""

    def __enter__(self) -> "no_grad":
        self._prev = getattr(_local, "off", False)
        _local.off = True
        return self

    def __exit__(self, *exc) -> None:
        _local.off = self._prev


def _result(value: np.ndarray, inputs: tuple[Tensor, ...], fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = value
    out.grad = None
    out.name = None
    out.requires_grad = not getattr(_local, "off", False) and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        current_tape().record(out, inputs, fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor that contributed to ``loss``.

    Gradients accumulate into existing ``.grad`` arrays of leaf tensors, so
    callers zero them between steps. The tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    if not loss.requires_grad:
        tape.clear()
        return
    if not any(node.out is loss for node in reversed(tape.nodes)):
        raise ContractError("loss was not produced on the current tape")
    loss.grad = np.ones_like(loss.data)
    # arrays allocated during this pass may be updated in place; anything
    # else (op outputs, caller-held grads) may be shared and is copied first
    owned: dict[int, np.ndarray] = {}
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        grads = node.backward(g)
        # ops may hand ``g`` itself to their inputs, so it stops being private
        owned.pop(id(g), None)
        for inp, gi in zip(node.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(gi, _SliceGrad):
                if inp.grad is None or id(inp.grad) not in owned:
                    base = np.zeros(inp.shape) if inp.grad is None else np.array(inp.grad, dtype=np.float64)
                    owned[id(base)] = base
                    inp.grad = base
                inp.grad[gi.key] += gi.value
            elif inp.grad is None:
                inp.grad = np.asarray(gi, dtype=np.float64)
            elif id(inp.grad) in owned:
                inp.grad += gi
            else:
                inp.grad = inp.grad + gi
                owned[id(inp.grad)] = inp.grad
        # intermediate outputs are not needed once propagated
        if node.out is not loss:
            node.out.grad = None
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) == len(long_) or long_[len(long_) - len(short):] != short:
        raise DimensionError(
            f"{op}: shapes {a} and {b} are not equal and differ by more than "
            "leading-axis expansion"
        )


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a.shape, b.shape, "mul")
    av, bv = a.data, b.data
    return _result(
        av * bv,
        (a, b),
        lambda g: (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)),
    )


def neg(a) -> Tensor:
    a = _lift(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus_value(x: np.ndarray) -> np.ndarray:
    big = x > 30.0
    safe = np.where(big, 0.0, x)
    return np.where(big, x + np.log1p(np.exp(-np.where(big, x, 0.0))), np.log1p(np.exp(safe)))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    s = _stable_sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = _lift(a)
    t = np.tanh(a.data)
    return _result(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a) -> Tensor:
    a = _lift(a)
    on = a.data > 0
    return _result(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def softplus(a) -> Tensor:
    """ln(1 + e^x); for x > 30 evaluated as x + ln(1 + e^-x)."""
    a = _lift(a)
    x = a.data
    return _result(_softplus_value(x), (a,), lambda g: (g * _stable_sigmoid(x),))


def exp(a) -> Tensor:
    a = _lift(a)
    e = np.exp(a.data)
    return _result(e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = _lift(a)
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    x = a.data
    return _result(np.log(x), (a,), lambda g: (g / x,))


_UNARY = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "neg": neg,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch a pointwise operation by name."""
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} is binary")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise ContractError(f"{op} is unary")
        return _UNARY[op](a)
    raise ContractError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` may carry leading batch axes. ``b`` is either a plain matrix
    shared across the batch or has exactly the same batch axes as ``a``.
    """
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch axes differ: {a.shape} x {b.shape}")
    av, bv = a.data, b.data

    def grads(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(bv, -1, -2)
        if b.requires_grad:
            if bv.ndim == 2:
                gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _result(av @ bv, (a, b), grads)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _lift(a)
    shape = a.shape

    def grads(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _result(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), grads)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _lift(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _lift(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(_lift(p) for p in parts)
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum(sizes)[:-1]
    try:
        value = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[p.shape for p in parts]}") from exc
    return _result(value, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = tuple(_lift(p) for p in parts)
    try:
        value = np.stack([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"stack: {[p.shape for p in parts]}") from exc
    n = len(parts)
    return _result(
        value,
        parts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


class _SliceGrad:
    """Gradient that is non-zero only on ``key``; accumulated in place."""

    __slots__ = ("key", "value")

    def __init__(self, key, value):
        self.key = key
        self.value = value


def getitem(a, key) -> Tensor:
    """Basic (int/slice) indexing."""
    a = _lift(a)
    keys = key if isinstance(key, tuple) else (key,)
    if not all(isinstance(k, (int, slice, type(Ellipsis))) or k is None for k in keys):
        raise ContractError("getitem supports basic indexing only")
    shape = a.shape

    def grads(g):
        return (_SliceGrad(key, g),)

    return _result(a.data[key], (a,), grads)


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style broadcast; the gradient is summed back."""
    a = _lift(a)
    shape = tuple(shape)
    src = a.shape
    try:
        value = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {src} to {shape}") from exc

    def grads(g):
        lead = g.ndim - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return _result(np.array(value), (a,), grads)


def embedding(table: Tensor, ids, padding_idx: int | None = 0) -> Tensor:
    """Row lookup; rows at ``padding_idx`` receive no gradient."""
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ContractError(f"embedding id out of range [0, {n})")
    dim = table.shape[1]

    def grads(g):
        flat_ids = ids.reshape(-1)
        flat_g = g.reshape(-1, dim)
        if padding_idx is not None:
            keep = flat_ids != padding_idx
            flat_ids, flat_g = flat_ids[keep], flat_g[keep]
        out = np.zeros((n, dim))
        np.add.at(out, flat_ids, flat_g)
        return (out,)

    return _result(table.data[ids], (table,), grads)


def softmax(a, mask=None, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; masked-out (False) positions get weight 0."""
    a = _lift(a)
    x = a.data
    if mask is None:
        m = np.ones(x.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        if not np.all(m.any(axis=axis)):
            raise EmptyAttentionError("every attention position is masked")
    shifted = np.where(m, x, -np.inf)
    top = shifted.max(axis=axis, keepdims=True)
    e = np.where(m, np.exp(np.where(m, x - top, 0.0)), 0.0)
    p = e / e.sum(axis=axis, keepdims=True)

    def grads(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return _result(p, (a,), grads)


def where(cond, a, b) -> Tensor:
    """Exact elementwise selection; ``cond`` is a constant boolean array."""
    a, b = _lift(a), _lift(b)
    if a.shape != b.shape:
        raise DimensionError(f"where: shapes {a.shape} and {b.shape} differ")
    c = np.broadcast_to(np.asarray(cond, dtype=bool), a.shape)
    return _result(np.where(c, a.data, b.data), (a, b), lambda g: (np.where(c, g, 0.0), np.where(c, 0.0, g)))


def detach(a) -> Tensor:
    """Same values, cut out of the gradient graph."""
    return Tensor(_lift(a).data)


# ---------------------------------------------------------------------------
# recurrent cell


class GRUParams:
    """Weights of one GRU layer: input ``W`` (d_in x 3h), recurrent ``U``
    (h x 3h) and bias ``b`` (3h), gate blocks ordered update, reset,
    candidate."""

    def __init__(self, W: Tensor, U: Tensor, b: Tensor):
        if W.shape[1] % 3 or U.shape != (W.shape[1] // 3, W.shape[1]) or b.shape != (W.shape[1],):
            raise DimensionError(f"inconsistent GRU shapes W{W.shape} U{U.shape} b{b.shape}")
        self.W, self.U, self.b = W, U, b

    @property
    def hidden(self) -> int:
        return self.U.shape[0]

    @property
    def d_in(self) -> int:
        return self.W.shape[0]


def gru_step(x, h_prev, params: GRUParams, x_proj: Tensor | None = None) -> Tensor:
    """One GRU transition.

    z = sigmoid(x Wz + h Uz + bz), r = sigmoid(x Wr + h Ur + br),
    c = tanh(x Wc + (r * h) Uc + bc), h' = (1 - z) * h + z * c.

    ``x_proj`` may carry a precomputed ``x W + b`` to avoid recomputing the
    input projection inside a sequence loop.
    """
    H = params.hidden
    h_prev = _lift(h_prev)
    if h_prev.shape[-1] != H:
        raise DimensionError(f"hidden state width {h_prev.shape[-1]} != {H}")
    if x_proj is None:
        x = _lift(x)
        if x.shape[-1] != params.d_in:
            raise DimensionError(f"input width {x.shape[-1]} != {params.d_in}")
        x2 = x if x.ndim > 1 else reshape(x, (1, -1))
        x_proj = add(matmul(x2, params.W), params.b)
        if x.ndim == 1:
            x_proj = reshape(x_proj, (3 * H,))
    h2 = h_prev if h_prev.ndim > 1 else reshape(h_prev, (1, H))
    U_zr = getitem(params.U, (slice(None), slice(0, 2 * H)))
    U_c = getitem(params.U, (slice(None), slice(2 * H, 3 * H)))
    hU = matmul(h2, U_zr)
    if h_prev.ndim == 1:
        hU = reshape(hU, (2 * H,))
    z = sigmoid(add(x_proj[..., 0:H], hU[..., 0:H]))
    r = sigmoid(add(x_proj[..., H:2 * H], hU[..., H:2 * H]))
    rh = mul(r, h_prev)
    rh2 = rh if rh.ndim > 1 else reshape(rh, (1, H))
    rhU = matmul(rh2, U_c)
    if h_prev.ndim == 1:
        rhU = reshape(rhU, (H,))
    cand = tanh(add(x_proj[..., 2 * H:3 * H], rhU))
    return add(h_prev, mul(z, sub(cand, h_prev)))
