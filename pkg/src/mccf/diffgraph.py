"""Dense reverse-mode differentiation on numpy arrays.

Operations performed while a :class:`Tape` is active are recorded in
execution order; :meth:`Tape.backward` then walks the record in reverse and
accumulates adjoints.  Outside a tape every op is a plain numpy computation,
which is what inference uses.

    >>> x = Tensor(3.0, requires_grad=True)
    >>> with Tape() as tape:
    ...     y = x * x
    >>> tape.backward(y)
    >>> float(x.grad)
    6.0
"""
from __future__ import annotations

from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor", "Tape", "TapeError", "ShapeError",
    "add", "sub", "mul", "neg", "scale", "matmul", "matvec", "sparse_matmul",
    "transpose", "reshape", "concat", "take", "sum", "mean", "einsum",
    "relu", "leaky_relu", "sigmoid", "log", "exp", "clamp", "pointwise", "softmax",
    "dropout", "custom", "expit", "ADJOINT_FAULTS",
]

# op name -> multiplier applied to that op's input adjoints; a test hook for
# checking that gradient verification notices a broken backward rule.
ADJOINT_FAULTS: dict[str, float] = {}

_ACTIVE: list["Tape"] = []


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_op")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._op: str | None = None

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
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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


class _Node(NamedTuple):
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Append-only record of one forward pass.

    A tape supports exactly one backward pass; recording onto or
    differentiating a consumed tape raises :class:`TapeError`.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("tape already consumed by backward()")
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def record(self, op: str, inputs: tuple[Tensor, ...], output: Tensor, backward) -> None:
        if self._consumed:
            raise TapeError("cannot record onto a consumed tape")
        self.nodes.append(_Node(op, inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("backward() already ran on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        if not loss.requires_grad:
            return
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            node.output.grad = g
            grads = node.backward(g)
            fault = ADJOINT_FAULTS.get(node.op)
            for inp, gi in zip(node.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                if fault is not None:
                    gi = gi * fault
                if inp._op is None:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    prev = pending.get(key)
                    pending[key] = gi if prev is None else prev + gi
        self.nodes.clear()


def _tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data, op: str, inputs: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _ACTIVE and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._op = op
        _ACTIVE[-1].record(op, inputs, out, backward)
    return out


def custom(op: str, inputs: Sequence, value, backward) -> Tensor:
    """Record a fused op whose value and adjoint rule the caller supplies.

    ``backward(g)`` must return one adjoint (or None) per input.
    """
    return _emit(value, op, tuple(_tensor(t) for t in inputs), backward)


def expit(x: np.ndarray) -> np.ndarray:
    """Logistic function; saturates cleanly to 0 and 1 without warnings."""
    with np.errstate(over="ignore", under="ignore"):
        e = np.asarray(np.exp(np.negative(x)))
    e += 1.0
    return np.reciprocal(e, out=e)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- arithmetic ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_broadcast(a, b, "add")
    return _emit(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_broadcast(a, b, "sub")
    return _emit(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _tensor(a), _tensor(b)
    _check_broadcast(a, b, "mul")
    return _emit(a.data * b.data, "mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = _tensor(a)
    return _emit(-a.data, "neg", (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = _tensor(a)
    c = float(c)
    return _emit(a.data * c, "scale", (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product with numpy semantics, including 1-D operands."""
    a, b = _tensor(a), _tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul does not accept scalars")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    # BLAS is only reached for C-contiguous stacks
    A = np.ascontiguousarray(a.data[None, :] if a.ndim == 1 else a.data)
    B = np.ascontiguousarray(b.data[:, None] if b.ndim == 1 else b.data)
    out = A @ B

    def backward(g):
        G = np.ascontiguousarray(g.reshape(out.shape))
        ga = G @ np.ascontiguousarray(np.swapaxes(B, -1, -2))
        gb = np.ascontiguousarray(np.swapaxes(A, -1, -2)) @ G
        ga = _unbroadcast(ga, A.shape).reshape(a.shape)
        gb = _unbroadcast(gb, B.shape).reshape(b.shape)
        return ga, gb

    if a.ndim == 1:
        out_data = out[..., 0, :]
    else:
        out_data = out
    if b.ndim == 1:
        out_data = out_data[..., 0]
    return _emit(out_data, "matmul", (a, b), backward)


def matvec(m, v) -> Tensor:
    m, v = _tensor(m), _tensor(v)
    if m.ndim != 2 or v.ndim != 1:
        raise ShapeError(f"matvec wants (n, k) and (k,), got {m.shape} and {v.shape}")
    return matmul(m, v)


def sparse_matmul(x, w) -> Tensor:
    """``x @ w`` for a constant (non-differentiable) left operand.

    ``x`` may be a scipy sparse matrix or a dense array; only ``w`` receives
    an adjoint.
    """
    w = _tensor(w)
    if w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"sparse_matmul: shapes {x.shape} and {w.shape} do not align")
    if sp.issparse(x):
        x = x.tocsr()
        out = np.asarray(x @ w.data)
        return _emit(out, "sparse_matmul", (w,), lambda g: (np.asarray(x.T @ g),))
    x = np.asarray(x, dtype=np.float64)
    return _emit(x @ w.data, "sparse_matmul", (w,), lambda g: (x.T @ g,))


# -- shape manipulation -------------------------------------------------------

def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = _tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes), "transpose", (a,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {tuple(shape)}") from None
    return _emit(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit(out, "concat", ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def take(a, index, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis``; repeated indices accumulate."""
    a = _tensor(a)
    index = np.asarray(index, dtype=np.intp)
    out = np.take(a.data, index, axis=axis)

    def backward(g):
        n = a.shape[axis]
        flat = index.reshape(-1)
        gm = np.moveaxis(g, list(range(axis, axis + index.ndim)), list(range(index.ndim)))
        gm = gm.reshape(flat.size, -1)
        scatter = sp.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))),
                                shape=(n, flat.size))
        rest = tuple(np.delete(a.shape, axis))
        ga = np.asarray(scatter @ gm).reshape((n,) + rest)
        return (np.moveaxis(ga, 0, axis),)

    return _emit(out, "take", (a,), backward)


# -- reductions ---------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit(out, "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def einsum(subscripts: str, a, b) -> Tensor:
    """Two-operand einsum without implicit output or ellipsis.

    Every index of an operand must appear in the other operand or in the
    output, which is what lets each adjoint be another einsum.
    """
    a, b = _tensor(a), _tensor(b)
    lhs, out_spec = subscripts.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for spec, other in ((sa, sb), (sb, sa)):
        if set(spec) - set(other) - set(out_spec):
            raise ShapeError(f"einsum {subscripts!r}: index summed within one operand")
    try:
        out = np.einsum(subscripts, a.data, b.data, optimize=True)
    except ValueError as exc:
        raise ShapeError(f"einsum {subscripts!r}: {exc}") from None
    return _emit(out, "einsum", (a, b), lambda g: (
        np.einsum(f"{out_spec},{sb}->{sa}", g, b.data, optimize=True),
        np.einsum(f"{out_spec},{sa}->{sb}", g, a.data, optimize=True),
    ))


# -- elementwise nonlinearities -------------------------------------------------

def relu(x) -> Tensor:
    x = _tensor(x)
    on = x.data > 0
    return _emit(np.where(on, x.data, 0.0), "relu", (x,), lambda g: (g * on,))


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = _tensor(x)
    d = np.where(x.data > 0, 1.0, slope)
    return _emit(x.data * d, "leaky_relu", (x,), lambda g: (g * d,))


def sigmoid(x) -> Tensor:
    x = _tensor(x)
    s = expit(x.data)
    return _emit(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def log(x) -> Tensor:
    x = _tensor(x)
    return _emit(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def exp(x) -> Tensor:
    x = _tensor(x)
    e = np.exp(x.data)
    return _emit(e, "exp", (x,), lambda g: (g * e,))


def pointwise(x, value: np.ndarray, slope: np.ndarray, op: str = "pointwise") -> Tensor:
    """Elementwise function given its output and its derivative at ``x``.

    For fused elementwise chains whose derivative is cheaper to write down
    than to differentiate step by step.
    """
    x = _tensor(x)
    value = np.asarray(value, dtype=np.float64)
    slope = np.asarray(slope, dtype=np.float64)
    if value.shape != x.shape or slope.shape != x.shape:
        raise ShapeError(f"{op}: value/slope shapes must equal input shape {x.shape}")
    return custom(op, (x,), value, lambda g: (g * slope,))


def clamp(x, lo: float, hi: float) -> Tensor:
    x = _tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return _emit(np.clip(x.data, lo, hi), "clamp", (x,), lambda g: (g * inside,))


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Max-shifted softmax along ``axis``.

    Entries where ``mask`` is false get weight 0 and no gradient; a slice
    that is entirely masked comes out all zeros.
    """
    x = _tensor(x)
    z = x.data
    if mask is None:
        top = np.max(z, axis=axis, keepdims=True)
        y = np.exp(z - top)
        y /= y.sum(axis=axis, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
        top = np.max(z, axis=axis, keepdims=True, where=mask, initial=-np.inf)
        top[~np.isfinite(top)] = 0.0
        y = z - top
        np.minimum(y, 0.0, out=y)  # masked entries may exceed the masked max
        np.exp(y, out=y)
        y *= mask
        total = y.sum(axis=axis, keepdims=True)
        total[total == 0] = 1.0
        y /= total

    def backward(g):
        gy = g * y
        gy -= y * gy.sum(axis=axis, keepdims=True)
        return (gy,)

    return _emit(y, "softmax", (x,), backward)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1 / (1 - rate)``."""
    x = _tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _emit(x.data * keep, "dropout", (x,), lambda g: (g * keep,))
