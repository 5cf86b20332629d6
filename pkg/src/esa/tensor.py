"""Dense tensors with tape-based reverse-mode differentiation.

Every primitive computes its forward value with numpy and, when a `Tape`
is active and at least one input requires a gradient, appends a record
holding the output, the inputs and a closure mapping the output gradient
to input gradients. `backward` replays those records in reverse order.

    >>> w = Parameter(np.ones((2, 3)), name="w")
    >>> with Tape():
    ...     loss = (w @ Tensor(np.ones((3, 1)))).sum()
    >>> backward(loss)["w"].shape
    (2, 3)
"""

from __future__ import annotations

import numpy as np
from scipy import special

__all__ = [
    "ContractError",
    "ShapeError",
    "Tape",
    "Tensor",
    "Parameter",
    "active_tape",
    "as_tensor",
    "record",
    "backward",
    "mask_floor",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "exp",
    "log",
    "sigmoid",
    "relu",
    "gelu",
    "silu",
    "softmax_lastdim",
    "log_softmax_lastdim",
    "layer_norm",
    "concat_lastdim",
    "transpose_last2",
    "swapaxes",
    "reshape",
    "index",
    "sum",
    "mean",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Use as a context manager; nested tapes shadow outer ones.
    """

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def mask_floor(dtype) -> float:
    """Large negative additive value used to block attention entries."""
    return -1e30 if np.dtype(dtype) == np.float64 else -1e9


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose_last2(self):
        return transpose_last2(self)


class Parameter(Tensor):
    """Named learnable leaf tensor."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", dtype=None) -> None:
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record(out_data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    """Wrap `out_data` as an op output and register `grad_fn` on the tape.

    `grad_fn(g)` receives the output gradient and returns one gradient (or
    None) per parent. This is the extension point for fused primitives.
    """
    needs = any(p.requires_grad for p in parents)
    out = Tensor(out_data)
    if needs:
        tape = active_tape()
        if tape is not None:
            out.requires_grad = True
            out._tape = tape
            tape.records.append((out, parents, grad_fn))
    return out


def backward(loss: Tensor, params=None, retain_tape: bool = False) -> dict[str, np.ndarray]:
    """Replay the tape of `loss` and accumulate gradients into leaves.

    Returns a map from Parameter name to its accumulated gradient. When
    `params` is given, every listed parameter appears in the map, with a
    zero gradient if the loss does not depend on it.

    The tape is cleared afterwards unless `retain_tape` is set; its records
    and outputs reference each other, so keeping them would leave every
    intermediate array to the cyclic garbage collector.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not produced under an active tape")

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: dict[int, Tensor] = {}
    for out, parents, grad_fn in reversed(tape.records):
        g = pending.pop(id(out), None)
        if g is None:
            continue
        for p, pg in zip(parents, grad_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._tape is None:
                # leaf
                p.grad = pg.copy() if p.grad is None else p.grad + pg
                seen[id(p)] = p
            elif id(p) in pending:
                pending[id(p)] = pending[id(p)] + pg
            else:
                pending[id(p)] = pg

    if not retain_tape:
        tape.clear()
    grads = {}
    for p in seen.values():
        if isinstance(p, Parameter):
            grads[p.name] = p.grad
    for p in params or ():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        grads[p.name] = p.grad
    return grads


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.data.dtype.type(c)
    return record(a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch extents differ in {a.shape} and {b.shape}") from None

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return record(a.data @ b.data, (a, b), grad_fn)


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return record(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return record(np.log(a.data), (a,), lambda g: (g / a.data,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = special.expit(a.data)
    return record(y, (a,), lambda g: (g * y * (1 - y),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return record(np.where(on, a.data, 0), (a,), lambda g: (g * on,))


_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))

    def grad_fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return record(x * cdf, (a,), grad_fn)


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = special.expit(x)
    return record(x * s, (a,), lambda g: (g * s * (1 + x * (1 - s)),))


def softmax_lastdim(a, floor: float | None = None) -> Tensor:
    """Softmax over the last axis with an all-masked-row guard.

    Rows whose maximum is at or below half the masking floor are treated as
    fully blocked and yield zeros instead of a uniform distribution.
    """
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ShapeError(f"softmax_lastdim: need a non-empty last axis, got {a.shape}")
    if floor is None:
        floor = mask_floor(a.dtype)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    y = e / e.sum(axis=-1, keepdims=True)
    dead = m <= 0.5 * floor
    if dead.any():
        y = np.where(dead, 0, y)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record(y, (a,), grad_fn)


def log_softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))
    y = x - lse

    def grad_fn(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return record(y, (a,), grad_fn)


def layer_norm(x, scale, shift, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then affine."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    d = x.shape[-1]
    if scale.shape != (d,) or shift.shape != (d,):
        raise ShapeError(
            f"layer_norm: scale {scale.shape} / shift {shift.shape} must both be ({d},)"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def grad_fn(g):
        gx = gs = gb = None
        lead = tuple(range(g.ndim - 1))
        if x.requires_grad:
            gh = g * scale.data
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        if scale.requires_grad:
            gs = (g * xhat).sum(axis=lead)
        if shift.requires_grad:
            gb = g.sum(axis=lead)
        return gx, gs, gb

    return record(xhat * scale.data + shift.data, (x, scale, shift), grad_fn)


def concat_lastdim(parts) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(
                f"concat_lastdim: leading shapes differ: {parts[0].shape} vs {p.shape}"
            )
    cuts = np.cumsum([p.shape[-1] for p in parts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, cuts, axis=-1))

    return record(np.concatenate([p.data for p in parts], axis=-1), parts, grad_fn)


def transpose_last2(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose_last2: need ndim >= 2, got {a.shape}")
    return record(
        np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return record(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return record(y, (a,), lambda g: (g.reshape(a.shape),))


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(
        isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items
    )


def index(a, idx) -> Tensor:
    """Basic slicing or integer-array gathering with a scatter-add gradient."""
    a = as_tensor(a)
    basic = _is_basic(idx)

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[idx] += g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return record(a.data[idx], (a,), grad_fn)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(np.asarray(y), (a,), grad_fn)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)
