"""Dense float64 tensors with a reverse-mode gradient tape.

Every operation in this module accepts plain arrays or :class:`Tensor`
values and returns a new :class:`Tensor`.  While a :class:`GradTape` is
active (``with GradTape() as tape:``) each operation whose inputs require
gradients is appended to the tape together with a closure computing its
vector-Jacobian product.  :func:`backward` replays those closures in exact
reverse order.

Leading batch axes are supported throughout: ``matmul`` broadcasts like
``numpy.matmul`` and elementwise operations broadcast like numpy, with the
adjoints summed back onto the original input shapes.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from typing import Any

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """Immutable n-d array of float64 values, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) \
            else np.asarray(data, dtype=DTYPE)
        view = arr.view()
        view.flags.writeable = False
        self.data = view
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __array_priority__ = 100.0

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

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return swap_last(self)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


_ACTIVE: list["GradTape"] = []


class GradTape:
    """Ordered record of differentiable operations.

    Each record is ``(output, inputs, vjp)`` where ``vjp`` maps the adjoint of
    ``output`` to a tuple of adjoints, one per input (``None`` for inputs that
    do not require gradients).
    """

    def __init__(self) -> None:
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.replay_order: list[int] = []

    def __enter__(self) -> "GradTape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _ACTIVE.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self.records.append((out, inputs, vjp))


def _active_tape() -> GradTape | None:
    return _ACTIVE[-1] if _ACTIVE else None


def _emit(value: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs)
    tape = _active_tape()
    if needs and tape is not None:
        tape.record(out, inputs, vjp)
    return out


def parameter(data: Any, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def backward(
    tape: GradTape,
    loss: Tensor,
    params: Mapping[str, Tensor] | Sequence[Tensor],
) -> dict[str, np.ndarray] | list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Returns a dict when ``params`` is a mapping, else a list aligned with it.
    Parameters that the loss does not depend on get an all-zero gradient.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tape.replay_order = []
    for pos in range(len(tape.records) - 1, -1, -1):
        out, inputs, vjp = tape.records[pos]
        g = adjoints.get(id(out))
        if g is None:
            continue
        tape.replay_order.append(pos)
        for inp, gi in zip(inputs, vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in adjoints:
                adjoints[key] = adjoints[key] + gi
            else:
                adjoints[key] = gi

    def grad_of(p: Tensor) -> np.ndarray:
        g = adjoints.get(id(p))
        return np.zeros(p.shape, dtype=DTYPE) if g is None else np.array(g, dtype=DTYPE)

    if isinstance(params, Mapping):
        return {k: grad_of(p) for k, p in params.items()}
    return [grad_of(p) for p in params]


# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    return _emit(value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from exc
    return _emit(value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(value, (a, b), vjp)


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _emit(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# structural


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}")
    try:
        value = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: shape mismatch {a.shape} @ {b.shape}") from exc

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # shared weight: one flat GEMM instead of a batched product and a reduction
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _emit(value, (a, b), vjp)


def swap_last(x) -> Tensor:
    x = as_tensor(x)
    return _emit(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return _emit(x.data.reshape(tuple(shape)), (x,), lambda g: (g.reshape(x.shape),))


def index(x, key) -> Tensor:
    """Basic or advanced indexing; the adjoint scatters back with accumulation."""
    x = as_tensor(x)

    def vjp(g):
        full = np.zeros(x.shape, dtype=DTYPE)
        np.add.at(full, key, g)
        return (full,)

    return _emit(x.data[key], (x,), vjp)


def take_rows(table, ids, padding_idx: int | None = 0) -> Tensor:
    """Gather rows of a 2-d ``table`` by integer ``ids`` of any shape.

    Rows are accumulated once per occurrence in the adjoint.  Positions
    holding ``padding_idx`` read as zero whatever the table row contains, and
    that row never receives gradient.
    """
    table = as_tensor(table)
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"take_rows: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"take_rows: ids outside [0, {table.shape[0]})")

    def vjp(g):
        full = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        if padding_idx is not None:
            full[padding_idx] = 0.0
        return (full,)

    value = table.data[ids]
    if padding_idx is not None:
        value = np.where((ids == padding_idx)[..., None], 0.0, value)
    return _emit(value, (table,), vjp)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    value = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(value, (x,), vjp)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return sum(x, axis=axis) * (1.0 / count)


# ---------------------------------------------------------------------------
# normalisation and attention


def masked_softmax_rows(scores, mask) -> Tensor:
    """Softmax along the last axis restricted to positions where ``mask`` is true.

    Disallowed entries are exactly zero.  Every row must allow at least one
    position.
    """
    scores = as_tensor(scores)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    allowed = mask.any(axis=-1)
    if not allowed.all():
        bad = tuple(int(i) for i in np.argwhere(~allowed)[0])
        raise ValueError(f"masked_softmax_rows: row {bad} has no allowed position")
    shifted = np.where(mask, scores.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(y, (scores,), vjp)


def layer_norm(x, gain, bias, eps: float = 1e-12) -> Tensor:
    """Normalise each last-axis slice to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match last axis {d}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    value = xhat * gain.data + bias.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(value, (x, gain, bias), vjp)


# ---------------------------------------------------------------------------
# fused losses


def cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[target]``; ``targets`` are column indices."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise IndexError(f"cross_entropy: target outside [0, {logits.shape[1]})")
    rows = np.arange(logits.shape[0])
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    value = (lse - z[rows, targets]).mean()

    def vjp(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (g * p / logits.shape[0],)

    return _emit(np.asarray(value), (logits,), vjp)


def bce_with_logits(logits, targets) -> Tensor:
    """Binary cross-entropy summed over labels, averaged over rows.

    Uses ``max(z, 0) - z*t + log1p(exp(-|z|))`` so large logits never overflow.
    """
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=DTYPE)
    if t.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs targets {t.shape}")
    z = logits.data
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    rows = z.shape[0] if z.ndim > 1 else 1
    value = per.sum() / rows

    def vjp(g):
        return (g * (_sigmoid(z) - t) / rows,)

    return _emit(np.asarray(value), (logits,), vjp)
