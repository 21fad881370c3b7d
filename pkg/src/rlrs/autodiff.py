"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every primitive applied to :class:`Var` nodes
created on it; :meth:`Tape.backward` replays the records in reverse and
accumulates gradients by the chain rule. Tapes are built fresh for each
forward pass, are single-owner, and are never shared across threads.

Gradient arrays are only ever rebound, never mutated in place, so a
backward closure may safely return views or shared references.

Everything is float64. Arrays of rank up to 4 are supported, which covers
batched multi-head attention; broadcasting follows numpy rules and
gradients are summed back over broadcast axes.
"""
from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Array = np.ndarray

_MAX_RANK = 4


def _check_rank(value: Array) -> Array:
    if value.ndim > _MAX_RANK:
        raise ValueError(f"rank {value.ndim} exceeds the supported maximum of {_MAX_RANK}")
    return value


class Var:
    """One node of the computation graph: a float64 value and a gradient slot."""

    __slots__ = ("tape", "value", "grad")

    def __init__(self, tape: "Tape", value: Array):
        self.tape = tape
        self.value = value
        self.grad: Array | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"

    # Operator sugar; plain numbers and arrays are wrapped as constants.
    def __add__(self, other):
        return add(self, _coerce(self.tape, other))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _coerce(self.tape, other))

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, _coerce(self.tape, other))

    def __rsub__(self, other):
        return sub(_coerce(self.tape, other), self)

    def __neg__(self):
        return mul(self, _coerce(self.tape, -1.0))

    def __matmul__(self, other):
        return matmul(self, _coerce(self.tape, other))


_BackwardFn = Callable[[Array], tuple[Array | None, ...]]


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self) -> None:
        self._records: list[tuple[Var, tuple[Var, ...], _BackwardFn]] = []
        self._vars: list[Var] = []

    def var(self, value, copy: bool = False) -> Var:
        """Wrap an array as a graph input. The array is shared, not copied."""
        arr = _check_rank(np.array(value, dtype=np.float64) if copy else np.asarray(value, dtype=np.float64))
        v = Var(self, arr)
        self._vars.append(v)
        return v

    def _emit(self, value: Array, inputs: tuple[Var, ...], backward: _BackwardFn) -> Var:
        out = Var(self, _check_rank(value))
        self._vars.append(out)
        self._records.append((out, inputs, backward))
        return out

    def backward(self, output: Var) -> None:
        """Accumulate d(output)/d(v) into ``v.grad`` for every Var on the tape.

        ``output`` must be a scalar produced on this tape. Vars the output
        does not depend on keep ``grad`` None.
        """
        if output.tape is not self:
            raise ValueError("output belongs to a different tape")
        if output.value.shape != ():
            raise ValueError(f"backward requires a scalar output, got shape {output.value.shape}")
        for v in self._vars:
            v.grad = None
        output.grad = np.ones((), dtype=np.float64)
        for out, inputs, backward_fn in reversed(self._records):
            if out.grad is None:
                continue
            for v, g in zip(inputs, backward_fn(out.grad)):
                if g is None:
                    continue
                v.grad = g if v.grad is None else v.grad + g


def _coerce(tape: Tape, x) -> Var:
    if isinstance(x, Var):
        if x.tape is not tape:
            raise ValueError("cannot mix Vars from different tapes")
        return x
    return tape.var(x)


def gradients(tape: Tape, output: Var, params: Mapping[str, Var]) -> dict[str, Array]:
    """Run backward and return the gradient of every named parameter.

    Parameters the output does not reach get an all-zero gradient.
    """
    tape.backward(output)
    return {
        name: (v.grad if v.grad is not None else np.zeros_like(v.value))
        for name, v in params.items()
    }


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _shapes(*vs: Var) -> str:
    return " vs ".join(str(v.value.shape) for v in vs)


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a: Var, b: Var) -> Var:
    a, b = _pair(a, b)
    try:
        value = a.value + b.value
    except ValueError:
        raise ValueError(f"add: incompatible shapes {_shapes(a, b)}") from None
    return a.tape._emit(
        value, (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(g, b.value.shape)),
    )


def sub(a: Var, b: Var) -> Var:
    a, b = _pair(a, b)
    try:
        value = a.value - b.value
    except ValueError:
        raise ValueError(f"sub: incompatible shapes {_shapes(a, b)}") from None
    return a.tape._emit(
        value, (a, b),
        lambda g: (_unbroadcast(g, a.value.shape), _unbroadcast(-g, b.value.shape)),
    )


def mul(a: Var, b: Var) -> Var:
    a, b = _pair(a, b)
    try:
        value = a.value * b.value
    except ValueError:
        raise ValueError(f"mul: incompatible shapes {_shapes(a, b)}") from None
    return a.tape._emit(
        value, (a, b),
        lambda g: (_unbroadcast(g * b.value, a.value.shape), _unbroadcast(g * a.value, b.value.shape)),
    )


def _pair(a, b) -> tuple[Var, Var]:
    if isinstance(a, Var):
        return a, _coerce(a.tape, b)
    if isinstance(b, Var):
        return _coerce(b.tape, a), b
    raise TypeError("at least one operand must be a Var")


# ---------------------------------------------------------------------------
# Linear algebra and shape ops


def matmul(a: Var, b: Var) -> Var:
    """Matrix product, including numpy-style stacked (batched) operands."""
    a, b = _pair(a, b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError(f"matmul requires rank >= 2 operands, got {_shapes(a, b)}")
    if a.value.shape[-1] != b.value.shape[-2]:
        raise ValueError(f"matmul: inner dimensions disagree, {_shapes(a, b)}")
    value = a.value @ b.value

    def backward(g: Array) -> tuple[Array, Array]:
        ga = g @ np.swapaxes(b.value, -1, -2)
        gb = np.swapaxes(a.value, -1, -2) @ g
        return _unbroadcast(ga, a.value.shape), _unbroadcast(gb, b.value.shape)

    return a.tape._emit(value, (a, b), backward)


def transpose(a: Var, axes: Sequence[int]) -> Var:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return a.tape._emit(
        np.transpose(a.value, axes), (a,),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(a: Var, shape: Sequence[int]) -> Var:
    shape = tuple(shape)
    old = a.value.shape
    return a.tape._emit(
        a.value.reshape(shape), (a,),
        lambda g: (g.reshape(old),),
    )


def split(a: Var, sections: int, axis: int) -> list[Var]:
    """Split into ``sections`` equal parts along ``axis``."""
    pieces = np.split(a.value, sections, axis=axis)
    outs = []
    width = pieces[0].shape[axis]
    for i, piece in enumerate(pieces):
        def backward(g: Array, lo=i * width, hi=(i + 1) * width) -> tuple[Array]:
            full = np.zeros_like(a.value)
            index = [slice(None)] * a.value.ndim
            index[axis] = slice(lo, hi)
            full[tuple(index)] = g
            return (full,)

        outs.append(a.tape._emit(piece, (a,), backward))
    return outs


def concat(parts: Sequence[Var], axis: int) -> Var:
    parts = list(parts)
    tape = parts[0].tape
    value = np.concatenate([p.value for p in parts], axis=axis)
    widths = [p.value.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)

    def backward(g: Array) -> tuple[Array, ...]:
        grads = []
        index = [slice(None)] * g.ndim
        for i in range(len(parts)):
            index[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(index)])
        return tuple(grads)

    return tape._emit(value, tuple(parts), backward)


def reduce_sum(a: Var, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Var:
    value = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g: Array) -> tuple[Array]:
        if axis is None:
            return (np.broadcast_to(g, a.value.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape),)

    return a.tape._emit(value, (a,), backward)


def mean(a: Var, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Var:
    count = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(reduce_sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


# ---------------------------------------------------------------------------
# Indexing


def embedding_lookup(table: Var, ids: Array) -> Var:
    """Gather rows of ``table`` by integer ``ids``; scatter-add on backward."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValueError(f"embedding ids must be integers, got dtype {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.value.shape[0]):
        raise ValueError(
            f"embedding id out of range [0, {table.value.shape[0]}): "
            f"[{ids.min()}, {ids.max()}]"
        )

    def backward(g: Array) -> tuple[Array]:
        gt = np.zeros_like(table.value)
        np.add.at(gt, ids, g)
        return (gt,)

    return table.tape._emit(table.value[ids], (table,), backward)


def take_rows(a: Var, idx: Array, unique: bool = False) -> Var:
    """Select rows ``a[idx]`` of a 2-D array (token dispatch).

    Pass ``unique=True`` when the caller guarantees distinct indices; the
    backward pass then uses direct assignment instead of scatter-add.
    """
    idx = np.asarray(idx)

    def backward(g: Array) -> tuple[Array]:
        ga = np.zeros_like(a.value)
        if unique:
            ga[idx] = g
        else:
            np.add.at(ga, idx, g)
        return (ga,)

    return a.tape._emit(a.value[idx], (a,), backward)


def scatter_rows(a: Var, idx: Array, n_rows: int) -> Var:
    """Place rows of ``a`` at positions ``idx`` of an otherwise-zero (n_rows, d) array."""
    idx = np.asarray(idx)
    if a.value.shape[0] != idx.shape[0]:
        raise ValueError(f"scatter_rows: {a.value.shape[0]} rows but {idx.shape[0]} indices")
    value = np.zeros((n_rows,) + a.value.shape[1:], dtype=np.float64)
    value[idx] = a.value
    return a.tape._emit(value, (a,), lambda g: (g[idx],))


def gather_last(a: Var, idx: Array) -> Var:
    """Per-row pick along the last axis of a 2-D array: out[i] = a[i, idx[i]]."""
    idx = np.asarray(idx)
    n = a.value.shape[0]
    if idx.shape != (n,):
        raise ValueError(f"gather_last: expected {n} indices, got shape {idx.shape}")
    rows = np.arange(n)

    def backward(g: Array) -> tuple[Array]:
        ga = np.zeros_like(a.value)
        ga[rows, idx] = g
        return (ga,)

    return a.tape._emit(a.value[rows, idx], (a,), backward)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization


def softmax(a: Var, axis: int = -1) -> Var:
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)

    def backward(g: Array) -> tuple[Array]:
        inner = (g * value).sum(axis=axis, keepdims=True)
        return (value * (g - inner),)

    return a.tape._emit(value, (a,), backward)


def logsumexp(a: Var, axis: int = -1) -> Var:
    """log(sum(exp(a))) along ``axis`` (axis is removed). Gradient is softmax."""
    m = a.value.max(axis=axis, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=axis, keepdims=True)
    value = np.squeeze(m + np.log(s), axis=axis)
    soft = e / s

    def backward(g: Array) -> tuple[Array]:
        return (np.expand_dims(g, axis) * soft,)

    return a.tape._emit(value, (a,), backward)


def silu(a: Var) -> Var:
    sig = 1.0 / (1.0 + np.exp(-a.value))
    value = a.value * sig

    def backward(g: Array) -> tuple[Array]:
        return (g * (sig + a.value * sig * (1.0 - sig)),)

    return a.tape._emit(value, (a,), backward)


def swiglu(x: Var, w_gate: Var, w_val: Var, w_out: Var) -> Var:
    """Gated feed-forward: (silu(x @ w_gate) * (x @ w_val)) @ w_out."""
    return matmul(mul(silu(matmul(x, w_gate)), matmul(x, w_val)), w_out)


def rms_norm(x: Var, gain: Var, eps: float = 1e-6) -> Var:
    """Root-mean-square normalization over the last axis, scaled by ``gain``."""
    ms = np.mean(np.square(x.value), axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    normed = x.value * inv
    value = normed * gain.value

    def backward(g: Array) -> tuple[Array, Array]:
        g_normed = g * gain.value
        gx = inv * (g_normed - normed * np.mean(g_normed * normed, axis=-1, keepdims=True))
        g_gain = _unbroadcast(g * normed, gain.value.shape)
        return gx, g_gain

    return x.tape._emit(value, (x, gain), backward)
