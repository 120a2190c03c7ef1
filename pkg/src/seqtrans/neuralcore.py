"""Dense float64 tensors with a tape-based reverse-mode autodiff.

Operations record onto the active :class:`Tape` (entered with ``with Tape():``).
Outside a tape nothing is recorded, which is how evaluation runs forward passes
cheaply.  Shapes are batched row-major: a batch of vectors is ``(B, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


_active: list["Tape"] = []


class Tensor:
    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended as operations execute, so the list is already in
    topological order and reversing it is a valid backward schedule.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp) -> None:
        self.nodes.append(Node(out, inputs, vjp))


def _record(out: Tensor, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    if _active:
        _active[-1].record(out, inputs, vjp)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(tape: Tape, root: Tensor) -> None:
    """Populate ``.grad`` with d(root)/d(tensor) for everything root depends on.

    Gradients accumulate into existing ``.grad`` arrays, so callers zero
    parameter grads between steps.
    """
    if root.value.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    # intermediate cotangents live here; leaves are written through to .grad
    produced = {id(node.out) for node in tape.nodes}
    cot: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(tape.nodes):
        g = cot.pop(id(node.out), None)
        if g is None:
            continue
        node.out.grad = g if node.out.grad is None else node.out.grad + g
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None:
                continue
            key = id(inp)
            if key in produced:
                cot[key] = cot[key] + gi if key in cot else gi
            else:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
    if id(root) in cot:
        # root was never produced on the tape: it is a leaf itself
        g = cot.pop(id(root))
        root.grad = g if root.grad is None else root.grad + g


# ----------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value + b.value)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value - b.value)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.value * b.value)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.value @ b.value)
    return _record(out, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.value.T)
    return _record(out, (a,), lambda g: (g.T,))


def linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w.T`` for a weight stored as (out, in); ``x`` is a vector or a row batch."""
    if x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {w.shape}")
    if x.value.ndim == 1:
        out = Tensor(w.value @ x.value)
        return _record(out, (x, w), lambda g: (w.value.T @ g, np.outer(g, x.value)))
    return matmul(x, transpose(w))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Join along the last axis; ``a`` fills the leading slots."""
    if a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat batch mismatch: {a.shape} vs {b.shape}")
    split = a.shape[-1]
    out = Tensor(np.concatenate([a.value, b.value], axis=-1))
    return _record(out, (a, b), lambda g: (g[..., :split], g[..., split:]))


def take_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = Tensor(a.value[..., start:stop])

    def vjp(g):
        full = np.zeros_like(a.value)
        full[..., start:stop] = g
        return (full,)

    return _record(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    # tanh form cannot overflow for large |x|
    s = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.value)
    out = Tensor(t)
    return _record(out, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.value)
    out = Tensor(e)
    return _record(out, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.value))
    return _record(out, (a,), lambda g: (g / a.value,))


def sqrt(a: Tensor) -> Tensor:
    r = np.sqrt(a.value)
    out = Tensor(r)
    return _record(out, (a,), lambda g: (g * 0.5 / r,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    keep = a.value >= floor
    out = Tensor(np.where(keep, a.value, floor))
    return _record(out, (a,), lambda g: (g * keep,))


def tensor_sum(a: Tensor, axis: int | None = None) -> Tensor:
    out = Tensor(a.value.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _record(out, (a,), vjp)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; the backward pass scatters into those rows only."""
    idx = np.asarray(ids, dtype=np.int64)
    n_rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"embedding id out of range [0, {n_rows}): {idx.min()}..{idx.max()}")
    out = Tensor(table.value[idx])

    def vjp(g):
        full = np.zeros_like(table.value)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (table,), vjp)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(mask))


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax_np(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax_np(logits))


def softmax_cross_entropy(logits: Tensor, target, weights=None) -> Tensor:
    """Sum of ``weights[b] * -log softmax(logits[b])[target[b]]``.

    A 1-D ``logits`` with an integer ``target`` is the single-example case.
    Rows with weight 0 may carry any in-range placeholder target.
    """
    single = logits.value.ndim == 1
    z = logits.value[None, :] if single else logits.value
    tgt = np.atleast_1d(np.asarray(target, dtype=np.int64))
    n_cls = z.shape[1]
    if tgt.shape[0] != z.shape[0]:
        raise DimensionError(f"{tgt.shape[0]} targets for {z.shape[0]} logit rows")
    if tgt.min() < 0 or tgt.max() >= n_cls:
        raise IndexError(f"target out of range [0, {n_cls})")
    w = np.ones(z.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    logp = log_softmax_np(z)
    rows = np.arange(z.shape[0])
    out = Tensor(-(w * logp[rows, tgt]).sum())

    def vjp(g):
        d = np.exp(logp)
        d[rows, tgt] -= 1.0
        d *= w[:, None] * g
        return (d[0] if single else d,)

    return _record(out, (logits,), vjp)


# ----------------------------------------------------------------- layers

GATE_ORDER = ("input", "forget", "cell", "output")


@dataclass
class LstmParams:
    """Single LSTM layer. Gate blocks are stacked input, forget, cell, output."""

    w_x: Tensor  # (4d, input_dim)
    w_h: Tensor  # (4d, d)
    b: Tensor  # (4d,)

    @property
    def hidden(self) -> int:
        return self.w_h.shape[1]

    @property
    def input_dim(self) -> int:
        return self.w_x.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.w_x, self.w_h, self.b]


def lstm_step(p: LstmParams, x: Tensor, h_prev: Tensor, c_prev: Tensor, mask=None):
    """One LSTM step. Rows with ``mask == 0`` carry ``(h_prev, c_prev)`` unchanged."""
    d = p.hidden
    if x.shape[-1] != p.input_dim or h_prev.shape[-1] != d or c_prev.shape[-1] != d:
        raise DimensionError(
            f"lstm_step expects x[..,{p.input_dim}], h/c[..,{d}]; "
            f"got {x.shape}, {h_prev.shape}, {c_prev.shape}"
        )
    gates = linear(x, p.w_x) + linear(h_prev, p.w_h) + p.b
    i = sigmoid(take_cols(gates, 0, d))
    f = sigmoid(take_cols(gates, d, 2 * d))
    g = tanh(take_cols(gates, 2 * d, 3 * d))
    o = sigmoid(take_cols(gates, 3 * d, 4 * d))
    c = f * c_prev + i * g
    h = o * tanh(c)
    if mask is not None:
        m = Tensor(np.asarray(mask, dtype=np.float64).reshape(-1, 1))
        h = h_prev + m * (h - h_prev)
        c = c_prev + m * (c - c_prev)
    return h, c


def init_lstm(rng: np.random.Generator, input_dim: int, hidden: int) -> LstmParams:
    return LstmParams(
        w_x=uniform_matrix(rng, 4 * hidden, input_dim),
        w_h=uniform_matrix(rng, 4 * hidden, hidden),
        b=Tensor(np.zeros(4 * hidden)),
    )


def uniform_matrix(rng: np.random.Generator, rows: int, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=(rows, fan_in)))


def uniform_embedding(rng: np.random.Generator, rows: int, d: int, scale: float = 0.05) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=(rows, d)))
