"""Dense float64 tensors with a reverse-mode autodiff tape.

All values are stored as float64 and must stay finite; a NaN or Inf is
raised immediately instead of propagating. Operations accept plain
arrays or Tensors and support an optional leading batch axis (at most
three axes total), which is everything the captioning graph needs.

Gradients are produced by recording each operation on an active Tape
and replaying it in exact reverse order:

    with Tape() as tape:
        loss = ...          # forward pass, scalar output
    tape.backward(loss)     # leaf.grad now holds d(loss)/d(leaf)

Without an active tape the same functions run as plain numpy, which is
what evaluation-mode code paths use.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import (
    GradError,
    IndexLookupError,
    MaskError,
    NumericError,
    ParamError,
    ShapeError,
)

# Additive logit for disallowed attention positions. Large enough that
# exp() underflows to exactly 0.0 after the stable-softmax shift.
NEG_INF = -1.0e9


class Tensor:
    """A float64 array plus an optional gradient slot.

    Leaves created with requires_grad=True collect gradients when a
    recorded graph is differentiated. Intermediate results inherit
    requires_grad from their inputs but never hold a .grad themselves.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor holds non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Light operator sugar; the functional forms below do the work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class _Entry:
    __slots__ = ("inputs", "output", "backprop")

    def __init__(self, inputs, output, backprop):
        self.inputs = inputs
        self.output = output
        self.backprop = backprop


_TAPE_STACK: list["Tape"] = []


def _active_tape() -> "Tape | None":
    return _TAPE_STACK[-1] if _TAPE_STACK else None


class Tape:
    """Ordered record of executed operations, replayed backwards once."""

    def __init__(self):
        self._entries: list[_Entry] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._entries)

    def _record(self, inputs, output, backprop) -> None:
        self._entries.append(_Entry(inputs, output, backprop))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf.

        The loss must be a scalar produced while this tape was active.
        A tape differentiates once; leaves must have been zeroed since
        any previous backward pass, otherwise stale-accumulation bugs
        would hide, so both misuses raise GradError.
        """
        if self._consumed:
            raise GradError("tape already differentiated; build a fresh graph")
        if not self._entries:
            raise GradError("tape is empty; nothing was recorded")
        if loss.data.shape != ():
            raise GradError(f"loss must be scalar, got shape {loss.data.shape}")
        produced = {id(e.output) for e in self._entries}
        if id(loss) not in produced:
            raise GradError("loss was not produced under this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for entry in reversed(self._entries):
            out_grad = grads.pop(id(entry.output), None)
            if out_grad is None:
                continue
            for tensor, grad in zip(entry.inputs, entry.backprop(out_grad)):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                held = grads.get(key)
                grads[key] = grad if held is None else held + grad
        # Whatever gradients remain belong to leaves.
        for entry in self._entries:
            for tensor in entry.inputs:
                key = id(tensor)
                if key in produced or key not in grads:
                    continue
                if tensor.grad is not None:
                    raise GradError(
                        "leaf already holds a gradient; call zero_grad between steps"
                    )
                tensor.grad = grads.pop(key)
        self._consumed = True


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _emit(inputs: Sequence[Tensor], out_data: np.ndarray,
          backprop: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap an op result, recording it if an active tape needs gradients."""
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._record(tuple(inputs), out, backprop)
    return out


def _sum_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo numpy broadcasting by summing grad down to the given shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _swap_last(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product; either operand may carry a leading batch axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim > 3 or b.ndim > 3:
        raise ShapeError(f"matmul needs 2- or 3-axis operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch sizes differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backprop(g):
        ga = _sum_to(np.matmul(g, _swap_last(b.data)), a.shape)
        gb = _sum_to(np.matmul(_swap_last(a.data), g), b.shape)
        return ga, gb

    return _emit((a, b), out, backprop)


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"add cannot broadcast {a.shape} with {b.shape}") from None

    def backprop(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return _emit((a, b), out, backprop)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul cannot broadcast {a.shape} with {b.shape}") from None

    def backprop(g):
        return _sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape)

    return _emit((a, b), out, backprop)


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _emit((a,), a.data * s, lambda g: (g * s,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    keep = a.data > 0.0
    return _emit((a,), np.where(keep, a.data, 0.0), lambda g: (g * keep,))


def concat(parts: Sequence) -> Tensor:
    """Concatenate along the last axis; all other axes must agree."""
    tensors = [_as_tensor(p) for p in parts]
    if not tensors:
        raise ShapeError("concat of zero tensors")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(
                f"concat leading axes differ: {tensors[0].shape} vs {t.shape}"
            )
    out = np.concatenate([t.data for t in tensors], axis=-1)
    offsets = np.cumsum([t.shape[-1] for t in tensors])[:-1]

    def backprop(g):
        return tuple(np.split(g, offsets, axis=-1))

    return _emit(tensors, out, backprop)


def embedding(table, ids) -> Tensor:
    """Row lookup: ids of any shape gather rows of a 2-axis table."""
    table = _as_tensor(table)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be 2-axis, got {table.shape}")
    idx = np.asarray(ids)
    if not np.issubdtype(idx.dtype, np.integer):
        raise IndexLookupError("embedding ids must be integers")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexLookupError(
            f"embedding id out of range [0, {table.shape[0]}): "
            f"min={idx.min()}, max={idx.max()}"
        )
    out = table.data[idx]

    def backprop(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit((table,), out, backprop)


def transpose_last(a) -> Tensor:
    """Swap the last two axes."""
    a = _as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose_last needs at least 2 axes, got {a.shape}")
    return _emit((a,), _swap_last(a.data), lambda g: (_swap_last(g),))


def softmax(a, mask: np.ndarray | None = None) -> Tensor:
    """Stable softmax over the last axis.

    mask is a boolean array broadcastable to the input; False entries
    receive exactly zero probability via a large negative logit. Every
    slice must keep at least one True entry.
    """
    a = _as_tensor(a)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
        if np.any(~mask.any(axis=-1)):
            raise MaskError("softmax slice is fully masked")
        logits = np.where(mask, a.data, NEG_INF)
    else:
        logits = a.data
    shifted = logits - logits.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    if mask is not None:
        expd = np.where(mask, expd, 0.0)
    probs = expd / expd.sum(axis=-1, keepdims=True)

    def backprop(g):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        return (probs * (g - inner),)

    return _emit((a,), probs, backprop)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    a, gain, bias = _as_tensor(a), _as_tensor(gain), _as_tensor(bias)
    dim = a.shape[-1]
    if gain.shape != (dim,) or bias.shape != (dim,):
        raise ShapeError(
            f"layer_norm affine shapes {gain.shape}/{bias.shape} do not match width {dim}"
        )
    mean = a.data.mean(axis=-1, keepdims=True)
    var = ((a.data - mean) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = (a.data - mean) * inv
    out = normed * gain.data + bias.data

    def backprop(g):
        gn = g * gain.data
        gx = inv * (
            gn
            - gn.mean(axis=-1, keepdims=True)
            - normed * (gn * normed).mean(axis=-1, keepdims=True)
        )
        ggain = _sum_to(g * normed, gain.shape)
        gbias = _sum_to(g, bias.shape)
        return gx, ggain, gbias

    return _emit((a, gain, bias), out, backprop)


def dropout(a, p: float, train: bool = False,
            rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; in eval mode the input passes through untouched."""
    if not 0.0 <= p < 1.0:
        raise ParamError(f"dropout rate must be in [0, 1), got {p}")
    a = _as_tensor(a)
    if not train or p == 0.0:
        return a
    if rng is None:
        raise ParamError("training-mode dropout needs an rng")
    keep = rng.random(a.shape) >= p
    factor = keep / (1.0 - p)
    return _emit((a,), a.data * factor, lambda g: (g * factor,))


def log_clamped(a, floor: float = 1e-12) -> Tensor:
    """Elementwise log of max(x, floor); gradient is zero below the floor."""
    if floor <= 0.0:
        raise ParamError(f"log floor must be positive, got {floor}")
    a = _as_tensor(a)
    clamped = np.maximum(a.data, floor)
    out = np.log(clamped)
    inside = a.data > floor

    def backprop(g):
        return (np.where(inside, g / clamped, 0.0),)

    return _emit((a,), out, backprop)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    """View the same elements under a new shape."""
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {a.shape} into {shape}") from None
    return _emit((a,), out, lambda g: (g.reshape(a.shape),))


def sum_tensor(a, axis: int | None = None) -> Tensor:
    """Sum over one axis, or over everything into a scalar."""
    a = _as_tensor(a)
    out = a.data.sum(axis=axis)

    def backprop(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit((a,), out, backprop)


def mean_tensor(a) -> Tensor:
    """Mean of all entries as a scalar."""
    a = _as_tensor(a)
    n = a.data.size
    if n == 0:
        raise ShapeError("mean of an empty tensor")
    return scale(sum_tensor(a), 1.0 / n)
