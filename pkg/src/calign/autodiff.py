"""Float64 tensors and tape-based reverse-mode differentiation.

The tape is explicit: an operation records a node only when it is handed a
Tape and at least one input requires a gradient. A pass run with
``tape=None`` performs the same arithmetic with no gradient linkage at all,
which is how the gradient-free contrast pass is kept structurally separate
from the trained pass.

Broadcasting is deliberately narrow: the second operand of ``add`` and
``multiply`` may have a shape equal to a trailing suffix of the first
operand's shape (it is expanded over the leading axes). Anything richer is
rejected so every backward rule stays easy to audit.

Tapes are single-use: build one per training step, call ``backward`` once,
then discard it. Backward closures hold references to parameter arrays, so
reusing a tape across optimizer updates would differentiate stale state.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import NonFiniteError, ShapeError

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """Dense float64 value with an optional gradient slot.

    ``data`` is a C-contiguous (row-major) array. ``grad`` is either None or
    an array of the same shape, filled by ``backward``. ``node_id`` is the
    index of the tape node that produced this tensor, when there is one.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def assert_finite(self, context: str = "tensor") -> None:
        if not self.is_finite():
            raise NonFiniteError(f"{context} contains NaN or Inf")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    """One recorded operation: its inputs, its output, and a backward rule.

    ``backward`` maps the output gradient to one gradient per input (None for
    inputs that do not participate).
    """

    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor,
                 backward: Callable[[Array], tuple[Array | None, ...]]):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations from one forward pass.

    Inputs of every node precede it in the list, so replaying the list in
    reverse visits each node only after all of its consumers.
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __len__(self) -> int:
        return len(self.nodes)


def _emit(tape: Tape | None, inputs: tuple[Tensor, ...], out_data: Array,
          backward_fn: Callable[[Array], tuple[Array | None, ...]]) -> Tensor:
    recorded = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=recorded)
    if recorded:
        out.node_id = len(tape.nodes)
        tape.nodes.append(TapeNode(inputs, out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every tensor reachable from a scalar loss.

    Tensors not reachable from the loss are left untouched. A loss with no
    tape linkage (built purely from constants) is a no-op.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node_id is None:
        return
    if loss.node_id >= len(tape.nodes) or tape.nodes[loss.node_id].output is not loss:
        raise ValueError("loss was not produced on this tape")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = node.output.grad
        if g is None:
            continue
        for tensor, piece in zip(node.inputs, node.backward(g)):
            if piece is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                # copy: a rule may return the same array for several inputs
                tensor.grad = np.array(piece, dtype=np.float64)
            else:
                tensor.grad += piece


def zero_grads(tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# broadcast helper (suffix-only)
# ---------------------------------------------------------------------------

def _lead_axes(big: tuple[int, ...], small: tuple[int, ...], op: str) -> tuple[int, ...]:
    """Axes of ``big`` over which a suffix-shaped operand is expanded."""
    k = len(big) - len(small)
    if k < 0 or big[k:] != small:
        raise ShapeError(f"{op}: shape {small} is not a trailing suffix of {big}")
    return tuple(range(k))


def _unbroadcast(g: Array, small: tuple[int, ...]) -> Array:
    lead = tuple(range(g.ndim - len(small)))
    return g.sum(axis=lead) if lead else g


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _lead_axes(a.shape, b.shape, "add")
    out = a.data + b.data

    def back(g: Array):
        return g, _unbroadcast(g, b.shape)

    return _emit(tape, (a, b), out, back)


def multiply(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _lead_axes(a.shape, b.shape, "multiply")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def back(g: Array):
        return g * b_data, _unbroadcast(g * a_data, b.shape)

    return _emit(tape, (a, b), out, back)


def scale(x: Tensor, factor: float, tape: Tape | None = None) -> Tensor:
    out = x.data * factor

    def back(g: Array):
        return (g * factor,)

    return _emit(tape, (x,), out, back)


def _swap(x: Array) -> Array:
    return np.swapaxes(x, -1, -2)


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Matrix product; 2-D, or stacked with identical leading axes."""
    if (a.data.ndim < 2 or b.data.ndim != a.data.ndim
            or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]):
        raise ShapeError(f"matmul: shapes do not align: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def back(g: Array):
        return g @ _swap(b_data), _swap(a_data) @ g

    return _emit(tape, (a, b), out, back)


def log_softmax(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Log-softmax over the last axis, stabilized by max subtraction."""
    if x.data.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"log_softmax: need a non-empty last axis, got {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    def back(g: Array):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _emit(tape, (x,), out, back)


def exp(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = np.exp(x.data)

    def back(g: Array):
        return (g * out,)

    return _emit(tape, (x,), out, back)


def gelu(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Exact GELU: x * Phi(x), with Phi the standard normal CDF."""
    data = x.data
    cdf = 0.5 * (1.0 + erf(data * _INV_SQRT2))
    out = data * cdf

    def back(g: Array):
        pdf = np.exp(-0.5 * data * data) * _INV_SQRT_2PI
        return (g * (cdf + data * pdf),)

    return _emit(tape, (x,), out, back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5,
               tape: Tape | None = None) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    d = x.shape[-1:]
    if gain.shape != d or bias.shape != d:
        raise ShapeError(
            f"layer_norm: gain {gain.shape} and bias {bias.shape} must match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    gain_data = gain.data
    n = x.shape[-1]

    def back(g: Array):
        gxhat = g * gain_data
        gx = inv * (gxhat
                    - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        return gx, ggain, gbias

    return _emit(tape, (x, gain, bias), out, back)


def embedding_lookup(table: Tensor, indices, tape: Tape | None = None) -> Tensor:
    """Gather rows of a 2-D table; backward scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_lookup: table must be 2-D, got {table.shape}")
    if idx.ndim != 1:
        raise ShapeError(f"embedding_lookup: indices must be 1-D, got {idx.shape}")
    rows = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= rows):
        raise IndexError(f"embedding_lookup: index out of range for table with {rows} rows")
    out = table.data[idx]

    def back(g: Array):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _emit(tape, (table,), out, back)


def reshape(x: Tensor, shape: Sequence[int], tape: Tape | None = None) -> Tensor:
    new_shape = tuple(shape)
    if math.prod(new_shape) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {new_shape}")
    out = x.data.reshape(new_shape)
    old_shape = x.shape

    def back(g: Array):
        return (g.reshape(old_shape),)

    return _emit(tape, (x,), out, back)


def transpose(x: Tensor, axes: Sequence[int], tape: Tape | None = None) -> Tensor:
    perm = tuple(axes)
    if sorted(perm) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: {perm} is not a permutation of axes of {x.shape}")
    out = np.transpose(x.data, perm)
    inverse = tuple(np.argsort(perm))

    def back(g: Array):
        return (np.transpose(g, inverse),)

    return _emit(tape, (x,), out, back)


def concat_rows(parts: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    """Concatenate along axis 0; all parts share trailing dimensions."""
    if not parts:
        raise ShapeError("concat_rows: need at least one part")
    trailing = parts[0].shape[1:]
    for p in parts:
        if p.shape[1:] != trailing:
            raise ShapeError(
                f"concat_rows: trailing dims differ: {p.shape} vs {parts[0].shape}")
    out = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([p.shape[0] for p in parts])[:-1]

    def back(g: Array):
        return tuple(np.split(g, offsets, axis=0))

    return _emit(tape, tuple(parts), out, back)


def slice_rows(x: Tensor, start: int, stop: int, tape: Tape | None = None) -> Tensor:
    n = x.shape[0]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice_rows: [{start}:{stop}] out of range for {x.shape}")
    out = x.data[start:stop].copy()

    def back(g: Array):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _emit(tape, (x,), out, back)


def take_per_row(x: Tensor, indices, tape: Tape | None = None) -> Tensor:
    """out[j] = x[j, indices[j]] for a 2-D input."""
    idx = np.asarray(indices, dtype=np.int64)
    if x.data.ndim != 2:
        raise ShapeError(f"take_per_row: input must be 2-D, got {x.shape}")
    if idx.shape != (x.shape[0],):
        raise ShapeError(
            f"take_per_row: need one index per row, got {idx.shape} for {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise IndexError(f"take_per_row: index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])
    out = x.data[rows, idx]

    def back(g: Array):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _emit(tape, (x,), out, back)


def sum_all(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = x.data.sum()

    def back(g: Array):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit(tape, (x,), out, back)


def detach(x: Tensor) -> Tensor:
    """Value-identical tensor with no gradient linkage whatsoever."""
    return Tensor(x.data.copy(), requires_grad=False)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias correction; holds first/second moment state per tensor.

    Parameters with no gradient are skipped (frozen or unreachable).
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params)
