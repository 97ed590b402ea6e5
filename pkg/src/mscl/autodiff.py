"""Dense fp64 tensors with reverse-mode differentiation on an explicit tape.

Everything is float64 and row-major. Operations executed while a Tape is
active are recorded in execution order; ``Tape.backward`` replays that
order exactly once in reverse, accumulating gradients into every tensor
that requires them. Running an operation with no active tape is the
inference path: plain forward computation, nothing recorded.
"""

from __future__ import annotations

import threading
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    EmptyInputError,
    InvalidValueError,
    LabelError,
    OptimizerError,
    ShapeError,
    TapeError,
)

PROB_FLOOR = 1e-12  # clamp for probabilities inside log and for vector norms


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, as_tensor(other))

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(value) -> Tensor:
    """Coerce a scalar, sequence, or ndarray to a constant Tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class _Record:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


_state = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations for one unit of work.

    A tape and the tensors it records form a single-threaded unit; distinct
    tapes on distinct threads share nothing mutable (parameters are only
    read during the forward pass and written by exactly one optimizer).
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        if popped is not self:  # pragma: no cover - misuse guard
            raise TapeError("tapes exited out of order")
        return False

    def __len__(self) -> int:
        return len(self._records)

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn) -> None:
        self._records.append(_Record(output, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate .grad on every requires_grad ancestor of ``loss``.

        Traverses the execution order exactly once in reverse. Gradients of
        tensors used more than once are summed. A tape can only run backward
        once; build a fresh tape per step instead of reusing one.
        """
        if loss.data.shape != ():
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if self._consumed:
            raise TapeError("backward already ran on this tape; record a fresh graph")
        self._consumed = True
        if loss.grad is None:
            loss.grad = np.zeros((), dtype=np.float64)
        loss.grad = loss.grad + 1.0
        for rec in reversed(self._records):
            out_grad = rec.output.grad
            if out_grad is None:
                continue
            grads = rec.backward_fn(out_grad)
            for tensor, grad in zip(rec.inputs, grads):
                if grad is None or not tensor.requires_grad:
                    continue
                if tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)
                tensor.grad += grad


def _emit(out_data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = active_tape()
    if tape is not None and requires:
        tape.record(out, inputs, backward_fn)
    return out


# ---------------------------------------------------------------------------
# elementwise and structural operations
# ---------------------------------------------------------------------------


def _sum_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Collapse a broadcast gradient back to the operand's shape."""
    if grad.shape == shape:
        return grad
    if shape == ():
        return grad.sum()
    # only (c,) against (r, c) broadcasting is supported by add/sub
    return grad.sum(axis=0)


def _check_addable(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if len(sa) == 2 and sb == (sa[1],):
        return
    if len(sb) == 2 and sa == (sb[1],):
        return
    raise ShapeError(f"{op} cannot combine shapes {sa} and {sb}")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also broadcasts a scalar or a row vector over a matrix."""
    _check_addable(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return _sum_to_shape(g, a.shape), _sum_to_shape(g, b.shape)

    return _emit(out, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise difference with the same broadcasting rules as add."""
    _check_addable(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return _sum_to_shape(g, a.shape), -_sum_to_shape(g, b.shape)

    return _emit(out, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape (or scalar) tensors."""
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"mul cannot combine shapes {a.shape} and {b.shape}")
    out = a.data * b.data
    ad, bd = a.data, b.data

    def backward(g):
        return _sum_to_shape(g * bd, a.shape), _sum_to_shape(g * ad, b.shape)

    return _emit(out, (a, b), backward)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a Python float (not a tape participant)."""
    factor = float(factor)
    out = a.data * factor

    def backward(g):
        return (g * factor,)

    return _emit(out, (a,), backward)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _emit(out, (a,), backward)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0.0):
        raise InvalidValueError("log needs strictly positive inputs")
    out = np.log(a.data)
    ad = a.data

    def backward(g):
        return (g / ad,)

    return _emit(out, (a,), backward)


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    mask = a.data > 0.0
    out = np.where(mask, a.data, 0.0)

    def backward(g):
        return (g * mask,)

    return _emit(out, (a,), backward)


def sum_all(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out = a.data.sum()
    shape = a.shape

    def backward(g):
        return (np.full(shape, g, dtype=np.float64),)

    return _emit(np.asarray(out), (a,), backward)


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the rows of a matrix, yielding one vector."""
    if a.ndim != 2:
        raise ShapeError(f"mean_rows needs a matrix, got shape {a.shape}")
    rows = a.shape[0]
    if rows == 0:
        raise EmptyInputError("mean_rows over zero rows")
    out = a.data.mean(axis=0)

    def backward(g):
        return (np.broadcast_to(g / rows, a.shape).copy(),)

    return _emit(out, (a,), backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = a.data.reshape(shape)
    orig = a.shape

    def backward(g):
        return (g.reshape(orig),)

    return _emit(out, (a,), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got shape {a.shape}")
    out = a.data.T.copy()

    def backward(g):
        return (g.T.copy(),)

    return _emit(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a [r x k] by b [k x c]."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul cannot multiply shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return _emit(out, (a, b), backward)


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows by index; gradients scatter-add back into the source rows."""
    if a.ndim != 2:
        raise ShapeError(f"gather_rows needs a matrix, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows needs a flat index sequence")
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"row index out of range for {a.shape[0]} rows")
    out = a.data[idx]
    shape = a.shape

    def backward(g):
        grad = np.zeros(shape, dtype=np.float64)
        np.add.at(grad, idx, g)
        return (grad,)

    return _emit(out, (a,), backward)


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack equal-length vectors into the rows of a new matrix."""
    vectors = list(vectors)
    if not vectors:
        raise EmptyInputError("stack_rows of zero vectors")
    length = vectors[0].shape
    if len(length) != 1:
        raise ShapeError("stack_rows needs 1-D tensors")
    for v in vectors:
        if v.shape != length:
            raise ShapeError(f"stack_rows got mixed lengths {length} and {v.shape}")
    out = np.stack([v.data for v in vectors])

    def backward(g):
        return tuple(g[i] for i in range(len(vectors)))

    return _emit(out, tuple(vectors), backward)


def concat_cols(mats: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices with equal row counts along columns."""
    mats = list(mats)
    if not mats:
        raise EmptyInputError("concat_cols of zero matrices")
    rows = mats[0].shape[0] if mats[0].ndim == 2 else None
    for m in mats:
        if m.ndim != 2 or m.shape[0] != rows:
            raise ShapeError("concat_cols needs matrices with equal row counts")
    out = np.concatenate([m.data for m in mats], axis=1)
    widths = [m.shape[1] for m in mats]

    def backward(g):
        grads = []
        start = 0
        for w in widths:
            grads.append(g[:, start:start + w])
            start += w
        return tuple(grads)

    return _emit(out, tuple(mats), backward)


# ---------------------------------------------------------------------------
# model-facing operations
# ---------------------------------------------------------------------------


def _as_rows(x: Tensor) -> tuple[np.ndarray, bool]:
    """View a vector as a one-row matrix; report whether it was 1-D."""
    if x.ndim == 1:
        return x.data.reshape(1, -1), True
    if x.ndim == 2:
        return x.data, False
    raise ShapeError(f"expected a vector or matrix, got shape {x.shape}")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by subtracting each row's maximum."""
    if np.isnan(x.data).any():
        raise InvalidValueError("softmax_rows got NaN input")
    rows, was_1d = _as_rows(x)
    if rows.shape[1] == 0:
        raise EmptyInputError("softmax_rows over zero columns")
    shifted = rows - rows.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    out = probs[0] if was_1d else probs

    def backward(g):
        g2 = g.reshape(probs.shape)
        inner = (g2 * probs).sum(axis=1, keepdims=True)
        gx = probs * (g2 - inner)
        return (gx[0] if was_1d else gx,)

    return _emit(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row standardization to mean 0 / variance 1, then an affine map."""
    if eps <= 0.0:
        raise InvalidValueError("layer_norm needs eps > 0")
    rows, was_1d = _as_rows(x)
    d = rows.shape[1]
    if d == 0:
        raise EmptyInputError("layer_norm over zero features")
    if d < 2:
        raise ShapeError("layer_norm needs at least 2 features per row")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}")
    mu = rows.mean(axis=1, keepdims=True)
    centered = rows - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    normed = gain.data * xhat + bias.data
    out = normed[0] if was_1d else normed
    gdata = gain.data

    def backward(g):
        g2 = g.reshape(xhat.shape)
        gy = g2 * gdata
        gmean = gy.mean(axis=1, keepdims=True)
        gproj = (gy * xhat).mean(axis=1, keepdims=True)
        gx = inv * (gy - gmean - xhat * gproj)
        ggain = (g2 * xhat).sum(axis=0)
        gbias = g2.sum(axis=0)
        return (gx[0] if was_1d else gx), ggain, gbias

    return _emit(out, (x, gain, bias), backward)


def max_pool_rows(xs: Sequence[Tensor]) -> Tensor:
    """Elementwise maximum over a sequence of equal-length vectors.

    Gradient is routed to the argmax element only; ties go to the lowest
    sequence index so the routing is reproducible.
    """
    xs = list(xs)
    if not xs:
        raise EmptyInputError("max_pool_rows over an empty sequence")
    length = xs[0].shape
    if len(length) != 1:
        raise ShapeError("max_pool_rows needs 1-D tensors")
    for x in xs:
        if x.shape != length:
            raise ShapeError(f"max_pool_rows got mixed lengths {length} and {x.shape}")
    stacked = np.stack([x.data for x in xs])
    winner = stacked.argmax(axis=0)  # first maximum = lowest index
    out = stacked[winner, np.arange(length[0])]

    def backward(g):
        grads = []
        for i in range(len(xs)):
            gi = np.where(winner == i, g, 0.0)
            grads.append(gi)
        return tuple(grads)

    return _emit(out, tuple(xs), backward)


def _validate_one_hot(y: np.ndarray) -> None:
    if not np.all((y == 0.0) | (y == 1.0)):
        raise LabelError("labels must contain only 0 and 1")
    if not np.all(y.sum(axis=1) == 1.0):
        raise LabelError("each label row must have exactly one 1")


def cross_entropy_rows(p: Tensor, y: Tensor) -> Tensor:
    """Mean over rows of -sum_j y_ij * log(p_ij), with p floored at 1e-12.

    ``y`` must be one-hot and is treated as data: no gradient flows to it.
    """
    prows, _ = _as_rows(p)
    yrows, _ = _as_rows(y)
    if prows.shape != yrows.shape:
        raise ShapeError(f"prediction/label shapes differ: {p.shape} vs {y.shape}")
    _validate_one_hot(yrows)
    r = prows.shape[0]
    clamped = np.clip(prows, PROB_FLOOR, 1.0)
    out = -(yrows * np.log(clamped)).sum() / r
    live = prows > PROB_FLOOR  # below the floor the clamp flattens the loss

    def backward(g):
        gp = np.where(live, -yrows / clamped, 0.0) * (g / r)
        return gp.reshape(p.shape), None

    return _emit(np.asarray(out), (p, y), backward)


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    """Cosine similarity of two vectors, with norms floored at 1e-12."""
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"cosine_sim needs equal-length vectors, got {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    na = max(float(np.linalg.norm(ad)), PROB_FLOOR)
    nb = max(float(np.linalg.norm(bd)), PROB_FLOOR)
    cos = float(ad @ bd) / (na * nb)
    a_live = np.linalg.norm(ad) > PROB_FLOOR
    b_live = np.linalg.norm(bd) > PROB_FLOOR

    def backward(g):
        ga = bd / (na * nb)
        if a_live:
            ga = ga - cos * ad / (na * na)
        gb = ad / (na * nb)
        if b_live:
            gb = gb - cos * bd / (nb * nb)
        return g * ga, g * gb

    return _emit(np.asarray(cos), (a, b), backward)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments.

    The decay term multiplies the parameter directly and never enters the
    moment estimates. Updates are fully deterministic.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float,
        weight_decay: float = 0.0,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = dict(params)
        self.lr = float(lr)
        self.weight_decay = float(weight_decay)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def step(self) -> None:
        missing = [name for name, p in self.params.items() if p.grad is None]
        if missing:
            raise OptimizerError(f"parameters missing gradients: {', '.join(sorted(missing))}")
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {name: arr.copy() for name, arr in self.m.items()},
            "v": {name: arr.copy() for name, arr in self.v.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        if set(state["m"]) != set(self.params):
            raise OptimizerError("optimizer state does not match the parameter set")
        self.t = int(state["t"])
        self.m = {name: np.asarray(arr, dtype=np.float64).copy() for name, arr in state["m"].items()}
        self.v = {name: np.asarray(arr, dtype=np.float64).copy() for name, arr in state["v"].items()}
