"""Dense real tensors plus reverse-mode differentiation over a recorded tape.

Tensors wrap a numpy array of rank 1-3 (rank 0 for scalar reductions).
Operations are module-level functions; while a ``GradTape`` is active they
append a backward rule to the tape, and ``backward(loss)`` replays the tape
in reverse to accumulate gradients into every participating parameter's
``grad`` slot.

Broadcasting is deliberately disabled: binary operations demand identical
shapes, with one documented exception (``add_bias`` adds a rank-1 bias row
to every row of its first argument). Every operation validates that its
result is finite and raises ``NumericError`` otherwise.

A tape and the tensors recorded on it form a single-owner unit: record and
replay from one thread at a time (the active-tape slot is one module-level
cell, not thread-local). Run independent batches on separate tapes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .errors import DimensionError, NumericError, TapeError

DTYPES = {"f32": np.float32, "f64": np.float64}

_active_tape: Optional["GradTape"] = None


def active_tape() -> Optional["GradTape"]:
    return _active_tape


class Tensor:
    """A dense array with an optional accumulated gradient.

    ``requires_grad`` marks leaf parameters; intermediate results receive a
    ``node_id`` on the active tape instead. ``grad`` is populated (and
    accumulated across repeated backward passes) only for leaves that were
    consumed by at least one recorded operation.
    """

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self._tape: Optional[GradTape] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


class GradTape:
    """Ordered record of primitive applications for one backward replay.

    Use as a context manager; operations executed inside record themselves.
    Entries replay in strict reverse creation order, which is a reverse
    topological order of the recorded graph.
    """

    def __init__(self):
        self._entries: list[tuple[int, tuple, Callable]] = []
        self._leaves: dict[int, Tensor] = {}
        self._next_id = 0

    def __enter__(self) -> "GradTape":
        global _active_tape
        if _active_tape is not None:
            raise TapeError("a gradient tape is already active")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = None

    def __len__(self) -> int:
        return len(self._entries)

    def _new_id(self) -> int:
        nid = self._next_id
        self._next_id += 1
        return nid

    def _id_of(self, t: Tensor) -> Optional[int]:
        """Node id of ``t`` on this tape; registers leaves on first use."""
        if t._tape is self and t.node_id is not None:
            return t.node_id
        if t.requires_grad:
            nid = self._new_id()
            t.node_id = nid
            t._tape = self
            self._leaves[nid] = t
            return nid
        return None

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every registered leaf's grad."""
        if loss._tape is not self or loss.node_id is None:
            raise TapeError("backward target was not recorded on this tape")
        if loss.data.size != 1:
            raise TapeError(
                f"backward target must be a scalar, got shape {loss.data.shape}"
            )
        grads: dict[int, np.ndarray] = {
            loss.node_id: np.ones_like(loss.data)
        }
        for out_id, input_ids, bwd in reversed(self._entries):
            g = grads.pop(out_id, None)
            if g is None:
                continue
            for nid, gi in zip(input_ids, bwd(g)):
                if nid is None or gi is None:
                    continue
                acc = grads.get(nid)
                grads[nid] = gi if acc is None else acc + gi
        for nid, leaf in self._leaves.items():
            g = grads.get(nid)
            if g is None:
                continue
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar recorded on a tape."""
    if loss._tape is None:
        raise TapeError("backward on a tensor that is not on any tape")
    loss._tape.backward(loss)


def zero_gradients(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


_strict_finite = True


def set_strict_finite(enabled: bool) -> bool:
    """Toggle the per-operation finiteness check; returns the old value."""
    global _strict_finite
    old = _strict_finite
    _strict_finite = enabled
    return old


def _finite(name: str, arr: np.ndarray) -> np.ndarray:
    if _strict_finite and not np.isfinite(arr).all():
        raise NumericError(f"{name} produced non-finite values")
    return arr


def _record(out: Tensor, inputs: tuple[Tensor, ...], bwd: Callable) -> Tensor:
    tape = _active_tape
    if tape is None:
        return out
    ids = tuple(tape._id_of(t) for t in inputs)
    if all(i is None for i in ids):
        return out
    out.node_id = tape._new_id()
    out._tape = tape
    tape._entries.append((out.node_id, ids, bwd))
    return out


# ---------------------------------------------------------------------------
# primitive operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. ``a`` may be [p,q] or batched [B,p,q]; ``b`` is [q,r]."""
    if b.ndim != 2 or a.ndim not in (2, 3) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(_finite("matmul", a.data @ b.data))
    ad, bd = a.data, b.data

    def bwd(g):
        da = g @ bd.T
        if ad.ndim == 2:
            db = ad.T @ g
        else:
            db = np.tensordot(ad, g, axes=([0, 1], [0, 1]))
        return da, db

    return _record(out, (a, b), bwd)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [B,p,q] x [B,q,r] -> [B,p,r]."""
    if (
        a.ndim != 3
        or b.ndim != 3
        or a.shape[0] != b.shape[0]
        or a.shape[2] != b.shape[1]
    ):
        raise DimensionError(f"bmm: incompatible shapes {a.shape} x {b.shape}")
    out = Tensor(_finite("bmm", a.data @ b.data))
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.transpose(0, 2, 1), ad.transpose(0, 2, 1) @ g

    return _record(out, (a, b), bwd)


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    out = Tensor(_finite("add", a.data + b.data))
    return _record(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    out = Tensor(_finite("sub", a.data - b.data))
    return _record(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    out = Tensor(_finite("mul", a.data * b.data))
    ad, bd = a.data, b.data
    return _record(out, (a, b), lambda g: (g * bd, g * ad))


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """The one sanctioned broadcast: add a rank-1 bias row to every row."""
    if bias.ndim != 1 or a.ndim < 2 or a.shape[-1] != bias.shape[0]:
        raise DimensionError(
            f"add_bias: cannot add bias {bias.shape} to rows of {a.shape}"
        )
    out = Tensor(_finite("add_bias", a.data + bias.data))
    lead = tuple(range(a.ndim - 1))
    return _record(out, (a, bias), lambda g: (g, g.sum(axis=lead)))


_sigmoid_observer: Optional[Callable[[np.ndarray], None]] = None


class observe_sigmoids:
    """Context manager invoking ``callback`` on every sigmoid output.

    Every gate in the models is a sigmoid, so this is the single hook the
    diagnostics layer needs to watch gate ranges.
    """

    def __init__(self, callback: Callable[[np.ndarray], None]):
        self._callback = callback
        self._prev: Optional[Callable] = None

    def __enter__(self):
        global _sigmoid_observer
        self._prev = _sigmoid_observer
        _sigmoid_observer = self._callback
        return self

    def __exit__(self, exc_type, exc, tb):
        global _sigmoid_observer
        _sigmoid_observer = self._prev


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    if _sigmoid_observer is not None:
        _sigmoid_observer(y)
    out = Tensor(_finite("sigmoid", y))
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    out = Tensor(_finite("tanh", y))
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(_finite("scale", a.data * c))
    return _record(out, (a,), lambda g: (g * c,))


def softmax_rows(a: Tensor) -> Tensor:
    """Row-stochastic softmax over the last axis, max-subtracted for stability."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(_finite("softmax_rows", y))

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), bwd)


def log_softmax_rows(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    out = Tensor(_finite("log_softmax_rows", y))
    sm = np.exp(y)

    def bwd(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _record(out, (a,), bwd)


def log(a: Tensor, floor: float = 1e-30) -> Tensor:
    """Natural log with a documented floor clamp so 0 never yields -inf."""
    clamped = np.maximum(a.data, floor)
    out = Tensor(_finite("log", np.log(clamped)))
    return _record(out, (a,), lambda g: (g / clamped,))


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """General concatenation along ``axis``; extents elsewhere must agree."""
    if not parts:
        raise DimensionError("concat: empty part list")
    ref = parts[0].shape
    ax = axis if axis >= 0 else parts[0].ndim + axis
    for p in parts:
        if p.ndim != len(ref) or any(
            i != ax and p.shape[i] != ref[i] for i in range(p.ndim)
        ):
            raise DimensionError(
                f"concat: part shape {p.shape} incompatible with {ref} on axis {ax}"
            )
    out = Tensor(_finite("concat", np.concatenate([p.data for p in parts], axis=ax)))
    extents = [p.shape[ax] for p in parts]
    offsets = np.cumsum([0] + extents)

    def bwd(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(extents)):
            sl[ax] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _record(out, tuple(parts), bwd)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Stack rank-2 parts row-wise, in argument order."""
    for p in parts:
        if p.ndim != 2:
            raise DimensionError(f"concat_rows: rank-2 parts required, got {p.shape}")
    if len({p.shape[1] for p in parts}) > 1:
        raise DimensionError(
            "concat_rows: column mismatch "
            + " vs ".join(str(p.shape) for p in parts)
        )
    return concat(parts, axis=0)


def _slice_axis(name: str, a: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    ax = axis if axis >= 0 else a.ndim + axis
    if ax < 0 or ax >= a.ndim or not (0 <= lo < hi <= a.shape[ax]):
        raise DimensionError(f"{name}: [{lo}:{hi}] invalid for shape {a.shape}")
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(lo, hi)
    sl = tuple(sl)
    out = Tensor(a.data[sl])
    a_shape, a_dtype = a.shape, a.data.dtype

    def bwd(g):
        full = np.zeros(a_shape, dtype=a_dtype)
        full[sl] = g
        return (full,)

    return _record(out, (a,), bwd)


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    """Rows [lo, hi) of the trailing matrix (axis -2)."""
    if a.ndim < 2:
        raise DimensionError(f"slice_rows: rank >= 2 required, got {a.shape}")
    return _slice_axis("slice_rows", a, -2, lo, hi)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    """Columns [lo, hi) along the last axis."""
    return _slice_axis("slice_cols", a, -1, lo, hi)


def transpose_last(a: Tensor) -> Tensor:
    if a.ndim < 2:
        raise DimensionError(f"transpose_last: rank >= 2 required, got {a.shape}")
    out = Tensor(a.data.swapaxes(-1, -2))
    return _record(out, (a,), lambda g: (g.swapaxes(-1, -2),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    out = Tensor(a.data.reshape(shape))
    a_shape = a.shape
    return _record(out, (a,), lambda g: (g.reshape(a_shape),))


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(_finite("sum_all", a.data.sum()))
    a_shape, a_dtype = a.shape, a.data.dtype
    return _record(out, (a,), lambda g: (np.full(a_shape, g, dtype=a_dtype),))


def pick(a: Tensor, idx) -> Tensor:
    """One entry per row of a rank-2 tensor: out[n] = a[n, idx[n]]."""
    idx = np.asarray(idx, dtype=np.int64)
    if a.ndim != 2 or idx.ndim != 1 or idx.shape[0] != a.shape[0]:
        raise DimensionError(f"pick: need [B,K] and [B] indices, got {a.shape}")
    if idx.min() < 0 or idx.max() >= a.shape[1]:
        raise DimensionError(f"pick: index out of range for {a.shape}")
    rows = np.arange(a.shape[0])
    out = Tensor(a.data[rows, idx])
    a_shape, a_dtype = a.shape, a.data.dtype

    def bwd(g):
        full = np.zeros(a_shape, dtype=a_dtype)
        full[rows, idx] = g
        return (full,)

    return _record(out, (a,), bwd)


def dropout(a: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only on the training path."""
    if not 0.0 <= rate < 1.0:
        raise DimensionError(f"dropout: rate {rate} outside [0, 1)")
    if rate == 0.0:
        return a
    mask = (rng.random(a.shape) >= rate).astype(a.data.dtype) / (1.0 - rate)
    out = Tensor(_finite("dropout", a.data * mask))
    return _record(out, (a,), lambda g: (g * mask,))


_ELEMENTWISE_UNARY = {"sigmoid": sigmoid, "tanh": tanh}
_ELEMENTWISE_BINARY = {"add": add, "mul": mul, "sub": sub}


def elementwise(op: str, a: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Dispatch a named pointwise operation: sigmoid/tanh (unary), add/mul/sub."""
    if op in _ELEMENTWISE_UNARY:
        if b is not None:
            raise DimensionError(f"elementwise: {op} takes one operand")
        return _ELEMENTWISE_UNARY[op](a)
    if op in _ELEMENTWISE_BINARY:
        if b is None:
            raise DimensionError(f"elementwise: {op} takes two operands")
        return _ELEMENTWISE_BINARY[op](a, b)
    raise DimensionError(f"elementwise: unknown op {op!r}")
