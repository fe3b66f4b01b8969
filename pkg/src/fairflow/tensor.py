"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (row-major, float32 or float64). Every operation has
explicit shape rules and nothing broadcasts implicitly: unless an op documents
otherwise, all tensor operands must have identical shapes and dtypes. Ops that
combine a high-rank tensor with a vector (``add_bias``, ``mul_bias``) or a
matrix (``matmul`` with a shared right operand) are separate, documented ops,
not broadcasting.

Graphs are built per step: differentiable ops append entries to the active
tape, ``backward`` on a scalar loss walks the tape once in reverse and then
retires it. Feeding a tensor from a retired tape into a new differentiable op
is an error, as is calling ``backward`` on the same tape twice. Gradients
accumulate into ``.grad`` until cleared.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


class TensorError(Exception):
    """Base class for engine errors."""


class ShapeError(TensorError):
    """Operands do not conform to an op's shape/dtype rules."""

    def __init__(self, op: str, message: str, shapes: Sequence[tuple] = ()):
        self.op = op
        self.shapes = tuple(shapes)
        detail = f" (shapes: {', '.join(str(s) for s in self.shapes)})" if self.shapes else ""
        super().__init__(f"{op}: {message}{detail}")


class TapeError(TensorError):
    """Violation of the per-step tape discipline."""


class _TapeEntry:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: "Tensor", inputs: tuple["Tensor", ...], backward_fn: Callable):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops; append order is topological."""

    __slots__ = ("entries", "consumed")

    def __init__(self):
        self.entries: list[_TapeEntry] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.entries)


_active_tape: Tape | None = None
_grad_enabled: bool = True


def active_tape() -> Tape | None:
    return _active_tape


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference/metrics)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """Immutable dense value; only ``grad`` mutates after creation."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def constant(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def _check_dtype(op: str, *tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(op, f"mixed dtypes {sorted(str(d) for d in dtypes)}")


def _recording_tape() -> Tape:
    global _active_tape
    if _active_tape is None or _active_tape.consumed:
        _active_tape = Tape()
    return _active_tape


def _result(op: str, out_data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    for t in inputs:
        if t._tape is not None and t._tape.consumed:
            raise TapeError(
                f"{op}: input comes from a retired tape; rebuild the graph for this step"
            )
    out = Tensor(out_data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        tape = _recording_tape()
        out.requires_grad = True
        out._tape = tape
        tape.entries.append(_TapeEntry(out, inputs, backward_fn))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    ``loss`` must be a scalar (shape ``()``). The loss tape is retired
    afterwards; running backward on it again raises ``TapeError``.
    """
    if loss.shape != ():
        raise TensorError(f"backward: loss must be scalar, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        if not loss.requires_grad:
            raise TapeError("backward: loss does not require grad")
        loss.grad = np.ones((), dtype=loss.data.dtype)
        return
    if tape.consumed:
        raise TapeError("backward: tape already consumed; build a fresh graph per step")
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for entry in reversed(tape.entries):
        g = entry.out.grad
        if g is None:
            continue
        grads = entry.backward_fn(g)
        for t, gt in zip(entry.inputs, grads):
            if gt is None or not t.requires_grad:
                continue
            # First write may alias the upstream grad; accumulation allocates a
            # fresh buffer instead of mutating in place, keeping aliases safe.
            t.grad = gt if t.grad is None else t.grad + gt
    tape.consumed = True
    global _active_tape
    if _active_tape is tape:
        _active_tape = None


# ---------------------------------------------------------------------------
# Elementwise ops. Rule: operands share the exact same shape and dtype.
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("add", "operands must have identical shapes", (a.shape, b.shape))
    _check_dtype("add", a, b)
    return _result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("sub", "operands must have identical shapes", (a.shape, b.shape))
    _check_dtype("sub", a, b)
    return _result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError("mul", "operands must have identical shapes", (a.shape, b.shape))
    _check_dtype("mul", a, b)
    return _result("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply every element by the python scalar ``c``."""
    c = float(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def shift(a: Tensor, c: float) -> Tensor:
    """Add the python scalar ``c`` to every element."""
    c = float(c)
    return _result("shift", a.data + c, (a,), lambda g: (g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def log(x: Tensor) -> Tensor:
    """Natural log; input must be strictly positive."""
    if np.any(x.data <= 0):
        raise TensorError("log: input must be strictly positive")
    data = x.data
    return _result("log", np.log(data), (x,), lambda g: (g / data,))


def powc(x: Tensor, exponent: float) -> Tensor:
    """Elementwise ``x ** exponent`` for non-negative ``x`` and ``exponent >= 0``.

    At ``x == 0`` with ``exponent < 1`` the subgradient 0 is used.
    """
    p = float(exponent)
    if p < 0:
        raise TensorError("powc: exponent must be non-negative")
    if np.any(x.data < 0):
        raise TensorError("powc: base must be non-negative")
    data = x.data
    out = data**p

    def _back(g):
        if p == 0.0:
            return (np.zeros_like(data),)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = p * data ** (p - 1.0)
        d = np.where(np.isfinite(d), d, 0.0)
        return (g * d,)

    return _result("powc", out, (x,), _back)


def mask_apply(x: Tensor, mask: np.ndarray) -> Tensor:
    """Elementwise multiply by a constant (non-differentiated) mask array.

    ``mask`` must match ``x`` in shape; typically binary. An all-ones mask is
    a bit-exact identity.
    """
    mask = np.asarray(mask, dtype=x.data.dtype)
    if mask.shape != x.shape:
        raise ShapeError("mask_apply", "mask must match input shape", (x.shape, mask.shape))
    return _result("mask_apply", x.data * mask, (x,), lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# Linear algebra.
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Accepted shape rules:

    - ``(n, k) @ (k, m) -> (n, m)``
    - ``(B, n, k) @ (B, k, m) -> (B, n, m)``  (stacked)
    - ``(B, n, k) @ (k, m) -> (B, n, m)``     (shared right operand)
    """
    _check_dtype("matmul", a, b)
    ad, bd = a.data, b.data
    if ad.ndim == 2 and bd.ndim == 2:
        if ad.shape[1] != bd.shape[0]:
            raise ShapeError("matmul", "inner dimensions differ", (ad.shape, bd.shape))
        out = ad @ bd

        def _back(g):
            return (g @ bd.T, ad.T @ g)

    elif ad.ndim == 3 and bd.ndim == 3:
        if ad.shape[0] != bd.shape[0] or ad.shape[2] != bd.shape[1]:
            raise ShapeError("matmul", "stacked operands do not conform", (ad.shape, bd.shape))
        out = ad @ bd

        def _back(g):
            return (g @ bd.swapaxes(-1, -2), ad.swapaxes(-1, -2) @ g)

    elif ad.ndim == 3 and bd.ndim == 2:
        if ad.shape[2] != bd.shape[0]:
            raise ShapeError("matmul", "inner dimensions differ", (ad.shape, bd.shape))
        out = ad @ bd
        k, m = bd.shape

        def _back(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, k).T @ g.reshape(-1, m)
            return (ga, gb)

    else:
        raise ShapeError("matmul", "unsupported ranks", (ad.shape, bd.shape))
    return _result("matmul", out, (a, b), _back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add the vector ``b`` of length ``d`` along the last axis of ``x``."""
    _check_dtype("add_bias", x, b)
    if b.ndim != 1 or x.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError("add_bias", "need x (..., d) and b (d,)", (x.shape, b.shape))
    d = b.shape[0]
    return _result(
        "add_bias", x.data + b.data, (x, b), lambda g: (g, g.reshape(-1, d).sum(axis=0))
    )


def add_seq(x: Tensor, p: Tensor) -> Tensor:
    """Add the matrix ``p`` of shape ``(T, d)`` to every batch row of ``x (B, T, d)``."""
    _check_dtype("add_seq", x, p)
    if x.ndim != 3 or p.ndim != 2 or x.shape[1:] != p.shape:
        raise ShapeError("add_seq", "need x (B, T, d) and p (T, d)", (x.shape, p.shape))
    return _result("add_seq", x.data + p.data, (x, p), lambda g: (g, g.sum(axis=0)))


def mul_bias(x: Tensor, v: Tensor) -> Tensor:
    """Multiply by the vector ``v`` of length ``d`` along the last axis of ``x``."""
    _check_dtype("mul_bias", x, v)
    if v.ndim != 1 or x.ndim < 1 or x.shape[-1] != v.shape[0]:
        raise ShapeError("mul_bias", "need x (..., d) and v (d,)", (x.shape, v.shape))
    d = v.shape[0]
    xd, vd = x.data, v.data
    return _result(
        "mul_bias",
        xd * vd,
        (x, v),
        lambda g: (g * vd, (g * xd).reshape(-1, d).sum(axis=0)),
    )


def transpose_last2(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError("transpose_last2", "need rank >= 2", (x.shape,))
    return _result(
        "transpose_last2",
        x.data.swapaxes(-1, -2),
        (x,),
        lambda g: (g.swapaxes(-1, -2),),
    )


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError("reshape", "size must be preserved", (x.shape, shape))
    orig = x.shape
    return _result("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(orig),))


# ---------------------------------------------------------------------------
# Reductions and normalizations.
# ---------------------------------------------------------------------------


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis: int | None) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    """Sum all elements (``axis=None`` -> scalar) or along one axis."""
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ShapeError("sum", f"axis {axis} out of range", (x.shape,))
    shape = x.shape
    return _result(
        "sum",
        x.data.sum(axis=axis),
        (x,),
        lambda g: (_expand_reduced(g, shape, axis).copy(),),
    )


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    """Mean of all elements (``axis=None`` -> scalar) or along one axis."""
    if axis is not None and not -x.ndim <= axis < x.ndim:
        raise ShapeError("mean", f"axis {axis} out of range", (x.shape,))
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise ShapeError("mean", "cannot average over zero elements", (x.shape,))
    shape = x.shape
    return _result(
        "mean",
        x.data.mean(axis=axis),
        (x,),
        lambda g: (_expand_reduced(g, shape, axis) / count,),
    )


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``; outputs are positive and sum to 1."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError("softmax", f"axis {axis} out of range", (x.shape,))
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def _back(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _result("softmax", s, (x,), _back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    """``x - logsumexp(x)`` along ``axis``, stabilized by max subtraction."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError("log_softmax", f"axis {axis} out of range", (x.shape,))
    z = x.data - x.data.max(axis=axis, keepdims=True)
    ls = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    s = np.exp(ls)

    def _back(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _result("log_softmax", ls, (x,), _back)


def layernorm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine part)."""
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError("layernorm", "need a non-empty last axis", (x.shape,))
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def _back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _result("layernorm", xhat, (x,), _back)


# ---------------------------------------------------------------------------
# Indexed ops.
# ---------------------------------------------------------------------------


def gather(x: Tensor, idx) -> Tensor:
    """Pick one element per row: ``x (n, C)``, ``idx (n,)`` ints -> ``(n,)``."""
    idx = np.asarray(idx)
    if x.ndim != 2 or idx.ndim != 1 or idx.shape[0] != x.shape[0]:
        raise ShapeError("gather", "need x (n, C) and idx (n,)", (x.shape, idx.shape))
    if not np.issubdtype(idx.dtype, np.integer):
        raise TensorError("gather: idx must be integers")
    n, c = x.shape
    if idx.size and (idx.min() < 0 or idx.max() >= c):
        raise TensorError(f"gather: index out of range for {c} columns")
    rows = np.arange(n)

    def _back(g):
        gx = np.zeros_like(x.data)
        gx[rows, idx] = g
        return (gx,)

    return _result("gather", x.data[rows, idx], (x,), _back)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Row lookup: ``table (V, d)``, integer ``ids`` of any shape -> ``(*ids.shape, d)``."""
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError("embedding_lookup", "table must be (V, d)", (table.shape,))
    if not np.issubdtype(ids.dtype, np.integer):
        raise TensorError("embedding_lookup: ids must be integers")
    v, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= v):
        raise TensorError(f"embedding_lookup: id out of range for vocab of {v}")

    def _back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, d))
        return (gt,)

    return _result("embedding_lookup", table.data[ids], (table,), _back)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` of the last axis."""
    d = x.shape[-1] if x.ndim else 0
    if not (0 <= start < stop <= d):
        raise ShapeError("slice_last", f"bad slice [{start}:{stop}]", (x.shape,))

    def _back(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return _result("slice_last", x.data[..., start:stop], (x,), _back)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` of axis 0."""
    n = x.shape[0] if x.ndim else 0
    if not (0 <= start < stop <= n):
        raise ShapeError("slice_rows", f"bad slice [{start}:{stop}]", (x.shape,))

    def _back(g):
        gx = np.zeros_like(x.data)
        gx[start:stop] = g
        return (gx,)

    return _result("slice_rows", x.data[start:stop], (x,), _back)


def _concat(op: str, parts: Sequence[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError(op, "need at least one part")
    _check_dtype(op, *parts)
    ref = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(ref) or other[:axis] + other[axis + 1 :] != ref[:axis] + ref[axis + 1 :]:
            raise ShapeError(op, "parts differ outside the concat axis", [p.shape for p in parts])
    widths = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + widths)

    def _back(g):
        sl = [slice(None)] * g.ndim
        grads = []
        for i in range(len(widths)):
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _result(op, np.concatenate([p.data for p in parts], axis=axis), tuple(parts), _back)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis; all other axes must match."""
    return _concat("concat_last", parts, axis=parts[0].ndim - 1 if parts else 0)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along axis 0; all other axes must match."""
    return _concat("concat_rows", parts, axis=0)
