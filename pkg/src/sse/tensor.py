"""Dense 2-D tensors with a reverse-mode autodiff tape.

Every operation returns a new read-only :class:`Tensor`.  When at least one
input is tracked by a :class:`Tape`, the result is appended to that tape
together with a closure that maps the output gradient to input gradients.
Untracked inputs (constants, masks, states during evaluation) never pay the
bookkeeping cost, which keeps forward-only inference cheap.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "ContractError",
    "NumericError",
    "set_precision",
    "get_precision",
    "get_dtype",
    "precision",
    "constant",
    "zeros",
    "matmul",
    "transpose",
    "elementwise",
    "add",
    "mul",
    "sigmoid",
    "tanh",
    "one_minus",
    "scale",
    "add_bias",
    "concat_cols",
    "slice_cols",
    "slice_rows",
    "stack_rows",
    "gather_rows",
    "total",
    "softmax_cross_entropy",
    "backward",
    "grad_check",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(RuntimeError):
    """A caller violated an operation's precondition."""


class NumericError(FloatingPointError):
    """An operation produced NaN or Inf."""


_DTYPES = {32: np.float32, 64: np.float64}
# Extended (x87 80-bit where available) is only used for finite-difference references.
EXTENDED = 80
_ALL_DTYPES = {**_DTYPES, EXTENDED: np.longdouble}
_precision = 64


def extended_available() -> bool:
    return np.finfo(np.longdouble).eps < np.finfo(np.float64).eps


def set_precision(bits: int) -> None:
    global _precision
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64, got {bits}")
    _precision = bits


def get_precision() -> int:
    return _precision


def get_dtype() -> type:
    return _ALL_DTYPES[_precision]


@contextlib.contextmanager
def precision(bits: int) -> Iterator[None]:
    """Temporarily switch the global floating point width."""
    global _precision
    previous = _precision
    set_precision(bits)
    try:
        yield
    finally:
        _precision = previous


@contextlib.contextmanager
def _reference_precision(bits: int) -> Iterator[None]:
    global _precision
    if bits == EXTENDED and not extended_available():
        raise ContractError("extended precision is not available on this platform")
    if bits not in _ALL_DTYPES:
        raise ValueError(f"reference precision must be 32, 64 or {EXTENDED}, got {bits}")
    previous = _precision
    _precision = bits
    try:
        yield
    finally:
        _precision = previous


Backward = Callable[[np.ndarray], Sequence["np.ndarray | _Partial | None"]]


class _Partial:
    """Gradient that touches only ``region`` of an input (row/col slices)."""

    __slots__ = ("region", "value")

    def __init__(self, region, value: np.ndarray):
        self.region = region
        self.value = value


class Tensor:
    """Immutable row-major 2-D array, optionally tracked by a tape."""

    __slots__ = ("data", "tape", "index", "name")

    def __init__(self, data, tape: Tape | None = None, index: int | None = None,
                 name: str | None = None, *, _owned: bool = False):
        if _owned:
            arr = data
        else:
            arr = np.array(data, dtype=get_dtype(), copy=True)
            if arr.ndim == 0:
                arr = arr.reshape(1, 1)
            if arr.ndim != 2:
                raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
            if not np.isfinite(arr).all():
                raise NumericError("tensor constructed with non-finite values")
        arr.flags.writeable = False
        self.data = arr
        self.tape = tape
        self.index = index
        self.name = name

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def tracked(self) -> bool:
        return self.index is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.shape != (1, 1):
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def __repr__(self) -> str:
        tag = f", tape#{self.index}" if self.tracked else ""
        return f"Tensor({self.rows}x{self.cols}{tag})"


class Tape:
    """Append-only record of tracked operations.

    ``nodes[i]`` is ``(op, input indices, backward closure)``; saved
    activations live in the closure.  Build one tape per forward pass.
    """

    def __init__(self):
        self.nodes: list[tuple[str, tuple[int | None, ...], Backward | None]] = []
        self.values: list[Tensor] = []
        self.grads: list[np.ndarray | None] = []
        self.leaves: dict[str, Tensor] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, data, name: str | None = None) -> Tensor:
        """Register a leaf (a parameter) whose gradient we want."""
        t = Tensor(data)
        t.tape, t.index, t.name = self, len(self.nodes), name
        self.nodes.append(("leaf", (), None))
        self.values.append(t)
        if name is not None:
            if name in self.leaves:
                raise ContractError(f"leaf {name!r} watched twice")
            self.leaves[name] = t
        return t

    def record(self, op: str, inputs: Sequence[Tensor], out: np.ndarray,
               backward: Backward) -> Tensor:
        idx = tuple(x.index for x in inputs)
        t = Tensor(out, self, len(self.nodes), _owned=True)
        self.nodes.append((op, idx, backward))
        self.values.append(t)
        return t

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Reverse sweep from a scalar ``loss``; returns gradients of named leaves."""
        if loss.shape != (1, 1):
            raise ContractError(f"backward needs a 1x1 loss, got {loss.shape}")
        if loss.tape is not self:
            raise ContractError("loss was not recorded on this tape")
        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.index] = np.ones((1, 1), dtype=loss.data.dtype)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            op, inputs, fn = self.nodes[i]
            if g is None or fn is None:
                continue
            for j, gi in zip(inputs, fn(g)):
                if j is None or gi is None:
                    continue
                _accumulate(grads, j, gi, self.values[j].shape)
        self.grads = grads
        return {name: self.grad(t) for name, t in self.leaves.items()}

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward loss w.r.t. ``t``; zeros if unreachable."""
        if t.tape is not self:
            raise ContractError("tensor does not belong to this tape")
        g = self.grads[t.index] if t.index < len(self.grads) else None
        if g is None:
            return np.zeros(t.shape, dtype=t.data.dtype)
        return g


def _accumulate(grads, j: int, gi, shape) -> None:
    if isinstance(gi, _Partial):
        if grads[j] is None:
            grads[j] = np.zeros(shape, dtype=gi.value.dtype)
        grads[j][gi.region] += gi.value
    elif grads[j] is None:
        # Closures may return views of saved arrays; own a copy before
        # any in-place accumulation.
        grads[j] = np.array(gi, copy=True)
    else:
        grads[j] += gi


def backward(tape: Tape, loss: Tensor) -> dict[str, np.ndarray]:
    return tape.backward(loss)


# --------------------------------------------------------------------------
# op plumbing


def _tape_of(inputs: Sequence[Tensor]) -> Tape | None:
    tape = None
    for x in inputs:
        if x.tape is not None and x.index is not None:
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands recorded on different tapes")
    return tape


def _finish(op: str, inputs: Sequence[Tensor], out: np.ndarray, backward: Backward) -> Tensor:
    if not np.isfinite(out).all():
        raise NumericError(f"{op} produced non-finite values")
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(out, _owned=True)
    return tape.record(op, inputs, out, backward)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def constant(data) -> Tensor:
    return Tensor(data)


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols), dtype=get_dtype()), _owned=True)


# --------------------------------------------------------------------------
# operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.cols != b.rows:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data
    return _finish("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _finish("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _finish("add", (a, b), a.data + b.data, lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _finish("mul", (a, b), A * B, lambda g: (g * B, g * A))


def sigmoid(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _finish("sigmoid", (a,), s, lambda g: (g * s * (1 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _finish("tanh", (a,), t, lambda g: (g * (1 - t * t),))


def one_minus(a: Tensor) -> Tensor:
    return _finish("one_minus", (a,), 1 - a.data, lambda g: (-g,))


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "one_minus": one_minus,
}


def elementwise(op: str, a: Tensor, b: Tensor | None = None) -> Tensor:
    """Dispatch by name: add, mul (binary) or sigmoid, tanh, one_minus (unary)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    binary = op in ("add", "mul")
    if binary != (b is not None):
        raise ContractError(f"{op} takes {'two operands' if binary else 'one operand'}")
    return fn(a, b) if binary else fn(a)


def scale(a: Tensor, c: float) -> Tensor:
    return _finish("scale", (a,), a.data * c, lambda g: (g * c,))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a 1 x n row vector to every row of x."""
    if bias.rows != 1 or bias.cols != x.cols:
        raise DimensionError(f"add_bias: bias {bias.shape} does not fit {x.shape}")
    return _finish("add_bias", (x, bias), x.data + bias.data,
                   lambda g: (g, g.sum(axis=0, keepdims=True)))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    rows = {p.rows for p in parts}
    if len(rows) != 1:
        raise DimensionError(f"concat_cols: row counts differ {sorted(rows)}")
    edges = np.cumsum([0] + [p.cols for p in parts])
    out = np.concatenate([p.data for p in parts], axis=1)

    def back(g):
        return [g[:, lo:hi] for lo, hi in zip(edges[:-1], edges[1:])]

    return _finish("concat_cols", parts, out, back)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.cols:
        raise DimensionError(f"slice_cols: [{start}:{stop}] outside {x.shape}")
    region = (slice(None), slice(start, stop))
    return _finish("slice_cols", (x,), x.data[region].copy(),
                   lambda g: (_Partial(region, g),))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.rows:
        raise DimensionError(f"slice_rows: [{start}:{stop}] outside {x.shape}")
    region = slice(start, stop)
    return _finish("slice_rows", (x,), x.data[region].copy(),
                   lambda g: (_Partial(region, g),))


def stack_rows(parts: Sequence[Tensor]) -> Tensor:
    cols = {p.cols for p in parts}
    if len(cols) != 1:
        raise DimensionError(f"stack_rows: column counts differ {sorted(cols)}")
    edges = np.cumsum([0] + [p.rows for p in parts])
    out = np.concatenate([p.data for p in parts], axis=0)

    def back(g):
        return [g[lo:hi] for lo, hi in zip(edges[:-1], edges[1:])]

    return _finish("stack_rows", parts, out, back)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup (embedding); gradient scatters back with repeats summed."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.rows):
        bad = idx[(idx < 0) | (idx >= table.rows)][0]
        raise IndexError(f"gather_rows: index {bad} outside table of {table.rows} rows")
    n_rows = table.rows

    def back(g):
        out = np.zeros((n_rows, g.shape[1]), dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return _finish("gather_rows", (table,), table.data[idx], back)


def total(x: Tensor) -> Tensor:
    """Sum of all entries as a 1x1 tensor."""
    shape = x.shape
    return _finish("sum", (x,), x.data.sum().reshape(1, 1),
                   lambda g: (np.full(shape, g[0, 0], dtype=g.dtype),))


def softmax_cross_entropy(logits: Tensor, targets, weights) -> Tensor:
    """Weighted mean of row cross-entropies: sum(w_i CE_i) / sum(w_i).

    Rows with zero weight are never read, so padded positions may hold
    anything finite.
    """
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    weights = np.asarray(weights, dtype=logits.data.dtype).reshape(-1)
    if targets.shape[0] != logits.rows or weights.shape[0] != logits.rows:
        raise DimensionError(
            f"softmax_cross_entropy: {logits.rows} rows but {targets.shape[0]} targets "
            f"and {weights.shape[0]} weights")
    if (weights < 0).any() or not np.isfinite(weights).all():
        raise ContractError("loss weights must be finite and nonnegative")
    rows = np.flatnonzero(weights)
    if rows.size == 0:
        raise ContractError("softmax_cross_entropy: every row is masked out")
    t = targets[rows]
    if t.min() < 0 or t.max() >= logits.cols:
        raise IndexError("softmax_cross_entropy: target outside logit columns")
    w = weights[rows]
    z = logits.data[rows]
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    ce = log_norm - shifted[np.arange(rows.size), t]
    denom = w.sum()
    loss = np.array([[np.dot(w, ce) / denom]], dtype=logits.data.dtype)
    shape = logits.shape

    def back(g):
        p = np.exp(shifted - log_norm[:, None])
        p[np.arange(rows.size), t] -= 1
        p *= (g[0, 0] * w / denom)[:, None]
        return (_Partial(rows, p),) if rows.size < shape[0] else (p,)

    return _finish("softmax_cross_entropy", (logits,), loss, back)


# --------------------------------------------------------------------------
# finite-difference harness


def grad_check(f: Callable[[dict[str, Tensor]], Tensor], params: dict[str, np.ndarray],
               epsilon: float = 1e-5, reference_bits: int | None = None
               ) -> tuple[float, dict[str, float]]:
    """Compare tape gradients with central differences.

    ``f`` maps named parameter tensors to a 1x1 loss and must be
    deterministic.  Returns the worst per-entry relative error
    ``|a - n| / max(|a|, |n|)`` (0 when both are 0) overall and per block.

    The tape gradient is taken at the current precision.  ``reference_bits``
    evaluates only the finite differences at another width; ``EXTENDED``
    lowers their rounding floor (about eps_mach * |f| / epsilon) so entries
    with tiny gradients are not swamped by evaluation noise.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    tape = Tape()
    watched = {k: tape.watch(v, name=k) for k, v in params.items()}
    loss = f(watched)
    if loss.tape is tape:
        analytic = tape.backward(loss)
    else:  # f ignores its parameters
        analytic = {k: np.zeros(np.shape(v)) for k, v in params.items()}

    with _reference_precision(reference_bits or _precision):
        numeric = _central_differences(f, params, epsilon)
    per_block = {}
    for name, n in numeric.items():
        a = analytic[name]
        denom = np.maximum(np.abs(a), np.abs(n))
        diff = np.abs(a - n)
        rel = np.divide(diff, denom, out=np.zeros_like(diff), where=denom > 0)
        per_block[name] = float(rel.max()) if rel.size else 0.0
    worst = max(per_block.values(), default=0.0)
    return worst, per_block


def _central_differences(f, params, epsilon: float) -> dict[str, np.ndarray]:
    base = {k: np.array(v, dtype=get_dtype()) for k, v in params.items()}

    def evaluate(values):
        return f({k: Tensor(v) for k, v in values.items()}).data[0, 0]

    if evaluate(base) != evaluate(base):
        raise ContractError("grad_check needs a deterministic function (disable dropout)")

    out = {}
    for name, arr in base.items():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = evaluate(base)
            flat[i] = orig - epsilon
            down = evaluate(base)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * epsilon)
        out[name] = numeric.astype(np.float64)
    return out
