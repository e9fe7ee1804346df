"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` is opened as a context manager; every primitive applied to a
tensor that requires gradients while the tape is active is appended to it
together with its backward rule. ``tape.backward(loss)`` then walks the
records in reverse and returns a map from trainable leaf tensors to their
gradients.

Elementwise operations accept equal shapes or a scalar operand only. Bias
terms and other row-wise expansions go through the explicit
:func:`broadcast_to` primitive so every backward rule stays small.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import (
    DivisionDomain,
    NonFiniteEvaluation,
    NonScalarLoss,
    ShapeMismatch,
    TapeConsumed,
)

__all__ = [
    "Tensor", "Tape", "no_grad", "current_tape", "backward",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape",
    "broadcast_to", "concat", "stack", "take", "sum", "mean", "exp", "log", "sqrt",
    "relu", "sigmoid", "tanh", "softmax", "sqnorm", "abs", "square", "clamp_min",
    "finite_diff_check", "gradient_check",
]

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def no_grad():
    """Suspend recording on this thread (a ``None`` sentinel shadows the tape)."""
    stack = _tape_stack()
    stack.append(None)
    try:
        yield
    finally:
        stack.pop()


class Tensor:
    """Immutable dense array of float64 values.

    ``requires_grad`` marks trainable leaves; results of recorded operations
    inherit it. Optimizers replace ``data`` with a fresh array rather than
    writing into the existing buffer.
    """

    __slots__ = ("_data", "requires_grad", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = data
        self.requires_grad = requires_grad
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value) -> None:
        arr = np.array(value, dtype=np.float64, copy=True)
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # internal: takes ownership of a freshly computed array
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.flags.writeable = False
        t._data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return self._data.size

    def numpy(self) -> np.ndarray:
        return self._data

    def item(self) -> float:
        return float(self._data.reshape(-1)[0]) if self._data.size == 1 else float(self._data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __rtruediv__(self, other): return div(other, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, index): return take(self, index)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class _Record:
    __slots__ = ("out", "parents", "rule")

    def __init__(self, out, parents, rule):
        self.out = out
        self.parents = parents
        self.rule = rule


class Tape:
    """Ordered log of recorded primitives; single use, single thread."""

    def __init__(self):
        self.records: list[_Record] = []
        self._produced: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse of nested contexts
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, out: Tensor, parents: tuple, rule) -> None:
        if self.consumed:
            raise TapeConsumed("cannot record on a tape whose backward pass already ran")
        self.records.append(_Record(out, parents, rule))
        self._produced.add(id(out))

    def backward(self, loss: Tensor) -> dict:
        if self.consumed:
            raise TapeConsumed("backward was already called on this tape")
        if loss.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._produced and not loss.requires_grad:
            raise NonScalarLoss("loss was not produced on this tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        leaves: dict[int, Tensor] = {}
        if id(loss) not in self._produced:
            leaves[id(loss)] = loss
        for rec in reversed(self.records):
            g = grads.get(id(rec.out))
            if g is None:
                continue
            parent_grads = rec.rule(g)
            for p, pg in zip(rec.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key not in self._produced:
                    leaves[key] = p
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
        out = {leaves[k]: grads[k] for k in leaves if k in grads}
        out[loss] = np.ones(loss.shape)
        return out


def backward(loss: Tensor, tape: Tape | None = None) -> dict:
    """Run the backward pass of ``tape`` (default: the active tape) from ``loss``."""
    tape = tape if tape is not None else current_tape()
    if tape is None:
        raise NonScalarLoss("no active tape holds this loss")
    return tape.backward(loss)


# ---------------------------------------------------------------------------
# primitive plumbing

def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.array(x, dtype=np.float64))


def _emit(value: np.ndarray, parents: tuple, rule) -> Tensor:
    out = Tensor._wrap(value)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(out, parents, rule)
    return out


def _is_scalar(t: Tensor) -> bool:
    return t.ndim == 0


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # leading batch axes introduced by matmul / broadcast_to
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise binary

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _emit(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "mul")
    av, bv = a.data, b.data
    return _emit(av * bv, (a, b),
                 lambda g: (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_elementwise(a, b, "div")
    av, bv = a.data, b.data
    if np.any(bv == 0.0):
        raise DivisionDomain("elementwise division by exact zero")
    out = av / bv

    def rule(g):
        ga = g / bv
        return _reduce_to(ga, av.shape), _reduce_to(-ga * out, bv.shape)

    return _emit(out, (a, b), rule)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _emit(-a.data, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra and layout

def matmul(a, b) -> Tensor:
    """Matrix product; batch axes must match exactly unless one side is 2-D."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    av, bv = a.data, b.data

    def rule(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _reduce_to(ga, av.shape), _reduce_to(gb, bv.shape)

    return _emit(av @ bv, (a, b), rule)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            return reshape(a, a.shape)
        axes = list(range(a.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatch(f"transpose axes {axes} invalid for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _emit(np.transpose(a.data, axes).copy(), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape).copy()
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _emit(out, (a,), lambda g: (g.reshape(src),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    """Explicit numpy-style expansion; backward sums over the expanded axes."""
    a = _as_tensor(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, tuple(shape)).copy()
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _emit(out, (a,), lambda g: (_reduce_to(g, src),))


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeMismatch("concat of an empty sequence")
    ndim = ts[0].ndim
    ax = axis % ndim if ndim else 0
    for t in ts[1:]:
        if t.ndim != ndim or any(
            s != s0 for i, (s, s0) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise ShapeMismatch(f"concat: shapes {[t.shape for t in ts]} do not conform on axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def rule(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _emit(np.concatenate([t.data for t in ts], axis=ax), ts, rule)


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts or any(t.shape != ts[0].shape for t in ts):
        raise ShapeMismatch("stack needs a non-empty sequence of equal shapes")
    n = len(ts)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _emit(np.stack([t.data for t in ts], axis=axis), ts, rule)


def take(a, index) -> Tensor:
    """Basic (slice / integer) indexing."""
    a = _as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeMismatch(str(exc)) from None
    src = a.shape

    def rule(g):
        full = np.zeros(src)
        full[index] = g
        return (full,)

    return _emit(np.array(out, dtype=np.float64), (a,), rule)


# ---------------------------------------------------------------------------
# reductions

def _norm_axis(a: Tensor, axis):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    for ax in axes:
        if not -a.ndim <= ax < a.ndim:
            raise ShapeMismatch(f"axis {ax} out of range for rank {a.ndim}")
    return tuple(ax % a.ndim for ax in axes)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    axes = _norm_axis(a, axis)
    src = a.shape

    def rule(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, src).copy(),)

    return _emit(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), rule)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(a, axis)
    count = a.size if axes is None else int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def sqnorm(a) -> Tensor:
    """Sum of squares over every entry."""
    a = _as_tensor(a)
    av = a.data
    return _emit(np.asarray(np.sum(av * av)), (a,), lambda g: (2.0 * g * av,))


# ---------------------------------------------------------------------------
# elementwise unary

def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    av = a.data
    if np.any(av <= 0.0):
        raise DivisionDomain("log of a non-positive value")
    return _emit(np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    av = a.data
    if np.any(av < 0.0):
        raise DivisionDomain("sqrt of a negative value")
    out = np.sqrt(av)

    def rule(g):
        if np.any(out == 0.0):
            raise DivisionDomain("sqrt gradient at zero")
        return (0.5 * g / out,)

    return _emit(out, (a,), rule)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    av = a.data
    return _emit(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0.0),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    av = a.data
    # split branches so neither exp overflows
    e = np.exp(-np.abs(av))
    out = np.where(av >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = _as_tensor(a)
    if a.ndim == 0:
        raise ShapeMismatch("softmax needs rank >= 1")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit(out, (a,), rule)


def abs(a) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    av = a.data
    return _emit(np.abs(av), (a,), lambda g: (g * np.sign(av),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    av = a.data
    return _emit(av * av, (a,), lambda g: (2.0 * g * av,))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); the gradient is zero where the floor is active."""
    a = _as_tensor(a)
    av = a.data
    return _emit(np.maximum(av, floor), (a,), lambda g: (g * (av > floor),))


# ---------------------------------------------------------------------------
# finite-difference oracles

def _rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.abs(numeric), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def _scalar_eval(f, x: np.ndarray) -> float:
    with no_grad():
        value = f(Tensor(x)).item()
    if not np.isfinite(value):
        raise NonFiniteEvaluation(f"objective evaluated to {value}")
    return value


def finite_diff_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max relative error between tape gradients of ``f`` at ``x`` and central differences."""
    if step <= 0:
        raise ValueError("step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with Tape() as tape:
        xt = Tensor(base, requires_grad=True)
        out = f(xt)
        if not np.isfinite(out.item()):
            raise NonFiniteEvaluation(f"objective evaluated to {out.item()}")
        analytic = tape.backward(out).get(xt, np.zeros(base.shape))
    numeric = np.zeros(base.size)
    flat = base.reshape(-1)
    for i in range(flat.size):
        xp = flat.copy()
        xp[i] += step
        xm = flat.copy()
        xm[i] -= step
        fp = _scalar_eval(f, xp.reshape(base.shape))
        fm = _scalar_eval(f, xm.reshape(base.shape))
        numeric[i] = (fp - fm) / (2.0 * step)
    return _rel_error(np.asarray(analytic).reshape(-1), numeric)


def gradient_check(loss_fn: Callable[[], Tensor], params: dict, step: float = 1e-5) -> dict:
    """Per-parameter max relative error of tape gradients vs central differences.

    ``loss_fn`` must rebuild the loss from the current ``param.data`` on every
    call; ``params`` maps names to trainable tensors.
    """
    with Tape() as tape:
        loss = loss_fn()
        grads = tape.backward(loss)
    report = {}
    for name, p in params.items():
        analytic = np.asarray(grads.get(p, np.zeros(p.shape))).reshape(-1)
        base = p.data
        numeric = np.zeros(base.size)
        try:
            for i in range(base.size):
                for sign in (1.0, -1.0):
                    pert = base.copy().reshape(-1)
                    pert[i] += sign * step
                    p.data = pert.reshape(base.shape)
                    with no_grad():
                        val = loss_fn().item()
                    if not np.isfinite(val):
                        raise NonFiniteEvaluation(f"loss evaluated to {val} perturbing {name}")
                    numeric[i] += sign * val
                numeric[i] /= 2.0 * step
        finally:
            p.data = base
        report[name] = _rel_error(analytic, numeric)
    return report
