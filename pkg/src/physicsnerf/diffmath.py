"""Minimal reverse-mode automatic differentiation over dense numpy buffers.

Operations executed while a :class:`Tape` is active are recorded whenever at
least one input requires a gradient. ``backward`` replays the tape in reverse
order exactly once, so gradient accumulation order is fixed by tape position
and results are bit-reproducible.

Broadcasting is limited to tensor-scalar operands; use :func:`broadcast_to`
to expand a tensor explicitly.
"""

from __future__ import annotations

import contextlib
import hashlib
import logging
import math
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    pass


class ParamTensor:
    """Dense real-valued buffer with a lazily allocated gradient slot."""

    __array_priority__ = 1000  # make ndarray <op> ParamTensor defer to us

    def __init__(self, values, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(values, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.values: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def ndim(self) -> int:
        return self.values.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        return self.grad

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"ParamTensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.values)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn", "op")

    def __init__(self, op: str, inputs: tuple[ParamTensor, ...], output: ParamTensor, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive operations for one forward pass."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.visits = 0

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, node: _Node) -> None:
        node.output._tape = self
        self.nodes.append(node)

    def backward(self, loss: ParamTensor) -> None:
        if loss.values.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        if not self.nodes:
            raise RuntimeError("backward: tape is empty")
        # leaves get zero-filled grads so untouched params read as exactly zero
        produced = {id(n.output) for n in self.nodes}
        if id(loss) not in produced:
            raise RuntimeError("backward: loss was not produced on this tape")
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad and id(inp) not in produced:
                    inp.ensure_grad()
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
        self.visits = 0
        for node in reversed(self.nodes):
            self.visits += 1
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if id(inp) in produced:
                    prev = grads.get(id(inp))
                    grads[id(inp)] = ig if prev is None else prev + ig
                else:
                    inp.grad += ig


_TAPE_STACK: list[Tape] = []
_GRAD_ENABLED = [True]


@contextlib.contextmanager
def no_grad():
    """Disable recording within the block."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


_BRANCH_LOG: list = []


@contextlib.contextmanager
def branch_signature():
    """Digest every branch decision taken inside the block.

    Covers the masks of ``relu`` and ``clamp_min`` plus anything passed to
    :func:`note_branch`.  Two evaluations with equal digests lie on the same
    smooth piece of a piecewise-smooth function.
    """
    digest = hashlib.blake2b(digest_size=16)
    _BRANCH_LOG.append(digest)
    try:
        yield digest
    finally:
        _BRANCH_LOG.pop()


def note_branch(decision) -> None:
    """Feed a discrete decision (mask or index array) to the active signature."""
    if _BRANCH_LOG:
        arr = np.ascontiguousarray(decision)
        if arr.dtype == bool:
            arr = np.packbits(arr)
        _BRANCH_LOG[-1].update(str(arr.shape).encode())
        _BRANCH_LOG[-1].update(arr.tobytes())


def current_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: ParamTensor) -> None:
    """Populate ``.grad`` of every leaf reachable from ``loss``."""
    tape = getattr(loss, "_tape", None)
    if tape is None:
        if loss.values.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        raise RuntimeError("backward: loss was not recorded on any tape")
    tape.backward(loss)


def tensor(values, requires_grad: bool = False, dtype=None, name: str | None = None) -> ParamTensor:
    return ParamTensor(values, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, like: ParamTensor | None = None) -> ParamTensor:
    if isinstance(x, ParamTensor):
        return x
    dtype = like.dtype if like is not None else None
    return ParamTensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _make(op: str, value: np.ndarray, inputs: Sequence[ParamTensor], backward_fn: Callable) -> ParamTensor:
    out = ParamTensor(value)
    tape = current_tape()
    if tape is not None and _GRAD_ENABLED[-1] and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape.record(_Node(op, tuple(inputs), out, backward_fn))
    return out


def _check_elementwise(op: str, a: ParamTensor, b: ParamTensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: operand shapes {a.shape} and {b.shape} do not conform")


def _reduce_like(g: np.ndarray, t: ParamTensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


def _pair(a, b):
    if isinstance(a, ParamTensor):
        b = _as_tensor(b, a)
    else:
        a = _as_tensor(a, b)
    return a, b


# element-wise binary ops

def add(a, b) -> ParamTensor:
    a, b = _pair(a, b)
    _check_elementwise("add", a, b)
    return _make("add", a.values + b.values, (a, b),
                 lambda g: (_reduce_like(g, a), _reduce_like(g, b)))


def sub(a, b) -> ParamTensor:
    a, b = _pair(a, b)
    _check_elementwise("sub", a, b)
    return _make("sub", a.values - b.values, (a, b),
                 lambda g: (_reduce_like(g, a), _reduce_like(-g, b)))


def mul(a, b) -> ParamTensor:
    a, b = _pair(a, b)
    _check_elementwise("mul", a, b)
    av, bv = a.values, b.values
    return _make("mul", av * bv, (a, b),
                 lambda g: (_reduce_like(g * bv, a), _reduce_like(g * av, b)))


def div(a, b) -> ParamTensor:
    a, b = _pair(a, b)
    _check_elementwise("div", a, b)
    av, bv = a.values, b.values
    out = av / bv
    return _make("div", out, (a, b),
                 lambda g: (_reduce_like(g / bv, a), _reduce_like(-g * out / bv, b)))


def neg(a: ParamTensor) -> ParamTensor:
    return _make("neg", -a.values, (a,), lambda g: (-g,))


# unary element-wise ops

def sin(a: ParamTensor) -> ParamTensor:
    av = a.values
    return _make("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a: ParamTensor) -> ParamTensor:
    av = a.values
    return _make("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def exp(a: ParamTensor) -> ParamTensor:
    out = np.exp(a.values)
    return _make("exp", out, (a,), lambda g: (g * out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split form avoids overflow warnings for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: ParamTensor) -> ParamTensor:
    out = _sigmoid(a.values)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(np.zeros((), dtype=x.dtype), x)


def softplus(a: ParamTensor) -> ParamTensor:
    av = a.values
    return _make("softplus", _softplus(av), (a,), lambda g: (g * _sigmoid(av),))


def relu(a: ParamTensor) -> ParamTensor:
    av = a.values
    mask = av > 0
    note_branch(mask)
    return _make("relu", np.maximum(av, 0).astype(av.dtype, copy=False), (a,), lambda g: (g * mask,))


maximum0 = relu


def square(a: ParamTensor) -> ParamTensor:
    av = a.values
    return _make("square", av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a: ParamTensor) -> ParamTensor:
    out = np.sqrt(a.values)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def clamp_min(a: ParamTensor, floor: float) -> ParamTensor:
    """max(a, floor); gradient passes only where a > floor."""
    av = a.values
    mask = av > floor
    note_branch(mask)
    out = np.maximum(av, floor).astype(av.dtype, copy=False)
    return _make("clamp_min", out, (a,), lambda g: (g * mask,))


# linear algebra

def matmul(a, b) -> ParamTensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim not in (1, 2) or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: operand shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.values, b.values

    def bwd(g):
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _make("matmul", av @ bv, (a, b), bwd)


def linear(x: ParamTensor, weight: ParamTensor, bias: ParamTensor | None = None) -> ParamTensor:
    """x @ weight + bias, with the bias row repeated over the batch."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"linear: operand shapes {x.shape} and {weight.shape} do not conform")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} does not match weight {weight.shape}")
    xv, wv = x.values, weight.values
    out = xv @ wv
    if bias is not None:
        out += bias.values

    def bwd(g):
        gx = g @ wv.T if x.requires_grad else None
        gw = xv.T @ g if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _make("linear", out, inputs, bwd)


# structural ops

def concat(tensors: Iterable[ParamTensor], axis: int = -1) -> ParamTensor:
    tensors = [_as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        other = [s for i, s in enumerate(t.shape) if i != ax]
        ref = [s for i, s in enumerate(tensors[0].shape) if i != ax]
        if t.ndim != tensors[0].ndim or other != ref:
            raise ShapeError(f"concat: operand shapes {tensors[0].shape} and {t.shape} do not conform")
    out = np.concatenate([t.values for t in tensors], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _make("concat", out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


def reshape(a: ParamTensor, shape) -> ParamTensor:
    src = a.shape
    return _make("reshape", a.values.reshape(shape), (a,), lambda g: (g.reshape(src),))


def broadcast_to(a: ParamTensor, shape) -> ParamTensor:
    """Explicit numpy-style expansion; the backward pass sums over expanded axes."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.values, shape).copy()
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot expand {src} to {shape}") from exc

    def bwd(g):
        lead = g.ndim - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, s in enumerate(src) if s == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _make("broadcast_to", out, (a,), bwd)


def getitem(a: ParamTensor, index) -> ParamTensor:
    src_shape, dtype = a.shape, a.dtype

    def bwd(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make("getitem", a.values[index], (a,), bwd)


def take(a: ParamTensor, indices, axis: int = 0) -> ParamTensor:
    indices = np.asarray(indices, dtype=np.intp)
    src_shape, dtype = a.shape, a.dtype

    def bwd(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, (slice(None),) * (axis % len(src_shape)) + (indices,), g)
        return (full,)

    return _make("take", np.take(a.values, indices, axis=axis), (a,), bwd)


# reductions

def sum(a: ParamTensor, axis: int | None = None) -> ParamTensor:  # noqa: A001
    src = a.shape
    out = a.values.sum(axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make("sum", np.asarray(out, dtype=a.dtype), (a,), bwd)


def mean(a: ParamTensor, axis: int | None = None) -> ParamTensor:
    n = a.size if axis is None else a.shape[axis]
    src = a.shape
    out = a.values.mean(axis=axis)

    def bwd(g):
        g = g / n
        if axis is None:
            return (np.broadcast_to(g, src).astype(a.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).astype(a.dtype),)

    return _make("mean", np.asarray(out, dtype=a.dtype), (a,), bwd)


def cumsum_exclusive(a: ParamTensor, axis: int = -1) -> ParamTensor:
    """Running sum that starts at zero: out[i] = sum(a[:i])."""
    av = a.values
    inc = np.cumsum(av, axis=axis)
    out = inc - av

    def bwd(g):
        # reverse inclusive cumsum, minus own term
        rev = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
        return (rev - g,)

    return _make("cumsum_exclusive", out, (a,), bwd)


# optimizer

class AdamState:
    """First/second moment buffers plus step bookkeeping."""

    def __init__(self, params: Sequence[ParamTensor]):
        self.m = [np.zeros_like(p.values) for p in params]
        self.v = [np.zeros_like(p.values) for p in params]
        self.t = 0
        self.skipped = 0


def adam_step(
    params: Sequence[ParamTensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> bool:
    """Apply one bias-corrected Adam update in place.

    Params without a gradient are treated as having zero gradient. When any
    gradient holds a non-finite value the whole step is skipped, the skip
    counter increments and ``False`` is returned.
    """
    grads = [p.grad if p.grad is not None else np.zeros_like(p.values) for p in params]
    if not all(np.isfinite(g).all() for g in grads):
        state.skipped += 1
        logger.warning("adam_step: non-finite gradient, update skipped (%d so far)", state.skipped)
        return False
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        step = (lr / bc1) * m / (np.sqrt(v / bc2) + eps)
        p.values -= step.astype(p.values.dtype, copy=False)
    return True


def exponential_lr(lr0: float, gamma: float, step: int) -> float:
    """Learning rate after ``step`` per-step decays."""
    return lr0 * math.pow(gamma, step)
