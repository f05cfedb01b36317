"""Rank-4 tensors with reverse-mode automatic differentiation.

Every operation on tensors that require gradients is appended to the active
:class:`Tape`.  ``backward(loss)`` walks the tape in reverse recording order
once and then retires it; any later attempt to differentiate through a tensor
recorded on a retired tape raises :class:`ContractError`.

All data is held in numpy arrays in N x C x H x W layout, float64 by default.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_DTYPE = np.float64

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def check_shape(shape: Sequence[int]) -> tuple[int, int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ShapeError(f"expected a rank-4 shape (n, c, h, w), got {shape}")
    if any(s < 1 for s in shape):
        raise ShapeError(f"all extents must be positive, got {shape}")
    return shape  # type: ignore[return-value]


class Node:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: "Tensor", inputs: tuple["Tensor", ...], backward_fn: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Append-only record of differentiable operations.

    A tape can be used as a context manager to isolate a computation (e.g. one
    per thread); otherwise operations land on a per-thread default tape that is
    replaced automatically after each backward pass.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.consumed = False

    def record(self, out: "Tensor", inputs: tuple["Tensor", ...], backward_fn: BackwardFn) -> int:
        if self.consumed:
            raise ContractError("cannot record on a tape that was already used for backward")
        self.nodes.append(Node(out, inputs, backward_fn))
        return len(self.nodes) - 1

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _state().stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state().stack.pop()


class _State(threading.local):
    def __init__(self) -> None:
        self.stack: list[Tape] = [Tape()]
        self.grad_enabled = True


_local = _State()


def _state() -> _State:
    return _local


def current_tape() -> Tape:
    st = _state()
    if st.stack[-1].consumed and len(st.stack) == 1:
        st.stack[0] = Tape()
    return st.stack[-1]


def is_grad_enabled() -> bool:
    return _state().grad_enabled


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable recording; results never require gradients."""
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


class Tensor:
    """Dense N x C x H x W array that can take part in differentiation."""

    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        check_shape(arr.shape)
        self.data: np.ndarray = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self.node_id is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _lift(other, self))

    def __radd__(self, other):
        return add(self, _lift(other, self))

    def __sub__(self, other):
        return sub(self, _lift(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full((1, 1, 1, 1), float(value), dtype=like.dtype))


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an op over ``inputs`` and record it if needed.

    ``backward_fn`` maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor(data)
    if not is_grad_enabled() or not any(t.requires_grad for t in inputs):
        return out
    tape = current_tape()
    for t in inputs:
        if t._tape is not None and t._tape is not tape:
            raise ContractError("input was recorded on a different (or already consumed) tape")
    out.requires_grad = True
    out._tape = tape
    out.node_id = tape.record(out, tuple(inputs), backward_fn)
    return out


# ---------------------------------------------------------------- creation

def zeros(shape: Sequence[int], requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(check_shape(shape), dtype=dtype), requires_grad=requires_grad)


def full(shape: Sequence[int], value: float, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.full(check_shape(shape), value, dtype=dtype), requires_grad=requires_grad)


def randn(
    shape: Sequence[int],
    seed: int | np.random.Generator = 0,
    mean: float = 0.0,
    stddev: float = 1.0,
    requires_grad: bool = False,
    dtype=DEFAULT_DTYPE,
) -> Tensor:
    """Gaussian tensor drawn from numpy's PCG64 generator.

    An integer ``seed`` always yields the same values; a ``Generator`` is
    advanced in place so several draws can share one root stream.
    """
    shape = check_shape(shape)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    data = mean + stddev * rng.standard_normal(shape)
    return Tensor(data.astype(dtype, copy=False), requires_grad=requires_grad)


# ------------------------------------------------------------- elementwise

def _broadcast_b(a: Tensor, b: Tensor) -> None:
    for sa, sb in zip(a.shape, b.shape):
        if sb != sa and sb != 1:
            raise ShapeError(f"cannot broadcast {b.shape} against {a.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    axes = tuple(i for i, (sg, s) in enumerate(zip(g.shape, shape)) if s == 1 and sg != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_b(a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_b(a, b)
    return make_result(a.data - b.data, (a, b), lambda g: (g, -_unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product; ``b`` may broadcast over channels (N,1,H,W) or space (N,C,1,1)."""
    _broadcast_b(a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, _unbroadcast(g * ad, b.shape)))


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return make_result(x.data * factor, (x,), lambda g: (g * factor,))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if (a.shape[0], a.shape[2], a.shape[3]) != (b.shape[0], b.shape[2], b.shape[3]):
        raise ShapeError(f"concat needs matching n, h, w; got {a.shape} and {b.shape}")
    ca = a.shape[1]
    data = np.concatenate([a.data, b.data], axis=1)
    return make_result(data, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def cat(tensors: Sequence[Tensor]) -> Tensor:
    out = tensors[0]
    for t in tensors[1:]:
        out = concat_channels(out, t)
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel slice [{start}:{stop}] out of range for {x.shape}")
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return make_result(x.data[:, start:stop].copy(), (x,), backward)


# ------------------------------------------------------------- activations

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_result(s, (x,), lambda g: (g * s * (1.0 - s),))


def activation(kind: str, x: Tensor) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ContractError(f"unknown activation {kind!r}")


# -------------------------------------------------------------- reductions

def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    total = x.data.sum().reshape(1, 1, 1, 1)
    return make_result(total, (x,), lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape = x.shape
    count = x.data.size
    avg = x.data.mean().reshape(1, 1, 1, 1)
    return make_result(avg, (x,), lambda g: (np.full(shape, g.reshape(()) / count, dtype=g.dtype),))


def reduce(kind: str, x: Tensor) -> Tensor:
    if kind == "sum":
        return sum(x)
    if kind == "mean":
        return mean(x)
    raise ContractError(f"unknown reduction {kind!r}")


def mse(pred: Tensor, target: Tensor) -> Tensor:
    diff = sub(pred, target)
    return mean(mul(diff, diff))


# ---------------------------------------------------------------- backward

def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Differentiate a scalar ``loss`` and retire its tape.

    Returns a map from every reachable leaf tensor with ``requires_grad`` to its
    total derivative; the same array is also stored on ``leaf.grad``.
    """
    if loss.shape != (1, 1, 1, 1):
        raise ContractError(f"backward needs a scalar (1,1,1,1) loss, got {loss.shape}")
    if loss._tape is None or loss.node_id is None:
        raise ContractError("loss is not on a tape (no input requires grad)")
    tape = loss._tape
    if tape.consumed:
        raise ContractError("tape already consumed by a previous backward pass")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
            if inp.is_leaf:
                leaves[key] = inp

    result: dict[Tensor, np.ndarray] = {}
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
        result[leaf] = leaf.grad
    # drop references so intermediate arrays can be freed
    tape.nodes.clear()
    return result
