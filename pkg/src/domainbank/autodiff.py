"""Reverse-mode automatic differentiation over dense numpy arrays.

Every differentiable value is a :class:`Tensor`. Operations that involve at
least one tensor with ``requires_grad`` record a :class:`Node` holding the
inputs and a backward rule. :func:`backward` sorts the recorded nodes into a
:class:`Tape` (topological order) and replays the rules in reverse.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@dataclass(eq=False)
class Node:
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str
    nonfinite: bool = False
    # requires_grad of each input when the node was recorded
    needs: tuple[bool, ...] = ()


class Tensor:
    """An n-dimensional real array that can take part in gradient recording."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # arithmetic sugar
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

    def sum(self, axis=None, keepdims: bool = False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def abs(self):
        return absolute(self)

    def square(self):
        return square(self)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, inputs: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        nonfinite = data.dtype.kind == "f" and not np.all(np.isfinite(data))
        out._node = Node(inputs, backward_fn, op, nonfinite,
                         tuple(t.requires_grad for t in inputs))
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or b.ndim == 0 or a.ndim == 0:
        return
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None
    if shape != a.shape and shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} would both need expanding")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary_operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    else:
        a, b = as_tensor(a), as_tensor(b)
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = _binary_operands(a, b)
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (_unbroadcast(g / b.data, a.shape),
                    _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (g / a.data,)

    return _make(out, (a,), backward, "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def square(a: Tensor) -> Tensor:
    return _make(a.data * a.data, (a,), lambda g: (2 * g * a.data,), "square")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name (``add``, ``tanh``, ...)."""
    binary = {"add": add, "sub": sub, "mul": mul, "div": div}
    unary = {"exp": exp, "log": log, "tanh": tanh, "abs": absolute, "square": square,
             "relu": relu, "sigmoid": sigmoid, "neg": neg}
    if op_kind in binary:
        return binary[op_kind](a, b)
    if op_kind == "leaky_relu":
        return leaky_relu(as_tensor(a), 0.2 if b is None else float(b))
    if op_kind in unary:
        return unary[op_kind](as_tensor(a))
    raise ValueError(f"unknown elementwise op {op_kind!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _expand_grad(g: np.ndarray, shape, axes, keepdims: bool) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return _make(np.asarray(out), (a,),
                 lambda g: (_expand_grad(g, a.shape, axes, keepdims),), "sum")


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims) if axes else a.data.copy()
    return _make(np.asarray(out), (a,),
                 lambda g: (_expand_grad(g / count, a.shape, axes, keepdims),), "mean")


def reduce(op_kind: str, a: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    if op_kind == "sum":
        return reduce_sum(a, axes, keepdims)
    if op_kind == "mean":
        return reduce_mean(a, axes, keepdims)
    raise ValueError(f"unknown reduction {op_kind!r}")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    soft = np.exp(out)
    return _make(out, (a,), lambda g: (g - soft * g.sum(axis=-1, keepdims=True),),
                 "log_softmax")


def softmax(a: Tensor) -> Tensor:
    return exp(log_softmax(a))


@dataclass
class Tape:
    """Recorded operations in topological order (inputs before outputs)."""

    nodes: list[tuple[Tensor, Node]] = field(default_factory=list)

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order: list[tuple[Tensor, Node]] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            t, expanded = stack.pop()
            if t._node is None:
                continue
            if expanded:
                order.append((t, t._node))
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for inp in t._node.inputs:
                if inp._node is not None and id(inp) not in seen:
                    stack.append((inp, False))
        return cls(order)

    @property
    def nonfinite_ops(self) -> list[str]:
        return [node.op for _, node in self.nodes if node.nonfinite]

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape | None = None) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Gradients add onto whatever is already stored, so replaying a tape without
    zeroing doubles them.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None:
        tape = Tape.from_output(loss)
    if not loss.requires_grad:
        return tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, node in reversed(tape.nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for inp, need, gi in zip(node.inputs, node.needs, node.backward_fn(g)):
            if gi is None or not need:
                continue
            if inp._node is None:
                gi = np.asarray(gi, dtype=inp.dtype).reshape(inp.shape)
                if inp.grad is None:
                    inp.grad = gi.copy()
                else:
                    inp.grad += gi
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi
    if loss._node is None and loss.requires_grad:
        # loss is itself a leaf
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1
    return tape


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst_index: tuple[int, ...] | None
    analytic: np.ndarray
    numeric: np.ndarray
    message: str = ""

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error < self.tol)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)``."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


def numeric_gradient(f: Callable[[], Tensor], x: Tensor, h: float,
                     indices: Iterable[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` wrt entries of ``x`` (perturbed in place)."""
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.data.reshape(-1)
    it = range(flat.size) if indices is None else (np.ravel_multi_index(i, x.shape) for i in indices)
    with no_grad():
        for k in it:
            orig = flat[k]
            flat[k] = orig + h
            fp = float(f().data)
            flat[k] = orig - h
            fm = float(f().data)
            flat[k] = orig
            grad.reshape(-1)[k] = (fp - fm) / (2 * h)
    return grad


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5,
                   tol: float = 1e-5) -> GradCheckReport:
    """Compare the analytic gradient of scalar ``f(x)`` with central differences."""
    x = Tensor(x.data.copy(), requires_grad=True)
    out = f(x)
    if out.data.size != 1:
        raise ContractError("gradient_check needs a scalar-valued function")
    if not np.all(np.isfinite(out.data)):
        return GradCheckReport(np.inf, tol, None, np.full(x.shape, np.nan),
                               np.full(x.shape, np.nan), "non-finite output at x")
    backward(out)
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
    numeric = numeric_gradient(lambda: f(x), x, h)
    bad = ~np.isfinite(numeric)
    if bad.any():
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        return GradCheckReport(np.inf, tol, loc, analytic, numeric,
                               f"non-finite finite difference at index {loc}")
    err = relative_error(analytic, numeric)
    worst = tuple(int(i) for i in np.unravel_index(np.argmax(np.abs(analytic - numeric)), x.shape))
    return GradCheckReport(err, tol, worst, analytic, numeric)


class Adam:
    """Adaptive-moment optimizer with bias correction.

    Each parameter keeps its own step count, so a parameter that sits out a
    step (``skip_missing``) resumes with correct bias correction. Parameters
    whose id is in ``frozen`` are never moved and their gradients are dropped.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.5,
                 beta2: float = 0.999, eps: float = 1e-8, names: Sequence[str] | None = None):
        self.params = list(params)
        self.names = list(names) if names is not None else [
            p.name or str(i) for i, p in enumerate(self.params)]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.t = [0] * len(self.params)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.frozen: set[int] = set()

    def step(self, skip_missing: bool = False) -> None:
        if not skip_missing:
            for i, p in enumerate(self.params):
                if p.grad is None and id(p) not in self.frozen:
                    raise ContractError(f"parameter {self.names[i]} has no gradient")
        self.step_count += 1
        for i, p in enumerate(self.params):
            if id(p) in self.frozen:
                p.grad = None
                continue
            g = p.grad
            if g is None:
                continue
            self.t[i] += 1
            t = self.t[i]
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype)
            p.grad = None

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def hparams(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step_count": self.step_count, "t": list(self.t)}

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, m, v in zip(self.names, self.m, self.v):
            out[f"m.{name}"] = m
            out[f"v.{name}"] = v
        return out

    def load_state(self, arrays: dict[str, np.ndarray], hparams: dict) -> None:
        for i, name in enumerate(self.names):
            self.m[i][...] = arrays[f"m.{name}"]
            self.v[i][...] = arrays[f"v.{name}"]
        self.step_count = int(hparams["step_count"])
        self.t = [int(x) for x in hparams["t"]]
        self.lr, self.beta1 = hparams["lr"], hparams["beta1"]
        self.beta2, self.eps = hparams["beta2"], hparams["eps"]


def adam_step(params: Sequence[Tensor], state: Adam) -> None:
    """Apply one update of ``state`` (which must own ``params``)."""
    owned = {id(p) for p in state.params}
    if any(id(p) not in owned for p in params):
        raise ContractError("optimizer state does not cover every parameter")
    state.step()
