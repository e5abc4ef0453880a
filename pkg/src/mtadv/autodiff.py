"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every primitive applied to its :class:`Tensor` nodes
in creation order; :meth:`Tape.gradient` then sweeps the record backwards
once, accumulating adjoints.  Only the primitives defined in this module are
differentiable; handing a Tensor to any other numpy routine raises
:class:`UnsupportedPrimitive` while the graph is being built.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import MtadvError

__all__ = [
    "NumericFailure",
    "UnsupportedPrimitive",
    "CancellationError",
    "Tape",
    "Tensor",
    "add",
    "sub",
    "neg",
    "mul",
    "div",
    "matmul",
    "affine",
    "relu",
    "tanh",
    "sqrt",
    "l2_normalize",
    "dot",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "conv2d",
    "gaussian_kernel",
    "value_and_grad",
    "grad_check",
]


class NumericFailure(MtadvError, ArithmeticError):
    code = "NUMERIC_FAILURE"


class UnsupportedPrimitive(MtadvError, TypeError):
    code = "UNSUPPORTED_PRIMITIVE"


class CancellationError(MtadvError, ArithmeticError):
    code = "FD_CANCELLATION"


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    arr.setflags(write=False)
    return arr


class Tensor:
    """One node of a tape: an immutable float64 array plus its provenance."""

    __slots__ = ("value", "tape", "index", "op", "parents", "vjp")

    def __init__(self, value, tape: "Tape", op: str, parents=(), vjp=None):
        self.value = _as_array(value)
        self.tape = tape
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.index = tape._record(self)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        """Flat view of the values (row-major)."""
        return self.value.reshape(-1)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, index={self.index})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # numpy interop: a small set of ufuncs maps onto primitives, the rest are refused
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        table = {
            np.add: add,
            np.subtract: sub,
            np.multiply: mul,
            np.true_divide: div,
            np.matmul: matmul,
            np.negative: neg,
            np.tanh: tanh,
            np.sqrt: sqrt,
        }
        if method == "__call__" and not kwargs and ufunc in table:
            return table[ufunc](*inputs)
        raise UnsupportedPrimitive(f"numpy ufunc {ufunc.__name__!r} is not a differentiable primitive")

    def __array_function__(self, func, types, args, kwargs):
        raise UnsupportedPrimitive(f"numpy function {func.__name__!r} is not a differentiable primitive")

    def __bool__(self):
        raise UnsupportedPrimitive("data-dependent control flow on a Tensor is not supported")


class Tape:
    """Single-use record of primitive applications."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self._consumed = False

    def _record(self, node: Tensor) -> int:
        if self._consumed:
            raise RuntimeError("tape already differentiated; create a new Tape")
        if not np.all(np.isfinite(node.value)):
            raise NumericFailure(f"non-finite value produced at node {len(self.nodes)} ({node.op})")
        self.nodes.append(node)
        return len(self.nodes) - 1

    def variable(self, value) -> Tensor:
        return Tensor(value, self, "input")

    def constant(self, value) -> Tensor:
        return Tensor(value, self, "constant")

    def gradient(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if output.value.size != 1:
            raise ValueError(f"gradient needs a scalar output, got shape {output.shape}")
        self._consumed = True
        adjoints: dict[int, np.ndarray] = {output.index: np.ones_like(output.value)}
        for node in reversed(self.nodes[: output.index + 1]):
            g = adjoints.pop(node.index, None)
            if g is None or node.vjp is None:
                if g is not None:
                    adjoints[node.index] = g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericFailure(f"non-finite adjoint flowing from node {node.index} ({node.op})")
                if parent.index in adjoints:
                    adjoints[parent.index] = adjoints[parent.index] + pg
                else:
                    adjoints[parent.index] = pg
        return [adjoints.get(w.index, np.zeros_like(w.value)) for w in wrt]


def _lift(*args) -> tuple[Tensor, ...]:
    tape = next((a.tape for a in args if isinstance(a, Tensor)), None)
    if tape is None:
        raise TypeError("at least one operand must be a Tensor")
    out = []
    for a in args:
        if isinstance(a, Tensor):
            if a.tape is not tape:
                raise ValueError("operands live on different tapes")
            out.append(a)
        else:
            out.append(tape.constant(a))
    return tuple(out)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _lift(a, b)
    return Tensor(a.value + b.value, a.tape, "add", (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a, b)
    return Tensor(a.value - b.value, a.tape, "sub", (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def neg(a) -> Tensor:
    (a,) = _lift(a)
    return Tensor(-a.value, a.tape, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _lift(a, b)
    av, bv = a.value, b.value
    return Tensor(av * bv, a.tape, "mul", (a, b),
                  lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0):
        raise NumericFailure(f"division by zero at node {len(a.tape.nodes)} (div)")
    out = av / bv
    return Tensor(out, a.tape, "div", (a, b),
                  lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)))


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D and 2-D operands (numpy semantics)."""
    a, b = _lift(a, b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ValueError("matmul supports 1-D and 2-D operands only")

    def vjp(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return Tensor(av @ bv, a.tape, "matmul", (a, b), vjp)


def affine(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias``; ``x`` is a vector or a batch of row vectors."""
    if bias is None:
        x, weight = _lift(x, weight)
        out = matmul(x, weight)
        return out
    x, weight, bias = _lift(x, weight, bias)
    xv, wv = x.value, weight.value

    def vjp(g):
        if xv.ndim == 1:
            return wv @ g, np.outer(xv, g), g
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return Tensor(xv @ wv + bias.value, x.tape, "affine", (x, weight, bias), vjp)


def relu(a) -> Tensor:
    (a,) = _lift(a)
    mask = a.value > 0  # subgradient 0 at the kink
    return Tensor(np.where(mask, a.value, 0.0), a.tape, "relu", (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    (a,) = _lift(a)
    out = np.tanh(a.value)
    return Tensor(out, a.tape, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a) -> Tensor:
    (a,) = _lift(a)
    if np.any(a.value < 0):
        raise NumericFailure(f"sqrt of a negative value at node {len(a.tape.nodes)} (sqrt)")
    out = np.sqrt(a.value)
    safe = np.where(out > 0, out, 1.0)

    # derivative at 0 is taken as 0, mirroring the relu convention
    def vjp(g):
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return Tensor(out, a.tape, "sqrt", (a,), vjp)


def l2_normalize(a, axis: int = -1) -> Tensor:
    (a,) = _lift(a)
    norm = np.sqrt(np.sum(a.value * a.value, axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise NumericFailure(f"l2_normalize of a zero vector at node {len(a.tape.nodes)} (l2_normalize)")
    out = a.value / norm

    def vjp(g):
        # (I - y y^T) g / ||x||
        return ((g - out * np.sum(g * out, axis=axis, keepdims=True)) / norm,)

    return Tensor(out, a.tape, "l2_normalize", (a,), vjp)


def dot(a, b) -> Tensor:
    a, b = _lift(a, b)
    if a.value.ndim != 1 or b.value.ndim != 1:
        raise ValueError("dot expects two vectors")
    return matmul(a, b)


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    (a,) = _lift(a)
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(np.sum(a.value, axis=axis), a.tape, "sum", (a,), vjp)


def mean(a, axis=None) -> Tensor:
    (a,) = _lift(a)
    count = a.value.size if axis is None else a.shape[axis]
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return Tensor(np.mean(a.value, axis=axis), a.tape, "mean", (a,), vjp)


def reshape(a, shape) -> Tensor:
    (a,) = _lift(a)
    src = a.shape
    return Tensor(a.value.reshape(shape), a.tape, "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a) -> Tensor:
    (a,) = _lift(a)
    return Tensor(a.value.T, a.tape, "transpose", (a,), lambda g: (g.T,))


def gaussian_kernel(sigma: float, truncate: float = 3.0) -> np.ndarray:
    """Normalised 1-D Gaussian taps, radius ``ceil(truncate * sigma)``."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.ones(1)
    radius = int(np.ceil(truncate * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


@lru_cache(maxsize=64)
def _conv_matrix(n: int, taps: tuple[float, ...]) -> np.ndarray:
    # dense (n, n) operator for 1-D correlation with reflect padding
    radius = len(taps) // 2
    if radius >= n:
        raise ValueError(f"kernel radius {radius} too large for axis of length {n}")
    eye = np.eye(n)
    padded = np.pad(eye, ((radius, radius), (0, 0)), mode="reflect")
    mat = np.zeros((n, n))
    for k, w in enumerate(taps):
        mat += w * padded[k : k + n]
    mat.setflags(write=False)
    return mat


def conv2d(a, kernel_1d) -> Tensor:
    """Separable fixed-kernel 2-D correlation with reflect padding.

    ``a`` is ``(H, W)`` or ``(H, W, C)``; each channel is filtered with the
    outer product of ``kernel_1d`` with itself.
    """
    (a,) = _lift(a)
    taps = tuple(float(t) for t in np.asarray(kernel_1d, dtype=np.float64).ravel())
    if len(taps) % 2 != 1:
        raise ValueError("kernel length must be odd")
    v = a.value
    if v.ndim not in (2, 3):
        raise ValueError("conv2d expects (H, W) or (H, W, C)")
    kh = _conv_matrix(v.shape[0], taps)
    kw = _conv_matrix(v.shape[1], taps)
    if v.ndim == 2:
        out = kh @ v @ kw.T

        def vjp(g):
            return (kh.T @ g @ kw,)
    else:
        out = np.einsum("ij,jkc,lk->ilc", kh, v, kw)

        def vjp(g):
            return (np.einsum("ji,jkc,kl->ilc", kh, g, kw),)

    return Tensor(out, a.tape, "conv2d", (a,), vjp)


def value_and_grad(
    program: Callable[..., Tensor],
    inputs: Sequence,
    wrt: Sequence[int] | None = None,
) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``program(*inputs)`` and the gradient w.r.t. selected inputs.

    Inputs not listed in ``wrt`` enter the tape as constants.  Returns the
    scalar value and one gradient array per index in ``wrt`` (all inputs when
    ``wrt`` is None).
    """
    wrt = list(range(len(inputs))) if wrt is None else list(wrt)
    tape = Tape()
    nodes = [tape.variable(x) if i in wrt else tape.constant(x) for i, x in enumerate(inputs)]
    out = program(*nodes)
    if not isinstance(out, Tensor):
        raise UnsupportedPrimitive(f"program returned {type(out).__name__}, not a Tensor")
    grads = tape.gradient(out, [nodes[i] for i in wrt])
    return float(out.value), grads


def evaluate(program: Callable[..., Tensor], *inputs) -> float:
    tape = Tape()
    return float(program(*[tape.constant(x) for x in inputs]).value)


def grad_check(program: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    The error per coordinate is ``|analytic - central| / max(1, |central|)``.
    Raises :class:`CancellationError` when central and forward differences
    disagree by more than ten times the ``sqrt(h)`` scale a smooth function
    would show, i.e. when round-off swamps the difference quotient.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64)
    _, (analytic,) = value_and_grad(program, [x])
    f0 = evaluate(program, x)
    flat = x.reshape(-1)
    central = np.empty(flat.size)
    forward = np.empty(flat.size)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = evaluate(program, xp.reshape(x.shape))
        fm = evaluate(program, xm.reshape(x.shape))
        central[i] = (fp - fm) / (2.0 * h)
        forward[i] = (fp - f0) / h
    scale = np.maximum(1.0, np.abs(central))
    gap = np.abs(central - forward) / scale
    if np.max(gap) > 10.0 * np.sqrt(h):
        i = int(np.argmax(gap))
        raise CancellationError(
            f"central/forward differences disagree at coordinate {i} "
            f"({central[i]:.3e} vs {forward[i]:.3e}); step h={h:g} is too small"
        )
    return float(np.max(np.abs(analytic.reshape(-1) - central) / scale))
