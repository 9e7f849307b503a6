"""Reverse-mode automatic differentiation over dense float64 arrays.

Each operation records a closure that scatters the output gradient back
to its parents; ``backward`` runs the closures in reverse topological
order. The op set is exactly what the models and losses here need, with
two deliberate restrictions: 64-bit floats everywhere, and no
broadcasting beyond bias addition over the leading axis.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import InvalidInputError, NonFiniteError, ShapeMismatchError

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (teacher forwards, metrics)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    """A float64 array plus an optional backward-graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[], None] | None = None
        self._op = "leaf"

    # -- introspection -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(op={self._op}, shape={self.shape}, requires_grad={self.requires_grad})"

    # -- gradient plumbing ---------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Populate ``grad`` for every requires_grad node reachable from this scalar.

        Leaf gradients accumulate across calls, so batched losses may sum
        per-scene backward passes; call ``zero_grad`` between steps.
        """
        if self.size != 1:
            raise ShapeMismatchError("backward", self.shape)
        if not self.requires_grad:
            return

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    data = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(op)
    out = Tensor(data)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
    return out


# ---------------------------------------------------------------------------
# Core operations


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add; also accepts a trailing-shape bias broadcast over axis 0."""
    a, b = _as_tensor(a), _as_tensor(b)
    bias = False
    if a.shape != b.shape:
        if b.ndim == a.ndim - 1 and b.shape == a.shape[1:]:
            bias = True
        else:
            raise ShapeMismatchError("add", a.shape, b.shape)
    out = _node(a.data + b.data, (a, b), "add")
    if out.requires_grad:

        def backward():
            g = out.grad
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(g.sum(axis=0) if bias else g)

        out._backward = backward
    return out


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product of equal shapes, or scaling by a Python number."""
    a = _as_tensor(a)
    if isinstance(b, (int, float)):
        c = float(b)
        out = _node(a.data * c, (a,), "scale")
        if out.requires_grad:

            def backward():
                a._accumulate(out.grad * c)

            out._backward = backward
        return out

    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError("mul", a.shape, b.shape)
    out = _node(a.data * b.data, (a, b), "mul")
    if out.requires_grad:

        def backward():
            g = out.grad
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)

        out._backward = backward
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    out = _node(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:

        def backward():
            g = out.grad
            if a.requires_grad:
                a._accumulate(g @ b.data.T)
            if b.requires_grad:
                b._accumulate(a.data.T @ g)

        out._backward = backward
    return out


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatchError("transpose", a.shape)
    out = _node(a.data.T, (a,), "transpose")
    if out.requires_grad:

        def backward():
            a._accumulate(out.grad.T)

        out._backward = backward
    return out


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatchError("reshape", a.shape, shape)
    out = _node(a.data.reshape(shape), (a,), "reshape")
    if out.requires_grad:

        def backward():
            a._accumulate(out.grad.reshape(a.shape))

        out._backward = backward
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeMismatchError("concat", ())
    out = _node(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), "concat")
    if out.requires_grad:
        sizes = [t.shape[axis] for t in ts]
        offsets = np.cumsum([0] + sizes)

        def backward():
            g = out.grad
            for t, start, stop in zip(ts, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(int(start), int(stop))
                    t._accumulate(g[tuple(idx)])

        out._backward = backward
    return out


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    ts = [_as_tensor(t) for t in tensors]
    if not ts or any(t.shape != ts[0].shape for t in ts):
        raise ShapeMismatchError("stack", *[t.shape for t in ts])
    out = _node(np.stack([t.data for t in ts]), tuple(ts), "stack")
    if out.requires_grad:

        def backward():
            for i, t in enumerate(ts):
                if t.requires_grad:
                    t._accumulate(out.grad[i])

        out._backward = backward
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= axis < a.ndim and 0 <= start < stop <= a.shape[axis]):
        raise ShapeMismatchError("slice", a.shape, (axis, start, stop))
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = _node(a.data[idx], (a,), "slice")
    if out.requires_grad:

        def backward():
            g = np.zeros_like(a.data)
            g[idx] = out.grad
            a._accumulate(g)

        out._backward = backward
    return out


def gather_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows by index; repeats are allowed and their gradients accumulate."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if a.ndim < 1 or idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise ShapeMismatchError("gather_rows", a.shape, idx.shape)
    out = _node(a.data[idx], (a,), "gather_rows")
    if out.requires_grad:

        def backward():
            g = np.zeros_like(a.data)
            np.add.at(g, idx, out.grad)
            a._accumulate(g)

        out._backward = backward
    return out


def mean_pool(a: Tensor, axis: int = 0) -> Tensor:
    a = _as_tensor(a)
    if not (0 <= axis < a.ndim):
        raise ShapeMismatchError("mean_pool", a.shape, axis)
    n = a.shape[axis]
    out = _node(a.data.mean(axis=axis), (a,), "mean_pool")
    if out.requires_grad:

        def backward():
            a._accumulate(np.repeat(np.expand_dims(out.grad / n, axis), n, axis=axis))

        out._backward = backward
    return out


def max_pool(a: Tensor, axis: int = 0) -> Tensor:
    """Max along an axis; gradient routes to the first (lowest-index) argmax."""
    a = _as_tensor(a)
    if not (0 <= axis < a.ndim):
        raise ShapeMismatchError("max_pool", a.shape, axis)
    argmax = np.argmax(a.data, axis=axis)
    out = _node(a.data.max(axis=axis), (a,), "max_pool")
    if out.requires_grad:

        def backward():
            g = np.zeros_like(a.data)
            np.put_along_axis(
                g, np.expand_dims(argmax, axis), np.expand_dims(out.grad, axis), axis
            )
            a._accumulate(g)

        out._backward = backward
    return out


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = _node(np.maximum(a.data, 0.0), (a,), "relu")
    if out.requires_grad:

        def backward():
            a._accumulate(out.grad * (a.data > 0.0))

        out._backward = backward
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximate GELU with its exact analytic derivative."""
    a = _as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = _node(0.5 * x * (1.0 + t), (a,), "gelu")
    if out.requires_grad:

        def backward():
            di = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
            local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * di
            a._accumulate(out.grad * local)

        out._backward = backward
    return out


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _node(y, (a,), "softmax")
    if out.requires_grad:

        def backward():
            g = out.grad
            a._accumulate((g - (g * y).sum(axis=axis, keepdims=True)) * y)

        out._backward = backward
    return out


def layer_norm(
    a: Tensor,
    gain: Tensor | None = None,
    bias: Tensor | None = None,
    axis: int = -1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize each slice along ``axis`` to zero mean and unit variance.

    Optional ``gain``/``bias`` of shape (a.shape[axis],) apply the usual
    affine transform; folding them into the op keeps the engine free of
    general broadcasting.
    """
    a = _as_tensor(a)
    if eps <= 0:
        raise InvalidInputError("layer_norm eps must be > 0")
    axis = axis % a.ndim
    dim = a.shape[axis]
    for extra in (gain, bias):
        if extra is not None and extra.shape != (dim,):
            raise ShapeMismatchError("layer_norm", a.shape, extra.shape)

    x = np.moveaxis(a.data, axis, -1)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x - mean) * inv
    z = y
    if gain is not None:
        z = z * gain.data
    if bias is not None:
        z = z + bias.data
    parents = tuple(t for t in (a, gain, bias) if t is not None)
    out = _node(np.moveaxis(z, -1, axis), parents, "layer_norm")
    if out.requires_grad:

        def backward():
            g = np.moveaxis(out.grad, axis, -1)
            gy = g * gain.data if gain is not None else g
            if a.requires_grad:
                dx = inv * (
                    gy - gy.mean(axis=-1, keepdims=True) - y * (gy * y).mean(axis=-1, keepdims=True)
                )
                a._accumulate(np.moveaxis(dx, -1, axis))
            reduce_axes = tuple(range(g.ndim - 1))
            if gain is not None and gain.requires_grad:
                gain._accumulate((g * y).sum(axis=reduce_axes))
            if bias is not None and bias.requires_grad:
                bias._accumulate(g.sum(axis=reduce_axes))

        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Fused scalar losses


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError("mse", a.shape, b.shape)
    d = a.data - b.data
    out = _node(np.mean(d * d), (a, b), "mse")
    if out.requires_grad:

        def backward():
            g = out.grad * 2.0 * d / d.size
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(-g)

        out._backward = backward
    return out


def smooth_l1(a: Tensor, b: Tensor, beta: float = 1.0) -> Tensor:
    """Mean smooth L1: 0.5 d^2 / beta inside the kink, |d| - 0.5 beta outside."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError("smooth_l1", a.shape, b.shape)
    if beta <= 0:
        raise InvalidInputError("smooth_l1 beta must be > 0")
    d = a.data - b.data
    quad = np.abs(d) < beta
    elems = np.where(quad, 0.5 * d * d / beta, np.abs(d) - 0.5 * beta)
    out = _node(np.mean(elems), (a, b), "smooth_l1")
    if out.requires_grad:

        def backward():
            local = np.where(quad, d / beta, np.sign(d)) / d.size
            g = out.grad * local
            if a.requires_grad:
                a._accumulate(g)
            if b.requires_grad:
                b._accumulate(-g)

        out._backward = backward
    return out


def cosine_sim(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeMismatchError("cosine_sim", a.shape, b.shape)
    x, y = a.data.reshape(-1), b.data.reshape(-1)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0.0 or ny == 0.0:
        raise NonFiniteError("cosine_sim", "zero-norm input")
    s = float(x @ y) / (nx * ny)
    out = _node(s, (a, b), "cosine_sim")
    if out.requires_grad:

        def backward():
            g = out.grad
            if a.requires_grad:
                a._accumulate((g * (y / (nx * ny) - s * x / (nx * nx))).reshape(a.shape))
            if b.requires_grad:
                b._accumulate((g * (x / (nx * ny) - s * y / (ny * ny))).reshape(b.shape))

        out._backward = backward
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy for integer labels (used by the linear probe)."""
    logits = _as_tensor(logits)
    y = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or y.shape != (logits.shape[0],):
        raise ShapeMismatchError("cross_entropy", logits.shape, y.shape)
    if y.size and (y.min() < 0 or y.max() >= logits.shape[1]):
        raise InvalidInputError("cross_entropy labels out of range")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    out = _node(-np.mean(logp[np.arange(len(y)), y]), (logits,), "cross_entropy")
    if out.requires_grad:

        def backward():
            p = np.exp(logp)
            p[np.arange(len(y)), y] -= 1.0
            logits._accumulate(out.grad * p / len(y))

        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Finite-difference gradient verification


def grad_check(
    f: Callable[[], Tensor],
    inputs: Iterable[Tensor],
    h: float = 1e-5,
    refine_above: float | None = None,
    smooth_rtol: float = 1e-3,
) -> float:
    """Compare ``backward`` gradients of the scalar ``f()`` against central differences.

    ``f`` must close over ``inputs`` and rebuild its expression on every
    call. Returns the maximum relative error with denominator
    max(|analytic|, |numeric|, 1e-8).

    When ``refine_above`` is set, coordinates whose plain error exceeds it
    are re-estimated with a half-step Richardson extrapolation, which
    cancels the leading truncation term. Coordinates where the two step
    sizes disagree by more than ``smooth_rtol`` indicate a kink (an argmax
    flip or a relu crossing) inside the window; no finite-difference
    estimate is meaningful there, so they are excluded. A wrong gradient
    still fails: its two step sizes agree with each other, not with it.
    """
    if not (1e-7 <= h <= 1e-3):
        raise InvalidInputError(f"step h={h} outside [1e-7, 1e-3]")
    inputs = list(inputs)

    for t in inputs:
        # In-place perturbation below requires a contiguous buffer.
        t.data = np.ascontiguousarray(t.data)
        t.zero_grad()
    out = f()
    if out.size != 1:
        raise ShapeMismatchError("grad_check", out.shape)
    out.backward()
    analytic = [
        np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs
    ]

    max_err = 0.0
    with no_grad():

        def central(flat: np.ndarray, i: int, step: float) -> float:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = f().item()
            flat[i] = orig - step
            f_minus = f().item()
            flat[i] = orig
            return (f_plus - f_minus) / (2.0 * step)

        for t, a_grad in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                numeric = central(flat, i, h)
                a = a_grad.reshape(-1)[i]
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                if refine_above is not None and err > refine_above:
                    half = central(flat, i, h / 2.0)
                    if abs(numeric - half) > smooth_rtol * max(
                        abs(numeric), abs(half), 1.0
                    ):
                        continue  # non-smooth inside the window
                    richardson = (4.0 * half - numeric) / 3.0
                    err = abs(a - richardson) / max(abs(a), abs(richardson), 1e-8)
                max_err = max(max_err, err)
    return max_err
