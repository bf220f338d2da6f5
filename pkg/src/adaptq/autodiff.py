"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every vector-Jacobian product is itself written with :class:`Tensor`
operations, so the backward pass can be recorded and differentiated again.
That is what gives Hessian-vector products (``grad`` of ``<grad, v>``).
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_RECORDING = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


@contextlib.contextmanager
def _recording(flag: bool):
    global _RECORDING
    prev = _RECORDING
    _RECORDING = flag
    try:
        yield
    finally:
        _RECORDING = prev


class Tensor:
    """A node in the computation graph.

    ``parents`` holds ``(tensor, vjp)`` pairs where ``vjp`` maps the upstream
    gradient (a Tensor) to this parent's gradient contribution (a Tensor).
    """

    __slots__ = ("data", "parents", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents: tuple = ()
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None) -> Tensor:
        return mean(self, axis=axis)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents) -> Tensor:
    out = Tensor(data)
    if _RECORDING:
        live = tuple((p, f) for p, f in parents if p.requires_grad)
        if live:
            out.parents = live
            out.requires_grad = True
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    axes = tuple(range(extra)) + tuple(
        i + extra for i, n in enumerate(shape) if n == 1 and g.shape[i + extra] != 1
    )
    out = sum_(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))],
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        [(a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))],
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        [(a, lambda g: _unbroadcast(g * b, a.shape)), (b, lambda g: _unbroadcast(g * a, b.shape))],
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data / b.data,
        [
            (a, lambda g: _unbroadcast(g / b, a.shape)),
            (b, lambda g: _unbroadcast(-(g * a) / (b * b), b.shape)),
        ],
    )


def exp(a: Tensor) -> Tensor:
    out = _make(np.exp(a.data), [])
    # vjp refers to the output node itself
    if _RECORDING and a.requires_grad:
        out.parents = ((a, lambda g: g * out),)
        out.requires_grad = True
    return out


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), [(a, lambda g: g / a)])


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def ga(g):
        return _unbroadcast(matmul(g, swap_last(b)), a.shape)

    def gb(g):
        return _unbroadcast(matmul(swap_last(a), g), b.shape)

    return _make(np.matmul(a.data, b.data), [(a, ga), (b, gb)])


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), [(a, lambda g: transpose(g, inv))])


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(a.data.reshape(shape), [(a, lambda g: reshape(g, a.shape))])


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(ax % a.ndim for ax in axes)
            kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
            g = reshape(g, kept)
        elif axis is None:
            g = reshape(g, (1,) * a.ndim)
        return broadcast_to(g, a.shape)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), [(a, vjp)])


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return sum_(a, axis=axis) * (1.0 / n)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _make(np.broadcast_to(a.data, shape).copy(), [(a, lambda g: _unbroadcast(g, a.shape))])


def take(a: Tensor, index: np.ndarray) -> Tensor:
    """Gather ``a.ravel()[index]``; the adjoint is :func:`scatter_add`."""
    index = np.asarray(index)
    return _make(a.data.ravel()[index], [(a, lambda g: reshape(scatter_add(g, index, a.size), a.shape))])


def scatter_add(g: Tensor, index: np.ndarray, size: int) -> Tensor:
    out = np.zeros(size)
    np.add.at(out, index.ravel(), g.data.ravel())
    return _make(out, [(g, lambda h: take(h, index))])


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


def relu(a: Tensor) -> Tensor:
    # the mask is piecewise constant, so it carries no gradient of its own
    return a * Tensor((a.data > 0).astype(np.float64))


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p, _ in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    inputs: Sequence[Tensor],
    create_graph: bool = False,
    seed: Tensor | None = None,
) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to ``inputs``.

    With ``create_graph=True`` the returned gradients are themselves graph
    nodes and can be differentiated again.
    """
    if seed is None:
        if output.size != 1:
            raise ValueError("grad of a non-scalar output needs an explicit seed")
        seed = Tensor(np.ones_like(output.data))
    grads: dict[int, Tensor] = {id(output): seed}
    with _recording(create_graph):
        for node in reversed(_toposort(output)):
            g = grads.get(id(node))
            if g is None:
                continue
            for parent, vjp in node.parents:
                contrib = vjp(g)
                key = id(parent)
                grads[key] = contrib if key not in grads else grads[key] + contrib
    zero = [Tensor(np.zeros_like(t.data)) for t in inputs]
    return [grads.get(id(t), z) for t, z in zip(inputs, zero)]


def numeric_grad(f: Callable[[], float], param: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Central finite differences of ``f`` with respect to ``param.data``."""
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out.reshape(-1)[i] = (fp - fm) / (2 * eps)
    return out


def hvp(f: Callable[[Tensor], Tensor], w: Tensor, v) -> np.ndarray:
    """Hessian-vector product of scalar ``f`` at ``w`` by double backward."""
    v = np.asarray(v, dtype=np.float64).reshape(w.shape)
    (g,) = grad(f(w), [w], create_graph=True)
    (hv,) = grad(sum_(g * Tensor(v)), [w])
    return hv.data
