"""
Minimal dense tensor engine with reverse-mode automatic differentiation.

Tensors wrap float64 numpy arrays. Every differentiable operation is a
``Function`` subclass with a static ``forward`` and ``backward``; calling
``Function.apply`` records the operation on the output tensor so that
``Tensor.backward`` can walk the graph in reverse topological order.

Only the operations the network and the losses need are provided. The one
implicit broadcast is ``add``; every other shape mismatch raises
``ShapeError``.
"""
import logging
from typing import Callable, Iterable, List, Optional, Sequence, Union

import numpy as np

from .errors import ShapeError, ConfigError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]


class Tensor:
    """Dense float64 array that participates in a differentiation graph."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 _ctx: Optional["Function"] = None, name: Optional[str] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self._ctx = _ctx
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def backward(self):
        """
        Back-propagate from this scalar tensor.

        Gradients are added into ``.grad`` of every reachable tensor that
        requires grad, so a second call without ``zero_grad`` doubles them.

        Raises:
            ShapeError: if this tensor holds more than one element
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {self.shape}")

        order = topological_order(self)
        grads = {id(self): np.ones_like(self.data)}

        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            ctx = node._ctx
            if ctx is None:
                continue
            parent_grads = ctx.backward(ctx, g)
            if not isinstance(parent_grads, tuple):
                parent_grads = (parent_grads,)
            for parent, pg in zip(ctx.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # Operator sugar
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

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, power: float):
        return Pow.apply(self, power=power)

    def __truediv__(self, other: float):
        if isinstance(other, Tensor):
            return mul(self, Pow.apply(other, power=-1.0))
        return scale(self, 1.0 / float(other))


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement ``forward(ctx, *arrays, **kwargs)`` returning an
    ndarray and ``backward(ctx, grad)`` returning one gradient (or None)
    per parent.
    """

    @classmethod
    def apply(cls, *args, **kwargs) -> Tensor:
        ctx = cls()
        ctx.parents = tuple(as_tensor(a) for a in args)
        ctx.saved = ()
        out = cls.forward(ctx, *[p.data for p in ctx.parents], **kwargs)
        requires_grad = any(p.requires_grad for p in ctx.parents)
        return Tensor(out, requires_grad=requires_grad, _ctx=ctx if requires_grad else None)

    def save_for_backward(self, *values):
        self.saved = values

    @staticmethod
    def forward(ctx, *args, **kwargs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, grad):
        raise NotImplementedError


def topological_order(root: Tensor) -> List[Tensor]:
    """Tensors reachable from ``root``, every node after all of its inputs."""
    order: List[Tensor] = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
    return order


def unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, dim in enumerate(shape) if dim == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ============================================================================
# Elementwise
# ============================================================================

class Add(Function):
    @staticmethod
    def forward(ctx, a, b):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None
        ctx.save_for_backward(a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(ctx, grad):
        shape_a, shape_b = ctx.saved
        return unbroadcast(grad, shape_a), unbroadcast(grad, shape_b)


class Mul(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.shape != b.shape and a.size != 1 and b.size != 1:
            raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
        ctx.save_for_backward(a, b)
        return a * b

    @staticmethod
    def backward(ctx, grad):
        a, b = ctx.saved
        return unbroadcast(grad * b, a.shape), unbroadcast(grad * a, b.shape)


class Neg(Function):
    @staticmethod
    def forward(ctx, x):
        return -x

    @staticmethod
    def backward(ctx, grad):
        return -grad


class Scale(Function):
    @staticmethod
    def forward(ctx, x, factor: float = 1.0):
        ctx.save_for_backward(factor)
        return x * factor

    @staticmethod
    def backward(ctx, grad):
        (factor,) = ctx.saved
        return grad * factor


class Pow(Function):
    @staticmethod
    def forward(ctx, x, power: float = 1.0):
        ctx.save_for_backward(x, power)
        return x ** power

    @staticmethod
    def backward(ctx, grad):
        x, power = ctx.saved
        return grad * power * x ** (power - 1.0)


class Exp(Function):
    @staticmethod
    def forward(ctx, x):
        out = np.exp(x)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved
        return grad * out


class Sqrt(Function):
    @staticmethod
    def forward(ctx, x):
        out = np.sqrt(x)
        ctx.save_for_backward(out)
        return out

    @staticmethod
    def backward(ctx, grad):
        (out,) = ctx.saved
        safe = np.where(out > 0.0, out, 1.0)
        # zero subgradient where the input was exactly 0
        return np.where(out > 0.0, grad / (2.0 * safe), 0.0)


class Relu(Function):
    @staticmethod
    def forward(ctx, x):
        mask = x > 0.0
        ctx.save_for_backward(mask)
        return np.where(mask, x, 0.0)

    @staticmethod
    def backward(ctx, grad):
        (mask,) = ctx.saved
        return grad * mask


# ============================================================================
# Linear algebra and indexing
# ============================================================================

class Linear(Function):
    @staticmethod
    def forward(ctx, x, w, b=None):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
            raise ShapeError(f"linear: input shape {x.shape} does not conform to weight shape {w.shape}")
        if b is not None and b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias shape {b.shape} does not match weight shape {w.shape}")
        ctx.save_for_backward(x, w)
        out = x @ w
        if b is not None:
            out = out + b
        return out

    @staticmethod
    def backward(ctx, grad):
        x, w = ctx.saved
        gx = grad @ w.T
        gw = x.T @ grad
        if len(ctx.parents) == 3:
            return gx, gw, grad.sum(axis=0)
        return gx, gw


class Gather(Function):
    @staticmethod
    def forward(ctx, x, idx=None):
        idx = np.asarray(idx)
        if not np.issubdtype(idx.dtype, np.integer):
            raise ShapeError(f"gather: index array must be integer, got {idx.dtype}")
        n = x.shape[0]
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise ShapeError(f"gather: index out of range for {n} rows (min {idx.min()}, max {idx.max()})")
        ctx.save_for_backward(x.shape, idx)
        return x[idx]

    @staticmethod
    def backward(ctx, grad):
        shape, idx = ctx.saved
        gx = np.zeros(shape, dtype=np.float64)
        np.add.at(gx, idx, grad)
        return gx


class Reduce(Function):
    MODES = ("sum", "max", "mean")

    @staticmethod
    def forward(ctx, x, axis=None, mode="sum"):
        if mode not in Reduce.MODES:
            raise ConfigError(f"reduce: unknown mode {mode!r}")
        if axis is not None and not -x.ndim <= axis < x.ndim:
            raise ShapeError(f"reduce: axis {axis} is invalid for shape {x.shape}")
        ctx.save_for_backward(x, axis, mode)
        if mode == "sum":
            return x.sum(axis=axis)
        if mode == "mean":
            return x.mean(axis=axis)
        return x.max(axis=axis)

    @staticmethod
    def backward(ctx, grad):
        x, axis, mode = ctx.saved
        if axis is None:
            if mode == "max":
                g = np.zeros_like(x)
                g.reshape(-1)[np.argmax(x)] = grad
                return g
            g = np.broadcast_to(grad, x.shape).copy()
            return g / x.size if mode == "mean" else g

        g = np.expand_dims(grad, axis)
        if mode == "sum":
            return np.broadcast_to(g, x.shape).copy()
        if mode == "mean":
            return np.broadcast_to(g, x.shape) / x.shape[axis]
        # np.argmax returns the first maximum, so ties go to the lowest index
        arg = np.expand_dims(np.argmax(x, axis=axis), axis)
        out = np.zeros_like(x)
        np.put_along_axis(out, arg, g, axis=axis)
        return out


class Concat(Function):
    @staticmethod
    def forward(ctx, a, b):
        if a.shape[:-1] != b.shape[:-1]:
            raise ShapeError(f"concat: shapes {a.shape} and {b.shape} differ before the last axis")
        ctx.save_for_backward(a.shape[-1])
        return np.concatenate([a, b], axis=-1)

    @staticmethod
    def backward(ctx, grad):
        (split,) = ctx.saved
        return grad[..., :split], grad[..., split:]


class Reshape(Function):
    @staticmethod
    def forward(ctx, x, shape=None):
        ctx.save_for_backward(x.shape)
        try:
            return x.reshape(shape)
        except ValueError:
            raise ShapeError(f"cannot reshape {x.shape} to {shape}") from None

    @staticmethod
    def backward(ctx, grad):
        (shape,) = ctx.saved
        return grad.reshape(shape)


# ============================================================================
# Functional API
# ============================================================================

def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Add.apply(a, Neg.apply(b))


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def scale(x, factor: float) -> Tensor:
    return Scale.apply(x, factor=float(factor))


def square(x) -> Tensor:
    return Mul.apply(x, x)


def exp(x) -> Tensor:
    return Exp.apply(x)


def sqrt(x) -> Tensor:
    return Sqrt.apply(x)


def relu(x) -> Tensor:
    return Relu.apply(x)


def linear(x, w, b=None) -> Tensor:
    """out = x @ w (+ b) for x of shape n x c_in and w of shape c_in x c_out."""
    if b is None:
        return Linear.apply(x, w)
    return Linear.apply(x, w, b)


def group_gather(x, idx) -> Tensor:
    """out[i, j, :] = x[idx[i, j], :]; backward scatter-adds into source rows."""
    return Gather.apply(x, idx=np.asarray(idx))


def gather_rows(x, idx) -> Tensor:
    """Select rows of ``x`` by a 1-D index array."""
    return Gather.apply(x, idx=np.asarray(idx).reshape(-1))


def reduce(x, axis: Optional[int] = None, mode: str = "sum") -> Tensor:
    return Reduce.apply(x, axis=axis, mode=mode)


def combine(a, b, mode: str = "add") -> Tensor:
    """Broadcasting sum (``add``) or concatenation on the last axis (``concat_last_axis``)."""
    if mode == "add":
        return Add.apply(a, b)
    if mode == "concat_last_axis":
        return Concat.apply(a, b)
    raise ConfigError(f"combine: unknown mode {mode!r}")


def reshape(x, shape) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def detach(x) -> Tensor:
    return as_tensor(x).detach()


def total(values: Iterable[Tensor]) -> Tensor:
    """Sum of a non-empty sequence of tensors, accumulated left to right."""
    result = None
    for value in values:
        result = value if result is None else add(result, value)
    if result is None:
        raise ConfigError("total() of an empty sequence")
    return result


# ============================================================================
# Gradient checking
# ============================================================================

def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-5) -> float:
    """
    Compare analytic gradients of ``fn(*inputs)`` with central differences.

    Returns the largest per-input relative error
    ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-12).
    """
    for t in inputs:
        t.requires_grad = True
        t.zero_grad()
    out = fn(*inputs)
    out.backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = fn(*inputs).item()
            flat[i] = orig - eps
            minus = fn(*inputs).item()
            flat[i] = orig
            num_flat[i] = (plus - minus) / (2.0 * eps)
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-12)
        err = float(np.linalg.norm(a - numeric) / denom)
        logger.debug("gradient check: shape=%s rel_error=%.3e", t.shape, err)
        worst = max(worst, err)
    return worst
