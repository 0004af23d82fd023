"""Dense-tensor reverse-mode autodiff engine.

A Tensor wraps a numpy array and records the operation that produced it.
Calling backward() on a scalar result walks the graph in reverse
topological order and accumulates gradients into every reachable tensor
that has requires_grad set. Gradient buffers accumulate across backward
calls; the training loop zeroes them explicitly between batches.

Precision follows the underlying arrays: float32 for ordinary training,
float64 for gradient-check builds. Python scalars are lifted to the
partner tensor's dtype so float32 graphs stay float32.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_FLOAT_KINDS = ("f",)

# When enabled, every op output is checked for NaN/Inf (debug aid).
_debug_checks = False

# When grad is disabled, ops produce constant tensors with no graph links.
_grad_enabled = True


def set_debug_checks(enabled):
    """Toggle NaN/Inf detection on every op output."""
    global _debug_checks
    _debug_checks = bool(enabled)


@contextmanager
def no_grad():
    """Disable graph construction inside the block (inference paths)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _check_finite(data, op_name):
    if _debug_checks and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values produced by {op_name}")


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad


class Tensor:
    """A node in the reverse-mode computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in _FLOAT_KINDS:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # -- graph plumbing ----------------------------------------------------

    def _lift(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, grad):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad

    def backward(self):
        """Accumulate d(self)/d(leaf) into .grad of every reachable tensor."""
        if self.data.size != 1:
            raise ValueError(
                f"backward requires a scalar loss, got shape {self.shape}"
            )
        if not self.requires_grad:
            raise ValueError("backward on a tensor with no graph attached")

        # Iterative topological sort; LSTM graphs get too deep for recursion.
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic --------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        out = _make(self.data + other.data, (self, other), "add")
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g, other.shape))
            out._backward = backward
        return out

    __radd__ = __add__

    def __mul__(self, other):
        other = self._lift(other)
        out = _make(self.data * other.data, (self, other), "mul")
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g * other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(g * self.data, other.shape))
            out._backward = backward
        return out

    __rmul__ = __mul__

    def __sub__(self, other):
        other = self._lift(other)
        out = _make(self.data - other.data, (self, other), "sub")
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(-g, other.shape))
            out._backward = backward
        return out

    def __rsub__(self, other):
        return self._lift(other) - self

    def __neg__(self):
        out = _make(-self.data, (self,), "neg")
        if out.requires_grad:
            def backward(g):
                self._accumulate(-g)
            out._backward = backward
        return out

    def __truediv__(self, other):
        other = self._lift(other)
        out = _make(self.data / other.data, (self, other), "div")
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(_unbroadcast(g / other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(
                        _unbroadcast(-g * self.data / (other.data * other.data),
                                     other.shape))
            out._backward = backward
        return out

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = _make(self.data ** exponent, (self,), "pow")
        if out.requires_grad:
            def backward(g):
                self._accumulate(g * exponent * self.data ** (exponent - 1))
            out._backward = backward
        return out

    # -- elementwise functions ----------------------------------------------

    def exp(self):
        out = _make(np.exp(self.data), (self,), "exp")
        if out.requires_grad:
            def backward(g):
                self._accumulate(g * out.data)
            out._backward = backward
        return out

    def log(self):
        out = _make(np.log(self.data), (self,), "log")
        if out.requires_grad:
            def backward(g):
                self._accumulate(g / self.data)
            out._backward = backward
        return out

    def tanh(self):
        out = _make(np.tanh(self.data), (self,), "tanh")
        if out.requires_grad:
            def backward(g):
                self._accumulate(g * (1.0 - out.data * out.data))
            out._backward = backward
        return out

    def sigmoid(self):
        # 1/(1+exp(-x)) computed stably on both tails.
        x = self.data
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        out = _make(y, (self,), "sigmoid")
        if out.requires_grad:
            def backward(g):
                self._accumulate(g * out.data * (1.0 - out.data))
            out._backward = backward
        return out

    def relu(self):
        out = _make(np.maximum(self.data, 0.0), (self,), "relu")
        if out.requires_grad:
            mask = self.data > 0
            def backward(g):
                self._accumulate(g * mask)
            out._backward = backward
        return out

    # -- reductions and shape ops --------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = _make(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum")
        if out.requires_grad:
            in_shape = self.shape
            def backward(g):
                if axis is None:
                    self._accumulate(np.broadcast_to(g, in_shape))
                    return
                if not keepdims:
                    axes = axis if isinstance(axis, tuple) else (axis,)
                    g = np.expand_dims(g, axes)
                self._accumulate(np.broadcast_to(g, in_shape))
            out._backward = backward
        return out

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for a in axes:
                count *= self.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = _make(self.data.reshape(shape), (self,), "reshape")
        if out.requires_grad:
            in_shape = self.shape
            def backward(g):
                self._accumulate(g.reshape(in_shape))
            out._backward = backward
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        out = _make(np.ascontiguousarray(self.data.transpose(axes)), (self,), "transpose")
        if out.requires_grad:
            inverse = np.argsort(axes)
            def backward(g):
                self._accumulate(g.transpose(inverse))
            out._backward = backward
        return out

    def narrow(self, axis, start, length):
        """Slice `length` entries from `start` along `axis`."""
        if start < 0 or start + length > self.shape[axis]:
            raise ValueError(
                f"narrow out of range: axis {axis} has size {self.shape[axis]}, "
                f"requested [{start}, {start + length})")
        index = [slice(None)] * self.data.ndim
        index[axis] = slice(start, start + length)
        index = tuple(index)
        out = _make(np.ascontiguousarray(self.data[index]), (self,), "narrow")
        if out.requires_grad:
            in_shape = self.shape
            def backward(g):
                if self.grad is None:
                    self.grad = np.zeros(in_shape, dtype=self.data.dtype)
                self.grad[index] += g
            out._backward = backward
        return out

    def __matmul__(self, other):
        other = self._lift(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ValueError(
                f"matmul expects 2-D operands, got {self.shape} @ {other.shape}")
        if self.shape[1] != other.shape[0]:
            raise ValueError(
                f"matmul inner dimensions differ: {self.shape} @ {other.shape}")
        out = _make(self.data @ other.data, (self, other), "matmul")
        if out.requires_grad:
            def backward(g):
                if self.requires_grad:
                    self._accumulate(g @ other.data.T)
                if other.requires_grad:
                    other._accumulate(self.data.T @ g)
            out._backward = backward
        return out


def _make(data, parents, op_name):
    _check_finite(data, op_name)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    out._parents = tuple(p for p in parents if p.requires_grad) if out.requires_grad else ()
    out._backward = None
    return out


def concat(tensors, axis=0):
    """Concatenate tensors along an axis; gradients split back."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat of an empty sequence")
    out = _make(np.concatenate([t.data for t in tensors], axis=axis),
                tuple(tensors), "concat")
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        def backward(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    index = [slice(None)] * g.ndim
                    index[axis] = slice(lo, hi)
                    t._accumulate(g[tuple(index)])
        out._backward = backward
    return out


def index_rows(tensor, indices):
    """Gather rows (axis 0); backward scatter-adds, so repeats are safe."""
    indices = np.asarray(indices, dtype=np.intp)
    out = _make(tensor.data[indices], (tensor,), "index_rows")
    if out.requires_grad:
        def backward(g):
            if tensor.grad is None:
                tensor.grad = np.zeros_like(tensor.data)
            np.add.at(tensor.grad, indices, g)
        out._backward = backward
    return out
