"""Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Values are plain numpy arrays in row-major order. Each operation records its
parents and a backward closure on the tensor it produces; ``Tensor.backward``
walks the tape in reverse topological order. Gradients accumulate into
``.grad`` until explicitly zeroed, so repeated backward passes sum up.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "NumericError",
    "as_tensor",
    "concat",
    "forward_backward",
    "group_norm",
    "leaky_relu",
    "linear",
    "sigmoid",
]


class NumericError(RuntimeError):
    """Raised when a forward pass produces NaN/Inf or shapes are inconsistent."""


class Tensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, values, requires_grad=False):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def _result(values, parents, backward):
        out = Tensor(values)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values)

    def detach(self):
        """Tensor sharing the same values but cut off from the tape."""
        return Tensor(self.values)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.requires_grad:
            self.grad = g if self.grad is None else self.grad + g

    # -- backward pass -------------------------------------------------------

    def backward(self, seed=None):
        if not self.requires_grad:
            raise NumericError("backward() on a tensor that does not require grad")
        if seed is None:
            if self.values.size != 1:
                raise NumericError("backward() without seed requires a scalar loss")
            seed = np.ones_like(self.values)

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self._accumulate(np.asarray(seed, dtype=np.float64))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                node.grad = None  # intermediates do not keep grads

    # -- operator sugar --------------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"


class Parameter(Tensor):
    """Trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, values):
        super().__init__(values, requires_grad=True)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise binary ops ----------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_values = a.values + b.values

    def backward(g):
        a._accumulate(_unbroadcast(g, a.values.shape))
        b._accumulate(_unbroadcast(g, b.values.shape))

    return Tensor._result(out_values, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_values = a.values - b.values

    def backward(g):
        a._accumulate(_unbroadcast(g, a.values.shape))
        b._accumulate(_unbroadcast(-g, b.values.shape))

    return Tensor._result(out_values, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_values = a.values * b.values

    def backward(g):
        a._accumulate(_unbroadcast(g * b.values, a.values.shape))
        b._accumulate(_unbroadcast(g * a.values, b.values.shape))

    return Tensor._result(out_values, (a, b), backward)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out_values = a.values / b.values

    def backward(g):
        a._accumulate(_unbroadcast(g / b.values, a.values.shape))
        b._accumulate(_unbroadcast(-g * out_values / b.values, b.values.shape))

    return Tensor._result(out_values, (a, b), backward)


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)
    out_values = a.values ** exponent

    def backward(g):
        a._accumulate(g * exponent * a.values ** (exponent - 1.0))

    return Tensor._result(out_values, (a,), backward)


# -- elementwise unary ops -----------------------------------------------------


def exp(a):
    a = as_tensor(a)
    out_values = np.exp(a.values)

    def backward(g):
        a._accumulate(g * out_values)

    return Tensor._result(out_values, (a,), backward)


def log(a):
    a = as_tensor(a)
    out_values = np.log(a.values)

    def backward(g):
        a._accumulate(g / a.values)

    return Tensor._result(out_values, (a,), backward)


def sqrt(a):
    a = as_tensor(a)
    out_values = np.sqrt(a.values)

    def backward(g):
        a._accumulate(g * 0.5 / out_values)

    return Tensor._result(out_values, (a,), backward)


def absolute(a):
    a = as_tensor(a)
    out_values = np.abs(a.values)

    def backward(g):
        a._accumulate(g * np.sign(a.values))

    return Tensor._result(out_values, (a,), backward)


def tanh(a):
    a = as_tensor(a)
    out_values = np.tanh(a.values)

    def backward(g):
        a._accumulate(g * (1.0 - out_values * out_values))

    return Tensor._result(out_values, (a,), backward)


def sigmoid(a):
    a = as_tensor(a)
    out_values = 1.0 / (1.0 + np.exp(-a.values))

    def backward(g):
        a._accumulate(g * out_values * (1.0 - out_values))

    return Tensor._result(out_values, (a,), backward)


def leaky_relu(a, slope=0.1):
    a = as_tensor(a)
    neg = a.values < 0.0
    out_values = np.where(neg, slope * a.values, a.values)

    def backward(g):
        a._accumulate(np.where(neg, slope * g, g))

    return Tensor._result(out_values, (a,), backward)


# -- shape ops -------------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    if isinstance(shape, int):
        shape = (shape,)
    elif len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old_shape = a.values.shape
    out_values = a.values.reshape(shape)

    def backward(g):
        a._accumulate(g.reshape(old_shape))

    return Tensor._result(out_values, (a,), backward)


def getitem(a, key):
    a = as_tensor(a)
    out_values = a.values[key]

    def backward(g):
        full = np.zeros_like(a.values)
        np.add.at(full, key, g)
        a._accumulate(full)

    return Tensor._result(out_values, (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out_values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.values.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t._accumulate(piece)

    return Tensor._result(out_values, tuple(tensors), backward)


def broadcast_to(a, shape):
    a = as_tensor(a)
    out_values = np.broadcast_to(a.values, shape)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.values.shape))

    return Tensor._result(out_values, (a,), backward)


# -- reductions ------------------------------------------------------------


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_values = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g, a.values.shape).copy())

    return Tensor._result(out_values, (a,), backward)


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_values = a.values.mean(axis=axis, keepdims=keepdims)
    scale = a.values.size / out_values.size

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        a._accumulate(np.broadcast_to(g / scale, a.values.shape).copy())

    return Tensor._result(out_values, (a,), backward)


def reduce_max(a, axis, keepdims=False):
    """Max over one axis; gradient routes to the first argmax (deterministic)."""
    a = as_tensor(a)
    out_values = a.values.max(axis=axis, keepdims=keepdims)
    idx = a.values.argmax(axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros_like(a.values)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis)
        a._accumulate(full)

    return Tensor._result(out_values, (a,), backward)


# -- fused ops ------------------------------------------------------------


def linear(x, weight, bias=None):
    """y = x @ weight.T (+ bias); weight is [out, in], x is [..., in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.values.shape[-1] != weight.values.shape[1]:
        raise NumericError(
            f"linear: input width {x.values.shape[-1]} does not match "
            f"weight in-width {weight.values.shape[1]}"
        )
    lead = x.values.shape[:-1]
    flat = x.values.reshape(-1, x.values.shape[-1])
    out_values = flat @ weight.values.T
    if bias is not None:
        out_values = out_values + bias.values
    out_values = out_values.reshape(*lead, weight.values.shape[0])
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g_flat = g.reshape(-1, g.shape[-1])
        x._accumulate((g_flat @ weight.values).reshape(x.values.shape))
        weight._accumulate(g_flat.T @ flat)
        if bias is not None:
            bias._accumulate(g_flat.sum(axis=0))

    return Tensor._result(out_values, parents, backward)


def group_norm(x, groups, eps=1e-5):
    """Normalize each group of channels to zero mean / unit variance.

    Statistics are computed per element over the channels of each group
    (the channel axis is last). No affine transform is applied here.
    """
    x = as_tensor(x)
    channels = x.values.shape[-1]
    if channels % groups != 0:
        raise NumericError(f"group_norm: {channels} channels not divisible by {groups} groups")
    gshape = x.values.shape[:-1] + (groups, channels // groups)
    xg = x.values.reshape(gshape)
    mean = xg.mean(axis=-1, keepdims=True)
    centered = xg - mean
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    out_values = normed.reshape(x.values.shape)

    def backward(g):
        gg = g.reshape(gshape)
        gmean = gg.mean(axis=-1, keepdims=True)
        proj = (gg * normed).mean(axis=-1, keepdims=True)
        gx = inv_std * (gg - gmean - normed * proj)
        x._accumulate(gx.reshape(x.values.shape))

    return Tensor._result(out_values, (x,), backward)


def stack_mean(x, axis=1, keepdims=False):
    return reduce_mean(x, axis=axis, keepdims=keepdims)


# -- driver -----------------------------------------------------------------


def forward_backward(graph, x, loss_head):
    """Run `graph` on `x`, reduce with `loss_head`, and backpropagate.

    Returns the scalar loss tensor with all parameter grads filled.
    Gradients accumulate across calls unless zeroed in between.
    """
    out = graph(x)
    loss = loss_head(out) if loss_head is not None else out
    if loss.values.size != 1:
        raise NumericError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not np.isfinite(loss.values).all():
        raise NumericError("non-finite loss")
    loss.backward()
    return loss
