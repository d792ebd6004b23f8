"""Dense tensors with reverse-mode automatic differentiation.

Every op records its parents and a closure mapping the output gradient to
parent gradients. ``Tensor.backward`` walks the graph in reverse topological
order; leaf gradients accumulate across calls until cleared.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from sdconv import kernels
from sdconv.errors import ContractError, DataError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            if isinstance(data, (np.ndarray, np.generic)) and np.issubdtype(data.dtype, np.floating):
                dtype = data.dtype
            else:
                dtype = np.float32
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- autodiff --------------------------------------------------------
    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            raise ContractError("backward() called on a tensor that does not require grad")

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operator sugar --------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def abs(self):
        return tabs(self)


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _result(data, parents, backward):
    out = Tensor(data, dtype=data.dtype)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _pair(a, b):
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    if a_t and not b_t:
        b = Tensor(b, dtype=a.dtype)
    elif b_t and not a_t:
        a = Tensor(a, dtype=b.dtype)
    elif not a_t and not b_t:
        a, b = Tensor(a), Tensor(b)
    return a, b


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_axis(axis, ndim):
    axes = axis if isinstance(axis, tuple) else (axis,)
    for ax in axes:
        if ax is not None and not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for a {ndim}-d tensor")


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _pair(a, b)

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape)
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _result(a.data / b.data, (a, b), backward)


def neg(a):
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent):
    exponent = float(exponent)
    out = a.data ** a.dtype.type(exponent)

    def backward(g):
        return (g * a.dtype.type(exponent) * a.data ** a.dtype.type(exponent - 1),)

    return _result(out, (a,), backward)


def exp(a):
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a):
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def tabs(a):
    # sign(0) == 0 is the subgradient used at the origin
    sign = np.sign(a.data)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


def _sigmoid(x):
    half = x.dtype.type(0.5)
    return half * (np.tanh(half * x) + 1)


def sigmoid(a):
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def relu(a):
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: (g * mask,))


def relu6(a):
    mask = (a.data > 0) & (a.data < 6)
    return _result(np.clip(a.data, 0, 6), (a,), lambda g: (g * mask,))


def round_ste(a):
    """Round to {0, 1} with ties going up; gradient passes straight through."""
    out = (a.data >= 0.5).astype(a.dtype)
    return _result(out, (a,), lambda g: (g,))


# -- reductions & shape -----------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    _check_axis(axis, a.ndim)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _result(np.asarray(out, dtype=a.dtype), (a,), backward)


def mean(a, axis=None, keepdims=False):
    _check_axis(axis, a.ndim)
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape):
    out = a.data.reshape(shape)
    return _result(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return _result(out, (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index):
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, dtype=a.dtype), (a,), backward)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(out, tuple(tensors), backward)


def matmul(a, b):
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dims")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward)


def softmax(a, axis=-1):
    _check_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), backward)


def log_softmax(a, axis=-1):
    _check_axis(axis, a.ndim)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), backward)


def global_avg_pool(a):
    """[N, C, H, W] -> [N, C]."""
    if a.ndim != 4:
        raise DimensionError(f"global_avg_pool expects a 4-d input, got {a.ndim}-d")
    return mean(a, axis=(2, 3))


# -- convolution ------------------------------------------------------------

@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise DimensionError(
                f"channels ({self.in_channels}, {self.out_channels}) not divisible by groups={self.groups}")
        if self.stride < 1 or self.padding < 0:
            raise DimensionError("stride must be >= 1 and padding >= 0")

    def output_size(self, h, w):
        ho = (h + 2 * self.padding - self.kernel_h) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel_w) // self.stride + 1
        if ho < 1 or wo < 1:
            raise DimensionError(f"input {h}x{w} too small for kernel {self.kernel_h}x{self.kernel_w}")
        return ho, wo


def _check_conv(x, weight, bias, spec):
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be [N, C, H, W], got shape {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be [Cout, Cin/groups, kh, kw], got shape {weight.shape}")
    if x.shape[1] != spec.in_channels:
        raise DimensionError(f"axis 1 (channels) of input is {x.shape[1]}, expected {spec.in_channels}")
    if weight.shape[1] != spec.in_channels // spec.groups:
        raise DimensionError(
            f"axis 1 of weight is {weight.shape[1]}, expected in_channels/groups = "
            f"{spec.in_channels // spec.groups}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise DimensionError(f"axis 0 of bias is {bias.shape}, expected ({spec.out_channels},)")


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Cross-correlation of ``x`` [N, Cin, H, W] with ``weight`` [Cout, Cin/groups, kh, kw]."""
    x = as_tensor(x)
    weight = as_tensor(weight, dtype=x.dtype)
    if bias is not None:
        bias = as_tensor(bias, dtype=x.dtype)
    if x.ndim != 4 or weight.ndim != 4:
        _check_conv(x, weight, bias, ConvSpec(1, 1, 1, 1))
    cout, cg, kh, kw = weight.shape
    spec = ConvSpec(x.shape[1], cout, kh, kw, stride, padding, groups)
    _check_conv(x, weight, bias, spec)
    n, cin, h, w = x.shape
    ho, wo = spec.output_size(h, w)

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xp.shape[2], xp.shape[3]
    cols = kernels.im2col(np.ascontiguousarray(xp), kh, kw, stride)  # [N, Cin*kh*kw, L]
    kk = cg * kh * kw
    cols_g = cols.reshape(n, groups, kk, ho * wo)
    wmat = weight.data.reshape(groups, cout // groups, kk)
    out = np.matmul(wmat, cols_g)  # [N, G, Cout_g, L]
    out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def backward(g):
        g_g = g.reshape(n, groups, cout // groups, ho * wo)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = np.matmul(np.swapaxes(wmat, 1, 2), g_g).reshape(n, cin * kh * kw, ho * wo)
            dxp = kernels.col2im(dcols, cin, hp, wp, kh, kw, stride)
            gx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
        if weight.requires_grad:
            gw = np.matmul(g_g, np.swapaxes(cols_g, 2, 3)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward)


def max_pool2d(x, kernel_size, stride=None, padding=0):
    stride = stride or kernel_size
    n, c, h, w = x.shape
    k = kernel_size
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                    constant_values=-np.inf)
    hp, wp = xp.shape[2], xp.shape[3]
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    cols = kernels.im2col(np.ascontiguousarray(xp.reshape(n * c, 1, hp, wp)), k, k, stride)
    arg = cols.argmax(axis=1)  # [N*C, L]
    out = np.take_along_axis(cols, arg[:, None, :], axis=1).reshape(n, c, ho, wo)

    def backward(g):
        dcols = np.zeros_like(cols)
        np.put_along_axis(dcols, arg[:, None, :], g.reshape(n * c, 1, ho * wo), axis=1)
        dxp = kernels.col2im(dcols, 1, hp, wp, k, k, stride).reshape(n, c, hp, wp)
        return (dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp,)

    return _result(out, (x,), backward)


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Batch normalization over (N, H, W). Running statistics are updated in place."""
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        m = x.data.size // x.shape[1]
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    out = xhat * gamma.data.reshape(1, -1, 1, 1) + beta.data.reshape(1, -1, 1, 1)

    def backward(g):
        gg = gamma.data.reshape(1, -1, 1, 1)
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        if training:
            dxhat = g * gg
            dx = inv.reshape(1, -1, 1, 1) * (
                dxhat - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
        else:
            dx = g * gg * inv.reshape(1, -1, 1, 1)
        return dx.astype(x.dtype), dgamma, dbeta

    return _result(out.astype(x.dtype), (x, gamma, beta), backward)


# -- losses -----------------------------------------------------------------

def cross_entropy(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` [N, C]."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels must have shape ({n},), got {labels.shape}")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"label out of range [0, {c}): min={labels.min()}, max={labels.max()}")
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    return -(log_softmax(logits, axis=1) * onehot).sum() * (1.0 / n)
