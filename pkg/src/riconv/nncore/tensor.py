"""Dense float64 tensors with tape-free reverse-mode gradients.

Every op records its parents and a closure that pushes the output gradient
back to them; ``Tensor.backward`` walks the graph in reverse topological
order. Feature axes are channel-last throughout: ``(..., length, channels)``.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, parents=(), backward=None, requires_grad=None, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self._parents)
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        topo, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    pg = _unbroadcast(pg, parent.data.shape)
                if parent._backward is None:
                    parent._accumulate(pg)
                elif id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # arithmetic sugar used by the layers
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -1.0 * as_tensor(other))

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def sum(self, axis=None):
        return sum_(self, axis)


class Parameter(Tensor):
    """Trainable tensor carrying its Adam moments and step count."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, name=None):
        super().__init__(data, requires_grad=True, name=name)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def __repr__(self):
        return f"Parameter(name={self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ------------------------------------------------------------------ basic ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return Tensor(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum_(x: Tensor, axis=None) -> Tensor:
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return Tensor(x.data.sum(axis=axis), (x,), back)


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                  lambda g: tuple(np.split(g, splits, axis=axis)))


def gather_rows(x: Tensor, idx) -> Tensor:
    """``out[b, ...] = x[b, idx[b, ...]]`` for ``x`` of shape ``(B, N, C)``."""
    idx = np.asarray(idx)
    b, n, c = x.shape
    if idx.shape[0] != b:
        raise ShapeError(f"index batch {idx.shape[0]} does not match tensor batch {b}")
    flat = (idx.reshape(b, -1) + (np.arange(b) * n)[:, None]).ravel()
    out = x.data.reshape(b * n, c)[flat].reshape(idx.shape + (c,))

    def back(g):
        gx = np.zeros((b * n, c))
        np.add.at(gx, flat, g.reshape(-1, c))
        return (gx.reshape(b, n, c),)

    return Tensor(out, (x,), back)


# ---------------------------------------------------------------- primitives


def affine(x, w: Tensor, b: Tensor = None) -> Tensor:
    """``x @ w + b`` over the trailing axis."""
    x = as_tensor(x)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"affine expects trailing dim {w.shape[0]}, got {x.shape[-1]}")
    out = x.data @ w.data
    if b is not None:
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gx = g @ w.data.T if x.requires_grad else None
        gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, w.shape[1]).sum(axis=0)

    return Tensor(out, parents, back)


def elementwise_scale(x, w: Tensor) -> Tensor:
    """``w * x`` with ``w`` broadcast against the trailing (feature) axes of ``x``."""
    x = as_tensor(x)
    try:
        out = x.data * w.data
    except ValueError:
        raise ShapeError(f"cannot scale {x.shape} by {w.shape}") from None
    if out.shape != x.shape:
        raise ShapeError(f"scale {w.shape} does not broadcast over {x.shape}")
    return Tensor(out, (x, w), lambda g: (g * w.data, _unbroadcast(g * x.data, w.shape)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def batch_norm(x, gamma: Tensor, beta: Tensor, running_mean, running_var,
               training: bool, momentum: float = 0.9, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over every axis but the last.

    In training mode the running statistics (numpy arrays) are updated in
    place as ``r = momentum * r + (1 - momentum) * batch``.
    """
    x = as_tensor(x)
    c = x.shape[-1]
    if training:
        if x.shape[0] < 2:
            raise ShapeError("batch_norm in training mode needs a batch of at least 2")
        flat = x.data.reshape(-1, c)
        count = flat.shape[0]
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var * count / max(count - 1, 1)
    else:
        mean, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = gamma.data * xhat + beta.data

    def back(g):
        g2 = g.reshape(-1, c)
        xh = xhat.reshape(-1, c)
        ggamma = (g2 * xh).sum(axis=0)
        gbeta = g2.sum(axis=0)
        if training:
            gx = gamma.data * inv * (g2 - g2.mean(axis=0) - xh * (g2 * xh).mean(axis=0))
        else:
            gx = g2 * gamma.data * inv
        return gx.reshape(x.shape), ggamma, gbeta

    return Tensor(out, (x, gamma, beta), back)


def conv1d(x, kernel: Tensor, bias: Tensor = None) -> Tensor:
    """Valid, stride-1 cross-correlation along the ordered axis.

    ``x`` is ``(..., L, C_in)`` and ``kernel`` is ``(C_out, C_in, k)``; the
    result is ``(..., L - k + 1, C_out)``.
    """
    x = as_tensor(x)
    cout, cin, k = kernel.shape
    length = x.shape[-2]
    if x.shape[-1] != cin:
        raise ShapeError(f"conv1d expects {cin} input channels, got {x.shape[-1]}")
    if length < k:
        raise ShapeError(f"sequence length {length} shorter than kernel {k}")
    lo = length - k + 1
    out = 0.0
    for j in range(k):
        out = out + x.data[..., j:j + lo, :] @ kernel.data[:, :, j].T
    if bias is not None:
        out = out + bias.data
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def back(g):
        gk = np.empty_like(kernel.data)
        gx = np.zeros_like(x.data) if x.requires_grad else None
        g2 = g.reshape(-1, cout)
        for j in range(k):
            xs = x.data[..., j:j + lo, :]
            gk[:, :, j] = g2.T @ xs.reshape(-1, cin)
            if gx is not None:
                gx[..., j:j + lo, :] += g @ kernel.data[:, :, j]
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return Tensor(out, parents, back)


def maxpool_set(x, axis: int = -2) -> Tensor:
    """Max over a set axis; the gradient goes to the first argmax."""
    x = as_tensor(x)
    axis = axis % x.ndim
    arg = np.argmax(x.data, axis=axis)
    out = np.take_along_axis(x.data, np.expand_dims(arg, axis), axis=axis).squeeze(axis)

    def back(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(arg, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return Tensor(out, (x,), back)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood over every leading position."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape[:-1]}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    logp = log_softmax(logits.data)
    picked = np.take_along_axis(logp, labels[..., None], axis=-1)[..., 0]
    count = labels.size

    def back(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], -1) - 1.0, -1)
        return (grad * (g / count),)

    return Tensor(-picked.mean(), (logits,), back)
