"""Parameter-holding building blocks on top of the tensor primitives."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter, Tensor, affine, batch_norm, conv1d, elementwise_scale, relu


class Module:
    """Minimal container: parameters, buffers and submodules are found by attribute walk."""

    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")
        for name in getattr(self, "_buffers", ()):
            yield f"{prefix}{name}", getattr(self, name)

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def uniform_init(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Affine(Module):
    def __init__(self, in_dims, out_dims, rng, bias=True):
        self.weight = Parameter(uniform_init(rng, (in_dims, out_dims), in_dims))
        self.bias = Parameter(uniform_init(rng, (out_dims,), in_dims)) if bias else None

    def __call__(self, x) -> Tensor:
        return affine(x, self.weight, self.bias)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, momentum=0.9, eps=1e-5):
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x) -> Tensor:
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


class Conv1d(Module):
    def __init__(self, in_dims, out_dims, kernel_size, rng, bias=True):
        if kernel_size not in (1, 3, 5, 7):
            raise ValueError("kernel_size must be one of 1, 3, 5, 7")
        fan_in = in_dims * kernel_size
        self.kernel = Parameter(uniform_init(rng, (out_dims, in_dims, kernel_size), fan_in))
        self.bias = Parameter(uniform_init(rng, (out_dims,), fan_in)) if bias else None

    def __call__(self, x) -> Tensor:
        return conv1d(x, self.kernel, self.bias)


class Scale(Module):
    def __init__(self, channels):
        self.weight = Parameter(np.ones(channels))

    def __call__(self, x) -> Tensor:
        return elementwise_scale(x, self.weight)


class MLP(Module):
    """Affine -> BatchNorm -> ReLU stack."""

    def __init__(self, widths, rng, bias=False):
        self.layers = [Affine(a, b, rng, bias) for a, b in zip(widths[:-1], widths[1:])]
        self.norms = [BatchNorm(b) for b in widths[1:]]

    def __call__(self, x) -> Tensor:
        for lin, bn in zip(self.layers, self.norms):
            x = relu(bn(lin(x)))
        return x
