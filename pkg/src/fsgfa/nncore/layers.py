"""Stateful layers: parameter holders that call into :mod:`ops`."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import DEFAULT_DTYPE, Parameter, Tensor


class Module:
    """Base class. Subclasses register parameters, buffers and children as attributes."""

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_buffers(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")
        for key in getattr(self, "_buffers", ()):
            yield prefix + key, getattr(self, key)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters() if p.trainable))

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def astype(self, dtype):
        """Cast parameters and buffers in place (64-bit for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for key in getattr(m, "_buffers", ()):
                setattr(m, key, getattr(m, key).astype(dtype))
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _fan_in_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(DEFAULT_DTYPE)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0,
                 bias: bool = False, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding = stride, padding
        self.weight = Parameter(_fan_in_uniform(rng, (cout, cin, k, k), cin * k * k), "weight")
        self.bias = Parameter(np.zeros(cout, DEFAULT_DTYPE), "bias") if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.stride, self.padding, self.bias)


class DeConv2d(Module):
    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 2, padding: int = 1,
                 output_padding: int = 1, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        self.weight = Parameter(_fan_in_uniform(rng, (cin, cout, k, k), cin * k * k), "weight")

    def forward(self, x: Tensor) -> Tensor:
        return ops.deconv2d(x, self.weight, self.stride, self.padding, self.output_padding)


class BatchNorm2d(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(np.ones(c, DEFAULT_DTYPE), "gamma")
        self.beta = Parameter(np.zeros(c, DEFAULT_DTYPE), "beta")
        self.running_mean = np.zeros(c, DEFAULT_DTYPE)
        self.running_var = np.ones(c, DEFAULT_DTYPE)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                               self.training, self.eps, self.momentum)


class ConvBN(Module):
    """Bias-free conv followed by batch norm and an optional ReLU."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0,
                 relu: bool = True, rng=None):
        super().__init__()
        self.conv = Conv2d(cin, cout, k, stride, padding, rng=rng)
        self.bn = BatchNorm2d(cout)
        self.relu = relu

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        return ops.relu(y) if self.relu else y
