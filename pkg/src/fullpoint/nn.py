"""Parameter containers: Module, Linear, MLP, LayerNorm, SGD."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DimensionError, ParameterError
from .rng import Rng
from .tensor import Tensor


def uniform_init(rng: Rng, fan_in: int, shape, gain: float = 1.0) -> Tensor:
    """U(-b, b) with b = gain * sqrt(1 / fan_in); gain sqrt(6) is He-uniform."""
    bound = gain * math.sqrt(1.0 / max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=tuple(shape)), requires_grad=True)


class Module:
    """Base class; parameters are discovered from instance attributes.

    Attribute insertion order fixes the parameter order, so two modules built
    from the same arguments enumerate identical names.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise ParameterError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = np.array(arr, order="C")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name):
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    """``y = x @ weight + bias`` over the last axis; weight is ``[in, out]``."""

    def __init__(self, c_in: int, c_out: int, rng: Rng, bias: bool = True):
        self.c_in, self.c_out = c_in, c_out
        # He-uniform keeps activation scale through ReLU stacks without batch norm
        self.weight = uniform_init(rng, c_in, (c_in, c_out), gain=math.sqrt(6.0))
        self.bias = uniform_init(rng, c_in, (c_out,)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.c_in:
            raise DimensionError(f"Linear expects last dim {self.c_in}, got shape {x.shape}")
        lead = x.shape[:-1]
        y = T.matmul(T.reshape(x, (-1, self.c_in)), self.weight)
        if self.bias is not None:
            y = y + self.bias
        return T.reshape(y, lead + (self.c_out,))

    def zero_(self) -> None:
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0

    def identity_(self) -> None:
        if self.c_in != self.c_out:
            raise DimensionError("identity_ needs a square layer")
        self.weight.data[...] = np.eye(self.c_in)
        if self.bias is not None:
            self.bias.data[...] = 0.0


class MLP(Module):
    """Stack of Linear layers with ReLU between them.

    ``final_relu`` also rectifies the last layer's output.
    """

    def __init__(self, dims, rng: Rng, final_relu: bool = False):
        dims = list(dims)
        if len(dims) < 2:
            raise ParameterError("MLP needs at least input and output dims")
        self.dims = dims
        self.final_relu = final_relu
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    @property
    def c_in(self) -> int:
        return self.dims[0]

    @property
    def c_out(self) -> int:
        return self.dims[-1]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1 or self.final_relu:
                x = T.relu(x)
        return x

    def zero_(self) -> None:
        for layer in self.layers:
            layer.zero_()


class LayerNorm(Module):
    def __init__(self, c: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Tensor(np.ones(c), requires_grad=True)
        self.shift = Tensor(np.zeros(c), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / T.sqrt(var + self.eps) * self.gain + self.shift


class SGD:
    """SGD with momentum and L2 weight decay (PyTorch update convention)."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        if lr <= 0:
            raise ParameterError(f"lr must be > 0, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
