"""Small module system on top of :mod:`kanrecon.ndtensor.tensor`."""

from __future__ import annotations

from typing import Dict, Iterator, List, Tuple

import numpy as np

from kanrecon.ndtensor import tensor as F
from kanrecon.ndtensor.tensor import Tensor


class Module:
    """Container that discovers parameters, buffers and child modules by attribute."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, np.ndarray) and key.startswith("running_"):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_buffers(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{name}.{i}.")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = {name: p for name, p in self.named_parameters()}
        buffers = dict(self.named_buffers())
        expected = set(own) | set(buffers)
        missing = expected - set(state)
        unexpected = set(state) - expected
        if missing or unexpected:
            raise F.ShapeError(
                f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(unexpected)[:5]}"
            )
        for name, arr in state.items():
            target = own[name].data if name in own else buffers[name]
            if target.shape != arr.shape:
                raise F.ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {target.shape}")
            target[...] = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def parameter(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in) / np.sqrt(2.0)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True,
                 zero: bool = False):
        shape = (n_in, n_out)
        w = np.zeros(shape) if zero else kaiming_uniform(rng, shape, n_in)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = F.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    """3x3, stride 1, padding 1."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, zero: bool = False):
        shape = (c_out, c_in, 3, 3)
        w = np.zeros(shape) if zero else kaiming_uniform(rng, shape, c_in * 9)
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(c_out))

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, features: int, axis: int = 1, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = parameter(np.ones(features))
        self.beta = parameter(np.zeros(features))
        self.running_mean = np.zeros(features)
        self.running_var = np.ones(features)
        self.axis = axis
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           training=self.training, momentum=self.momentum, eps=self.eps,
                           axis=self.axis)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(features))
        self.beta = parameter(np.zeros(features))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.layernorm(x, self.gamma, self.beta, self.eps)


class GroupNorm(Module):
    def __init__(self, groups: int, channels: int, zero: bool = False, eps: float = 1e-5):
        if channels % groups:
            groups = _largest_divisor(channels, groups)
        self.groups = groups
        self.gamma = parameter(np.zeros(channels) if zero else np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return F.groupnorm(x, self.groups, self.gamma, self.beta, self.eps)


def _largest_divisor(n: int, at_most: int) -> int:
    for g in range(min(n, at_most), 0, -1):
        if n % g == 0:
            return g
    return 1
