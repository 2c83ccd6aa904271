"""Parameter containers and basic layers."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def parameter(data, trainable: bool = True) -> Tensor:
    return Tensor(data, requires_grad=trainable)


class Module:
    """Discovers parameters from attributes in definition order.

    A parameter is any leaf :class:`Tensor` attribute; sub-modules and lists of
    sub-modules are walked recursively. Plain ndarray attributes (buffers such
    as fixed position encodings) are not parameters.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise KeyError(f"state mismatch; missing={missing} unexpected={unexpected}")
        for name, value in state.items():
            if name not in params:
                continue
            p = params[name]
            if p.shape != tuple(value.shape):
                raise ValueError(f"{name}: shape {tuple(value.shape)} does not match {p.shape}")
            p.data = np.array(value, dtype=np.float64)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(uniform_init(rng, (d_out, d_in), d_in))
        self.bias = parameter(uniform_init(rng, (d_out,), d_in)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(d))
        self.beta = parameter(np.zeros(d))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self._eps)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        fan_in = c_in * kernel * kernel
        self.weight = parameter(uniform_init(rng, (c_out, c_in, kernel, kernel), fan_in))
        self.bias = parameter(uniform_init(rng, (c_out,), fan_in))
        self._stride = stride
        self._padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self._stride, self._padding)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 2, padding: int = 0):
        # each output pixel sees c_in * (kernel / stride)^2 inputs
        fan_in = max(1, c_in * (kernel // stride) ** 2)
        self.weight = parameter(uniform_init(rng, (c_in, c_out, kernel, kernel), fan_in))
        self.bias = parameter(uniform_init(rng, (c_out,), fan_in))
        self._stride = stride
        self._padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.deconv2d(x, self.weight, self.bias, self._stride, self._padding)
