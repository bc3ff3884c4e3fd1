"""Minimal module system: named parameters, linear/conv layers."""
from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import RandomStream
from .tensor import Tensor


def param(data: np.ndarray, dtype=np.float32) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Parameters are Tensor attributes with requires_grad; children are
    Module attributes or lists of Modules. Names follow attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                yield name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(name + ".")
            elif isinstance(val, list) and val and isinstance(val[0], Module):
                for i, m in enumerate(val):
                    yield from m.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for k, p in own.items():
            if tuple(state[k].shape) != p.shape:
                raise ValueError(f"{k}: shape {tuple(state[k].shape)} != {p.shape}")
        for k, p in own.items():
            p.data = np.array(state[k], dtype=p.dtype)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def clone(self, dtype=None) -> "Module":
        twin = copy.deepcopy(self)
        return twin.to(dtype) if dtype is not None else twin

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: RandomStream, bias: bool = True,
                 std: float | None = None, dtype=np.float32):
        std = (1.0 / n_in) ** 0.5 if std is None else std
        self.weight = param(rng.normal((n_in, n_out), std), dtype)
        self.bias = param(np.zeros(n_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, rng: RandomStream, k: int = 3, stride: int = 1,
                 dtype=np.float32):
        std = (2.0 / (c_in * k * k)) ** 0.5
        self.weight = param(rng.normal((c_out, c_in, k, k), std), dtype)
        self.bias = param(np.zeros(c_out), dtype)
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32, eps: float = 1e-6):
        self.weight = param(np.ones(dim), dtype)
        self.bias = param(np.zeros(dim), dtype)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layernorm_core(x, self.eps) * self.weight + self.bias
