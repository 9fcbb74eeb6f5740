"""Minimal parameter containers.

A :class:`Module` discovers its parameters by walking its attributes in
assignment order, so declared order equals initialisation order equals the
order returned by :meth:`Module.named_parameters`.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .rng import RngStream
from .tensor import Parameter, Tensor, matmul, transpose2d


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def glorot(shape, fan_in: int, fan_out: int, rng: RngStream) -> Parameter:
    bound = glorot_bound(fan_in, fan_out)
    return Parameter(rng.uniform_array(shape, -bound, bound))


def zeros(shape) -> Parameter:
    return Parameter(np.zeros(shape), decay_exempt=True)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            if state[name].shape != p.shape:
                raise ValueError(f"{name}: shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)


def _walk(value, path: str):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")


class Linear(Module):
    """Affine map ``x @ weight.T + bias`` with weight stored (out, in)."""

    def __init__(self, d_in: int, d_out: int, rng: RngStream, bias: bool = True):
        self.weight = glorot((d_out, d_in), d_in, d_out, rng)
        self.bias = zeros(d_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, transpose2d(self.weight))
        return y + self.bias if self.bias is not None else y
