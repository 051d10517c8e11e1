"""Parameter containers and the small layer set the relation network uses."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor, layer_norm, matmul, add, index


class Parameter(Tensor):
    """A named tensor owned by a module. Non-trainable parameters never receive gradients."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, trainable: bool = True, name: str = ""):
        super().__init__(data, requires_grad=trainable)
        self.trainable = trainable
        self.name = name


class Module:
    """Base class; parameters and submodules are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            if attr.startswith("_"):
                continue
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        params = []
        seen = set()
        for name, p in self.named_parameters():
            if name in seen:
                raise ValueError(f"duplicate parameter name {name!r}")
            seen.add(name)
            p.name = name
            params.append(p)
        return params

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.trainable_parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """``y = x @ weight + bias`` with weight stored as [in, out]."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out)) if bias else None

    @property
    def n_in(self) -> int:
        return self.weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self._eps)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator):
        self.table = Parameter(rng.normal(0.0, 1.0, size=(n, dim)))

    def __call__(self, ids) -> Tensor:
        return index(self.table, np.asarray(ids, dtype=np.int64))


def linear_param_count(n_in: int, n_out: int, bias: bool = True) -> int:
    return n_in * n_out + (n_out if bias else 0)
