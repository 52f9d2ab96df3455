"""Parameter containers shared by the transformer, quantizer and training code."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Module:
    """Attribute-walking parameter registry.

    Parameters are the ``requires_grad`` tensors found on the instance, in
    attribute insertion order, recursing into sub-modules and lists of them.
    Names are dotted paths, so they are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for k, p in own.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.asarray(data, dtype=nx.DEFAULT_DTYPE), requires_grad=True)


class Linear(Module):
    """``y = x @ weight + bias`` over the last axis.

    Weights default to U(-1/sqrt(fan_in), 1/sqrt(fan_in)); ``std`` switches to a
    zero-mean normal with that deviation.
    """

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, bias: bool = True, std: float | None = None):
        if std is None:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        else:
            w = rng.normal(0.0, std, size=(fan_in, fan_out))
        self.weight = param(w)
        self.bias = param(np.zeros(fan_out)) if bias else None
        self.fan_in, self.fan_out = fan_in, fan_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.fan_in:
            raise ValueError(f"Linear: expected last dim {self.fan_in}, got shape {x.shape}")
        lead = x.shape[:-1]
        y = nx.matmul(x.reshape(-1, self.fan_in), self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y.reshape(*lead, self.fan_out)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.scale = param(np.ones(dim))
        self.shift = param(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.scale, self.shift)
