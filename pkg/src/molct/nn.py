"""Parameter containers and small dense building blocks."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Holds parameters and child modules; names are dotted attribute paths."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for k, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{k}."))
                    elif isinstance(item, Tensor) and item.requires_grad:
                        out[f"{name}.{k}"] = item
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        # tied parameters are counted once
        seen: set[int] = set()
        total = 0
        for p in self.named_parameters().values():
            if id(p) not in seen:
                seen.add(id(p))
                total += p.size
        return total


def param(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return param(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


def zeros(*shape) -> Tensor:
    return param(np.zeros(shape))


def project(x, w: Tensor) -> Tensor:
    """x @ w where x may also be a single vector."""
    x = ad.constant(x)
    if x.ndim >= 2:
        return ad.matmul(x, w)
    return ad.reshape(ad.matmul(ad.reshape(x, (1, x.shape[0])), w), (w.shape[1],))


class Linear(Module):
    def __init__(self, rng, fan_in: int, fan_out: int, bias: bool = True):
        self.weight = xavier_uniform(rng, fan_in, fan_out)
        self.bias = zeros(fan_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = project(x, self.weight)
        return ad.add(y, self.bias) if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5):
        self.gain = param(np.ones(width))
        self.bias = zeros(width)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Dense layers with shifted-softplus between them (none after the last)."""

    def __init__(self, rng, widths: list[int]):
        self.layers = [Linear(rng, a, b) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for k, layer in enumerate(self.layers):
            x = layer(x)
            if k < len(self.layers) - 1:
                x = ad.shifted_softplus(x)
        return x
