"""Small module system on top of the autodiff core."""
from __future__ import annotations

import math
import zlib
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, parameter name): init is independent of build order."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def normal_param(seed: int, name: str, shape, std: float, trainable: bool = True) -> Tensor:
    data = param_rng(seed, name).normal(0.0, std, size=shape)
    return Tensor(data, requires_grad=trainable, name=name)


def const_param(name: str, shape, value: float, trainable: bool = True) -> Tensor:
    return Tensor(np.full(shape, value), requires_grad=trainable, name=name)


class Module:
    """Attribute-walking parameter container.

    Parameters reachable through several paths (shared sub-modules) are
    reported once, under the first name encountered.
    """

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                out[name] = p
        return out

    def _walk(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value._walk(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item._walk(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class Linear(Module):
    def __init__(self, seed: int, name: str, d_in: int, d_out: int,
                 std: float = 0.02, trainable: bool = True):
        self.weight = normal_param(seed, f"{name}.weight", (d_in, d_out), std, trainable)
        self.bias = const_param(f"{name}.bias", (d_out,), 0.0, trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.matmul(x, self.weight), self.bias)


class LayerNorm(Module):
    def __init__(self, name: str, d: int, eps: float = 1e-12, trainable: bool = True):
        self.gamma = const_param(f"{name}.gamma", (d,), 1.0, trainable)
        self.beta = const_param(f"{name}.beta", (d,), 0.0, trainable)
        self._eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self._eps)


class FeedForward(Module):
    def __init__(self, seed: int, name: str, d: int, hidden: int,
                 std: float = 0.02, out_std: float | None = None, trainable: bool = True):
        self.fc1 = Linear(seed, f"{name}.fc1", d, hidden, std, trainable)
        self.fc2 = Linear(seed, f"{name}.fc2", hidden, d,
                          std if out_std is None else out_std, trainable)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Multi-head scaled dot-product attention with separate query/key inputs.

    ``mask`` is a boolean array broadcastable to ``[batch, heads, queries, keys]``
    where True marks an allowed query-key pair.
    """

    def __init__(self, seed: int, name: str, d_query: int, d_kv: int, d: int, heads: int,
                 std: float = 0.02, out_std: float | None = None, trainable: bool = True):
        if d % heads:
            raise ValueError(f"width {d} not divisible by {heads} heads")
        self.q = Linear(seed, f"{name}.q", d_query, d, std, trainable)
        self.k = Linear(seed, f"{name}.k", d_kv, d, std, trainable)
        self.v = Linear(seed, f"{name}.v", d_kv, d, std, trainable)
        self.o = Linear(seed, f"{name}.o", d, d, std if out_std is None else out_std, trainable)
        self._heads = heads
        self._d = d

    def _split(self, x: Tensor) -> Tensor:
        b, s, _ = x.shape
        return ad.transpose(ad.reshape(x, (b, s, self._heads, self._d // self._heads)), (0, 2, 1, 3))

    def __call__(self, xq: Tensor, xkv: Tensor, mask: np.ndarray | None = None) -> Tensor:
        b, s, _ = xq.shape
        q = self._split(self.q(xq))
        k = self._split(self.k(xkv))
        v = self._split(self.v(xkv))
        scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                          1.0 / math.sqrt(self._d // self._heads))
        attn = ad.softmax(scores, axis=-1, mask=mask)
        ctx = ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3))
        return self.o(ad.reshape(ctx, (b, s, self._d)))
