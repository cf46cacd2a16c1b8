"""Parameterised layers: linear maps, layer norm, MLPs, attention blocks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import (
    Tensor,
    add,
    gelu,
    get_dtype,
    layer_norm,
    linear,
    masked_multihead_attention,
)


def parameter(data: np.ndarray, name: str | None = None) -> Tensor:
    return Tensor(np.asarray(data, dtype=get_dtype()), requires_grad=True, name=name)


class Module:
    """Container that discovers parameters through its attributes.

    Discovery order follows attribute assignment order, which keeps parameter
    names and checkpoint layouts stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
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

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True, std: float | None = None):
        std = (1.0 / np.sqrt(n_in)) if std is None else std
        self.weight = parameter(rng.normal(0.0, std, size=(n_in, n_out)))
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    def __init__(self, q_dim: int, kv_dim: int, qkv_dim: int, heads: int,
                 rng: np.random.Generator):
        if qkv_dim % heads:
            raise ValueError(f"qkv size {qkv_dim} not divisible by {heads} heads")
        self.heads = heads
        self.to_q = Linear(q_dim, qkv_dim, rng)
        self.to_k = Linear(kv_dim, qkv_dim, rng)
        self.to_v = Linear(kv_dim, qkv_dim, rng)
        self.to_out = Linear(qkv_dim, q_dim, rng)

    def __call__(self, x: Tensor, context: Tensor, mask=None) -> Tensor:
        q, k, v = self.to_q(x), self.to_k(context), self.to_v(context)
        return self.to_out(masked_multihead_attention(q, k, v, mask, self.heads))


class SelfAttentionBlock(Module):
    """Pre-norm transformer block: x + attn(ln x), then x + mlp(ln x)."""

    def __init__(self, dim: int, qkv_dim: int, heads: int, mlp_dim: int,
                 rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, dim, qkv_dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim, rng)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        h = self.norm1(x)
        x = add(x, self.attn(h, h, mask))
        return add(x, self.mlp(self.norm2(x)))


class CrossAttentionBlock(Module):
    def __init__(self, dim: int, ctx_dim: int, qkv_dim: int, heads: int, mlp_dim: int,
                 rng: np.random.Generator):
        self.norm_q = LayerNorm(dim)
        self.norm_ctx = LayerNorm(ctx_dim)
        self.attn = MultiHeadAttention(dim, ctx_dim, qkv_dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_dim, rng)

    def __call__(self, x: Tensor, context: Tensor, mask=None) -> Tensor:
        x = add(x, self.attn(self.norm_q(x), self.norm_ctx(context), mask))
        return add(x, self.mlp(self.norm2(x)))
