"""Layers built on the tensor tape: Linear, LayerNorm, multi-head attention, encoder layers."""
from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """Trainable leaf tensor; ``name`` is filled in by the owning Module."""

    __slots__ = ()

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name


class Module:
    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = ""):
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = path
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


class Linear(Module):
    """``y = x W + b`` with W uniform in +-sqrt(1/fan_in) and b = 0."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, dtype=np.float32):
        bound = math.sqrt(1.0 / fan_in)
        self.weight = Parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)), dtype=dtype)
        self.bias = Parameter(np.zeros(fan_out), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        lead = x.shape[:-1]
        if len(lead) > 1:
            flat = x.reshape(-1, x.shape[-1]) @ self.weight + self.bias
            return flat.reshape(*lead, self.weight.shape[1])
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float32):
        self.weight = Parameter(np.ones(dim), dtype=dtype)
        self.bias = Parameter(np.zeros(dim), dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.weight, self.bias)


class MLP(Module):
    """Stack of Linear layers with ReLU between (none after the last)."""

    def __init__(self, dims, rng, dtype=np.float32):
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = T.relu(x)
        return x


class MultiHeadAttention(Module):
    """Scaled dot-product attention over ``num_heads`` heads.

    Query/key/value inputs may have different widths (``q_dim``, ``kv_dim``,
    ``v_dim``); all are projected to ``dim``. ``key_mask`` is a ``(B, Lk)``
    bool array, True for real keys. The last attention map is kept on
    ``self.last_weights`` as a numpy array of shape ``(B, H, Lq, Lk)``.
    """

    def __init__(self, dim: int, num_heads: int, rng, q_dim=None, k_dim=None, v_dim=None, dtype=np.float32):
        if dim % num_heads:
            raise ValueError(f"embedding dim {dim} is not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.wq = Linear(q_dim or dim, dim, rng, dtype)
        self.wk = Linear(k_dim or dim, dim, rng, dtype)
        self.wv = Linear(v_dim or dim, dim, rng, dtype)
        self.wo = Linear(dim, dim, rng, dtype)
        self.last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.num_heads, self.dim // self.num_heads).transpose((0, 2, 1, 3))

    def forward(self, query: Tensor, key: Tensor, value: Tensor, key_mask=None) -> Tensor:
        b, lq, _ = query.shape
        q = self._split(self.wq(query))
        k = self._split(self.wk(key))
        v = self._split(self.wv(value))
        scores = (q @ k.transpose()) * (1.0 / math.sqrt(self.dim // self.num_heads))
        mask = None if key_mask is None else np.asarray(key_mask, dtype=bool)[:, None, None, :]
        attn = T.softmax(scores, axis=-1, mask=mask)
        self.last_weights = attn.data
        out = (attn @ v).transpose((0, 2, 1, 3)).reshape(b, lq, self.dim)
        return self.wo(out)


class TransformerLayer(Module):
    """Post-norm encoder layer: x = LN(x + MHA); x = LN(x + FF(x)).

    ``qk_extra`` widens the query/key input: when given, queries and keys
    come from ``concat(x, cond)`` while values and the residual use ``x``.
    """

    def __init__(self, dim: int, num_heads: int, rng, ff_dim: int = 512, kv_dim=None, qk_extra: int = 0,
                 dtype=np.float32):
        self.attn = MultiHeadAttention(dim, num_heads, rng, q_dim=dim + qk_extra,
                                       k_dim=(kv_dim or dim) + qk_extra, v_dim=kv_dim or dim, dtype=dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.ff = MLP([dim, ff_dim, dim], rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)

    def forward(self, x: Tensor, memory: Tensor | None = None, key_mask=None, cond: Tensor | None = None) -> Tensor:
        kv = x if memory is None else memory
        if cond is not None:
            qk = T.concat([x, cond], axis=-1)
            h = self.attn(qk, qk, kv, key_mask)
        else:
            h = self.attn(x, kv, kv, key_mask)
        x = self.norm1(x + h)
        return self.norm2(x + self.ff(x))
