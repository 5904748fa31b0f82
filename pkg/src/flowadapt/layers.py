"""Parameter containers and the basic layers the models are built from."""

from __future__ import annotations

import contextlib
import math
from typing import Iterator

import numpy as np

from .numerics import Tensor, layer_norm, relu, softmax

NEG_INF = -1e9
_SHAPE_ONLY = False


@contextlib.contextmanager
def shape_only():
    """Build modules with untouched zero weights; used to count parameters of large presets."""
    global _SHAPE_ONLY
    prev = _SHAPE_ONLY
    _SHAPE_ONLY = True
    try:
        yield
    finally:
        _SHAPE_ONLY = prev


def init_normal(rng: np.random.Generator, std: float, shape) -> np.ndarray:
    if _SHAPE_ONLY:
        return np.zeros(shape)
    return rng.normal(0.0, std, size=shape)


class Module:
    """Attribute-walking parameter container.

    Any ``Tensor`` attribute is a parameter, any ``Module``/``ModuleList``
    attribute a child. Parameter paths are dotted attribute names.
    """

    training = False

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, ModuleList):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, ModuleList):
                for child in value:
                    yield from child.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: stored shape {value.shape} != model shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)


class ModuleList(list):
    pass


class Linear(Module):
    """``y = x W^T + bias`` with optional LoRA and bias-tuning attachments."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, zero_init: bool = False):
        if zero_init:
            w = np.zeros((n_out, n_in))
        else:
            w = init_normal(rng, 1.0 / math.sqrt(max(n_in, 1)), (n_out, n_in))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)
        self.lora = None
        self.bias_tune = None

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    def forward(self, x):
        y = x @ self.weight.T + self.bias
        if self.lora is not None:
            y = y + self.lora(x)
        if self.bias_tune is not None:
            y = self.bias_tune(y)
        return y

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        return layer_norm(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, std: float = 1.0):
        self.weight = Tensor(init_normal(rng, std, (n, dim)), requires_grad=True)

    def __call__(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        n = self.weight.shape[0]
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise IndexError(f"embedding index out of range [0, {n})")
        return self.weight[ids]


def key_padding_bias(key_mask: np.ndarray | None, dtype=np.float64) -> np.ndarray | None:
    """(B, S) validity mask -> additive (B, 1, 1, S) score bias."""
    if key_mask is None:
        return None
    key_mask = np.asarray(key_mask, dtype=bool)
    return np.where(key_mask, 0.0, NEG_INF).astype(dtype)[:, None, None, :]


class MultiHeadAttention(Module):
    """Scaled dot-product attention; queries from one stream, keys/values from another."""

    def __init__(self, q_dim: int, kv_dim: int, n_heads: int, head_dim: int,
                 rng: np.random.Generator, out_dim: int | None = None, zero_out: bool = False):
        inner = n_heads * head_dim
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.q = Linear(q_dim, inner, rng)
        self.k = Linear(kv_dim, inner, rng)
        self.v = Linear(kv_dim, inner, rng)
        self.o = Linear(inner, out_dim or q_dim, rng, zero_init=zero_out)

    def _split(self, x: Tensor) -> Tensor:
        b, t = x.shape[0], x.shape[1]
        return x.reshape(b, t, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def __call__(self, xq, xkv, key_bias: np.ndarray | None = None):
        if xq.ndim != 3 or xkv.ndim != 3:
            raise ValueError("attention expects (batch, length, dim) inputs")
        q = self._split(self.q(xq))
        k = self._split(self.k(xkv))
        v = self._split(self.v(xkv))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(self.head_dim))
        if key_bias is not None:
            scores = scores + key_bias
        attn = softmax(scores, axis=-1)
        out = (attn @ v).transpose(0, 2, 1, 3)
        b, t = out.shape[0], out.shape[1]
        return self.o(out.reshape(b, t, self.n_heads * self.head_dim))


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.ff1 = Linear(dim, hidden, rng)
        self.ff2 = Linear(hidden, dim, rng)

    def __call__(self, x):
        return self.ff2(relu(self.ff1(x)))
