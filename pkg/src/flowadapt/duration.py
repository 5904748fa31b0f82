"""Per-symbol duration regression (L1) and expansion to frame alignment."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .layers import Embedding, LayerNorm, Linear, Module, ModuleList, key_padding_bias
from .numerics import Adam, Tensor, as_tensor, no_grad, seeded_rng, tabs
from .transformer import ConditionContext, TransformerLayer


@dataclass
class DurationConfig:
    n_layers: int = 2
    model_dim: int = 32
    ff_dim: int = 128
    n_heads: int = 4
    vocab_size: int = 16
    max_symbols: int = 32

    def __post_init__(self):
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")

    @classmethod
    def large_preset(cls) -> "DurationConfig":
        return cls(n_layers=8, model_dim=512, ff_dim=2048, n_heads=8, vocab_size=100, max_symbols=256)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DurationExample:
    symbols: np.ndarray
    durations: np.ndarray
    z_f: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        if len(self.symbols) != len(self.durations):
            raise ValueError("symbols and durations differ in length")
        if np.any(self.durations < 1):
            raise ValueError("durations must be >= 1")


class DurationModel(Module):
    """Transformer regressor from (unaligned) symbols to real-valued frame counts."""

    def __init__(self, config: DurationConfig, seed: int = 0, init_duration: float = 4.0):
        rng = seeded_rng(seed)
        c = config
        self.config = c
        self.symbol_embed = Embedding(c.vocab_size, c.model_dim, rng)
        self.pos_embed = Embedding(c.max_symbols, c.model_dim, rng, std=0.1)
        self.layers = ModuleList(
            TransformerLayer(c.model_dim, c.ff_dim, c.n_heads, rng) for _ in range(c.n_layers))
        self.final_ln = LayerNorm(c.model_dim)
        self.head = Linear(c.model_dim, 1, rng)
        self.head.bias.data = np.full(1, float(init_duration))
        self.condition_encoder = None
        self.adapter_spec = None

    @property
    def has_cross_attention(self) -> bool:
        return any(layer.cross_attn is not None for layer in self.layers)

    def encode_condition(self, token_lists) -> ConditionContext | None:
        if self.condition_encoder is None:
            if any(len(toks) for toks in token_lists):
                raise ValueError("condition tokens supplied but no adapters are injected")
            return None
        return self.condition_encoder.encode_batch(token_lists)

    def __call__(self, symbols: np.ndarray, valid: np.ndarray | None = None,
                 cond: ConditionContext | None = None) -> Tensor:
        """Raw predictions ``(B, N)`` for padded symbol ids ``(B, N)``."""
        symbols = np.asarray(symbols, dtype=np.int64)
        n = symbols.shape[1]
        if n > self.config.max_symbols:
            raise ValueError(f"{n} symbols exceed max_symbols {self.config.max_symbols}")
        if cond is not None and not self.has_cross_attention:
            raise ValueError("condition given to a duration model without cross-attention modules")
        h = self.symbol_embed(symbols) + self.pos_embed.weight[:n]
        bias = key_padding_bias(valid)
        for layer in self.layers:
            h = layer(h, bias, cond)
        out = self.head(self.final_ln(h))
        return out.reshape(*out.shape[:-1])


def _pad(examples: Sequence[DurationExample]):
    n = max(len(e.symbols) for e in examples)
    symbols = np.zeros((len(examples), n), dtype=np.int64)
    gold = np.zeros((len(examples), n))
    valid = np.zeros((len(examples), n), dtype=bool)
    for i, e in enumerate(examples):
        k = len(e.symbols)
        symbols[i, :k] = e.symbols
        gold[i, :k] = e.durations
        valid[i, :k] = True
    return symbols, gold, valid


def duration_loss(predictions, gold, valid: np.ndarray | None = None) -> Tensor:
    """Mean absolute error over (valid) symbols, on raw predictions."""
    predictions = as_tensor(predictions)
    gold = np.asarray(gold, dtype=np.float64)
    if predictions.shape != gold.shape:
        raise ValueError(f"prediction shape {predictions.shape} != gold shape {gold.shape}")
    err = tabs(predictions - gold)
    if valid is None:
        return err.mean()
    w = np.asarray(valid, dtype=np.float64)
    return (err * (w / w.sum())).sum()


def raw_predictions(model: DurationModel, batch: Sequence[DurationExample]) -> tuple[Tensor, np.ndarray, np.ndarray]:
    symbols, gold, valid = _pad(batch)
    cond = model.encode_condition([e.z_f for e in batch]) if model.condition_encoder is not None else None
    return model(symbols, valid, cond), gold, valid


def duration_train_step(model: DurationModel, batch: Sequence[DurationExample], optimizer: Adam) -> float:
    optimizer.zero_grad()
    pred, gold, valid = raw_predictions(model, batch)
    loss = duration_loss(pred, gold, valid)
    value = float(loss.data)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite duration loss {value}")
    if loss.requires_grad:
        loss.backward()
    optimizer.step()
    return value


def round_durations(raw) -> np.ndarray:
    """Nearest integer (ties to even), never below 1."""
    return np.maximum(np.rint(np.asarray(raw, dtype=np.float64)), 1.0).astype(np.int64)


def predict_durations(model: DurationModel, symbols, z_f=None) -> np.ndarray:
    if len(symbols) == 0:
        raise ValueError("cannot predict durations for an empty symbol sequence")
    return predict_durations_batch(model, [symbols], [list(z_f or [])])[0]


def predict_durations_batch(model: DurationModel, symbol_lists, z_f_lists=None) -> list[np.ndarray]:
    z_f_lists = z_f_lists or [[] for _ in symbol_lists]
    if any(len(z) for z in z_f_lists) and model.condition_encoder is None:
        raise ValueError("condition tokens given but the duration model has no adapters injected")
    examples = [DurationExample(s, np.ones(len(s), dtype=np.int64), z) for s, z in zip(symbol_lists, z_f_lists)]
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            pred, _, _ = raw_predictions(model, examples)
    finally:
        model.train(was_training)
    return [round_durations(pred.data[i, :len(s)]) for i, s in enumerate(symbol_lists)]


def expand_to_alignment(symbol_embeddings, durations):
    """Repeat row ``i`` of ``symbol_embeddings`` ``durations[i]`` times."""
    durations = np.asarray(durations)
    if np.any(durations < 1) or not np.all(durations == np.round(durations)):
        raise ValueError("durations must be positive integers")
    if len(durations) != len(symbol_embeddings):
        raise ValueError("one duration per symbol required")
    index = np.repeat(np.arange(len(durations)), durations.astype(np.int64))
    if isinstance(symbol_embeddings, Tensor):
        return symbol_embeddings[index]
    return np.asarray(symbol_embeddings)[index]
