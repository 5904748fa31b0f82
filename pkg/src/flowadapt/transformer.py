"""The pre-trained vector-field backbone.

Per-frame input is ``[time embedding | symbol embedding | masked features +
mask indicator | noisy sample]``, projected to ``model_dim``, plus a learned
absolute position embedding, followed by pre-LayerNorm transformer layers and
a linear head back to ``feature_dim``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    MultiHeadAttention,
    key_padding_bias,
)
from .numerics import Tensor, as_tensor, concat, seeded_rng


@dataclass
class BackboneConfig:
    n_layers: int = 4
    model_dim: int = 64
    ff_dim: int = 256
    n_heads: int = 4
    feature_dim: int = 8
    max_seq_len: int = 128
    vocab_size: int = 16
    time_dim: int = 32
    symbol_dim: int = 32

    def __post_init__(self):
        for name, value in asdict(self).items():
            if int(value) != value or value < 1:
                raise ValueError(f"BackboneConfig.{name} must be a positive integer, got {value}")
        if self.model_dim % self.n_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by n_heads {self.n_heads}")
        if self.time_dim % 2:
            raise ValueError("time_dim must be even")

    @classmethod
    def large_preset(cls) -> "BackboneConfig":
        # 80-dim Mel frames; symbol/time widths and vocab are not stated, these are stand-ins.
        return cls(n_layers=12, model_dim=768, ff_dim=3072, n_heads=12, feature_dim=80,
                   max_seq_len=2000, vocab_size=100, time_dim=256, symbol_dim=256)

    @property
    def input_dim(self) -> int:
        return self.time_dim + self.symbol_dim + 2 * self.feature_dim + 1

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_time_embedding(t, dim: int) -> np.ndarray:
    """Interleaved ``sin/cos(1000 t * f_i)`` with ``f_i = 10000^(-2i/dim)``.

    ``t`` may be a scalar (returns ``(dim,)``) or an array (returns ``(*t.shape, dim)``).
    """
    if dim % 2:
        raise ValueError(f"time embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    freqs = 10000.0 ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    pos = (t * 1000.0)[..., None] * freqs
    out = np.empty(t.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(pos)
    out[..., 1::2] = np.cos(pos)
    return out


def assemble_acoustic_input(t_emb, z_p, masked_x, psi_t, projection: Linear) -> Tensor:
    """Concatenate the four per-frame streams and project to model width.

    ``z_p``, ``masked_x`` and ``psi_t`` are ``(..., T, d)``; ``t_emb`` is
    ``(..., d_t)`` and is repeated over frames.
    """
    z_p, masked_x, psi_t = as_tensor(z_p), as_tensor(masked_x), as_tensor(psi_t)
    lengths = {z_p.shape[-2], masked_x.shape[-2], psi_t.shape[-2]}
    if len(lengths) != 1:
        raise ValueError(
            f"sequence lengths differ: z_p {z_p.shape}, masked_x {masked_x.shape}, psi_t {psi_t.shape}")
    t_emb = np.asarray(t_emb.data if isinstance(t_emb, Tensor) else t_emb, dtype=psi_t.dtype)
    frames = np.broadcast_to(t_emb[..., None, :], psi_t.shape[:-1] + t_emb.shape[-1:])
    stacked = concat([Tensor(frames), z_p, masked_x, psi_t], axis=-1)
    return projection(stacked)


@dataclass
class ConditionContext:
    """Encoded condition tokens for a batch: values ``(B, S, D)`` and key validity ``(B, S)``."""

    values: Tensor
    key_mask: np.ndarray
    present: np.ndarray = field(default=None)

    def __post_init__(self):
        self.key_mask = np.asarray(self.key_mask, dtype=bool)
        if self.present is None:
            self.present = self.key_mask.any(axis=-1)

    @property
    def length(self) -> int:
        return self.values.shape[1]


class TransformerLayer(Module):
    """Pre-LN block: self-attention, optional cross-attention, feed-forward.

    Adaptive modules hang off ``attn_adapter``/``ff_adapter``; ``cross_attn`` is
    filled in by adapter injection.
    """

    def __init__(self, dim: int, ff_dim: int, n_heads: int, rng: np.random.Generator):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, dim, n_heads, dim // n_heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_dim, rng)
        self.attn_adapter = None
        self.cross_attn = None
        self.ff_adapter = None

    def __call__(self, x, key_bias=None, cond: ConditionContext | None = None):
        normed = self.ln1(x)
        h = x + self.self_attn(normed, normed, key_bias)
        if self.attn_adapter is not None:
            h = self.attn_adapter(x, h)
        if self.cross_attn is not None:
            h = self.cross_attn(h, cond)
        h2 = h + self.ff(self.ln2(h))
        if self.ff_adapter is not None:
            h2 = self.ff_adapter(h, h2)
        return h2


class VectorFieldModel(Module):
    """Backbone predicting the flow velocity for every frame."""

    def __init__(self, config: BackboneConfig, seed: int = 0):
        rng = seeded_rng(seed)
        c = config
        self.config = c
        self.symbol_embed = Embedding(c.vocab_size, c.symbol_dim, rng)
        self.input_proj = Linear(c.input_dim, c.model_dim, rng)
        self.pos_embed = Embedding(c.max_seq_len, c.model_dim, rng, std=0.1)
        self.layers = ModuleList(
            TransformerLayer(c.model_dim, c.ff_dim, c.n_heads, rng) for _ in range(c.n_layers))
        self.final_ln = LayerNorm(c.model_dim)
        self.head = Linear(c.model_dim, c.feature_dim, rng)
        self.condition_encoder = None
        self.adapter_spec = None

    @property
    def has_cross_attention(self) -> bool:
        return any(layer.cross_attn is not None for layer in self.layers)

    def encode_condition(self, token_lists) -> ConditionContext | None:
        """Batch-encode condition token sequences; ``None`` if the model has no pathway."""
        if self.condition_encoder is None:
            if any(len(toks) for toks in token_lists):
                raise ValueError("condition tokens supplied but no adapters are injected")
            return None
        return self.condition_encoder.encode_batch(token_lists)

    def __call__(self, psi_t, masked_x, symbol_ids, t, cond: ConditionContext | None = None,
                 frame_mask: np.ndarray | None = None) -> Tensor:
        psi_t = as_tensor(psi_t)
        unbatched = psi_t.ndim == 2
        if unbatched:
            psi_t = psi_t.reshape(1, *psi_t.shape)
            masked_x = np.asarray(masked_x)[None]
            symbol_ids = np.asarray(symbol_ids)[None]
            frame_mask = None if frame_mask is None else np.asarray(frame_mask)[None]
        b = psi_t.shape[0]
        t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        t_emb = sinusoidal_time_embedding(t_arr, self.config.time_dim)
        z_p = self.symbol_embed(symbol_ids)
        inputs = assemble_acoustic_input(t_emb, z_p, masked_x, psi_t, self.input_proj)
        out = backbone_forward(self, inputs, cond, frame_mask)
        return out.reshape(*out.shape[1:]) if unbatched else out


def backbone_forward(model: VectorFieldModel, inputs: Tensor,
                     condition_context: ConditionContext | None = None,
                     frame_mask: np.ndarray | None = None) -> Tensor:
    """Run the transformer stack on assembled ``(B, T, model_dim)`` inputs."""
    if condition_context is not None and not model.has_cross_attention:
        raise ValueError("condition_context given to a backbone without cross-attention modules")
    n_frames = inputs.shape[1]
    if n_frames > model.config.max_seq_len:
        raise ValueError(f"sequence length {n_frames} exceeds max_seq_len {model.config.max_seq_len}")
    h = inputs + model.pos_embed.weight[:n_frames]
    key_bias = key_padding_bias(frame_mask, inputs.dtype)
    for layer in model.layers:
        h = layer(h, key_bias, condition_context)
    return model.head(model.final_ln(h))
