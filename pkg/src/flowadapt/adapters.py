"""Post-hoc conditioning of a frozen backbone.

A frozen condition encoder feeds a trainable projection; zero-initialised
cross-attention in every layer reads the projected tokens; one of the
parameter-efficient mechanisms (sequential/parallel adapters, LoRA, LoRA with
bias-tuning) bridges the new modules and the frozen weights. Every new
module starts as an exact identity so injection leaves outputs unchanged.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .flow import Batch, PathParams, train_step
from .layers import (
    Embedding,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    MultiHeadAttention,
    init_normal,
    key_padding_bias,
)
from .numerics import (
    Adam,
    AdamConfig,
    ShapeError,
    Tensor,
    as_tensor,
    no_grad,
    relu,
    seeded_rng,
    softmax,
)
from .transformer import BackboneConfig, ConditionContext, TransformerLayer

ADAPTER_KINDS = ("sequential", "parallel", "lora", "lora+bias_tuning", "none")
LORA_PLACEMENTS = ("self_attention_inputs", "all_linear")
SPECIAL_TOKENS = ("<pad>", "<mask>")


@dataclass
class AdapterSpec:
    kind: str = "lora+bias_tuning"
    lora_rank: int = 8
    lora_alpha: float = 8.0
    lora_dropout: float = 0.05
    lora_placement: str = "self_attention_inputs"
    adapter_hidden: int = 16
    cross_attn_heads: int = 4
    cross_attn_head_dim: int = 16
    train_all: bool = False

    def __post_init__(self):
        if self.kind not in ADAPTER_KINDS:
            raise ValueError(f"unknown adapter kind {self.kind!r}; expected one of {ADAPTER_KINDS}")
        if self.lora_placement not in LORA_PLACEMENTS:
            raise ValueError(f"unknown LoRA placement {self.lora_placement!r}")
        if self.uses_lora and self.lora_rank <= 0:
            raise ValueError(f"LoRA rank must be positive, got {self.lora_rank}")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ValueError("lora_dropout must lie in [0, 1)")
        if self.adapter_hidden < 1 or self.cross_attn_heads < 1 or self.cross_attn_head_dim < 1:
            raise ValueError("adapter and cross-attention sizes must be positive")

    @property
    def uses_lora(self) -> bool:
        return self.kind in ("lora", "lora+bias_tuning")

    @property
    def bias_tuning(self) -> bool:
        return self.kind == "lora+bias_tuning"

    def to_dict(self) -> dict:
        return asdict(self)


def named_adapter_specs(full_scale: bool = False) -> dict[str, AdapterSpec]:
    """The five adaptive-module configurations compared in the adapter harness."""
    if full_scale:
        base = AdapterSpec(lora_rank=64, lora_alpha=64.0, adapter_hidden=64,
                           cross_attn_heads=12, cross_attn_head_dim=64)
    else:
        base = AdapterSpec()
    return {
        "sequential_adapter": replace(base, kind="sequential"),
        "parallel_adapter": replace(base, kind="parallel"),
        "lora_self_attention": replace(base, kind="lora"),
        "lora_self_attention+bias_tuning": replace(base, kind="lora+bias_tuning"),
        "lora_all_linear": replace(base, kind="lora", lora_placement="all_linear"),
    }


# -- condition encoder ---------------------------------------------------------

@dataclass
class EncoderConfig:
    dim: int = 32
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 64
    max_len: int = 64
    fit_steps: int = 300
    fit_lr: float = 3e-3
    fit_batch: int = 32
    mask_rate: float = 0.15

    def to_dict(self) -> dict:
        return asdict(self)


class ConditionEncoder(Module):
    """Small transformer over condition tokens with a trainable output projection.

    The internals are fitted once with a masked-token objective and then
    frozen; only ``projection`` trains afterwards. Frozen hidden states are
    memoised per token sequence.
    """

    def __init__(self, vocab, config: EncoderConfig, out_dim: int, seed: int = 0):
        rng = seeded_rng(seed)
        self.vocab = list(SPECIAL_TOKENS) + [t for t in vocab if t not in SPECIAL_TOKENS]
        self.index = {tok: i for i, tok in enumerate(self.vocab)}
        self.enc_config = config
        self.token_embed = Embedding(len(self.vocab), config.dim, rng)
        self.pos_embed = Embedding(config.max_len, config.dim, rng, std=0.1)
        self.layers = ModuleList(
            TransformerLayer(config.dim, config.ff_dim, config.n_heads, rng)
            for _ in range(config.n_layers))
        self.ln = LayerNorm(config.dim)
        self.projection = Linear(config.dim, out_dim, rng)
        self.frozen = False
        self._cache: dict[tuple[str, ...], np.ndarray] = {}

    def ids(self, tokens) -> np.ndarray:
        out = []
        for tok in tokens:
            if tok not in self.index or tok in SPECIAL_TOKENS:
                raise ValueError(f"unknown condition token {tok!r}")
            out.append(self.index[tok])
        return np.asarray(out, dtype=np.int64)

    def _internal(self, ids: np.ndarray, valid: np.ndarray) -> Tensor:
        n = ids.shape[1]
        if n > self.enc_config.max_len:
            raise ValueError(f"condition of {n} tokens exceeds encoder max_len {self.enc_config.max_len}")
        h = self.token_embed(ids) + self.pos_embed.weight[:n]
        bias = key_padding_bias(valid)
        for layer in self.layers:
            h = layer(h, bias)
        return self.ln(h)

    def hidden_states(self, token_lists) -> tuple[np.ndarray, np.ndarray]:
        """Frozen encoder output ``(B, S, dim)`` and key validity ``(B, S)``."""
        seqs = [tuple(toks) for toks in token_lists]
        s_max = max((len(s) for s in seqs), default=0)
        hidden = np.zeros((len(seqs), s_max, self.enc_config.dim))
        valid = np.zeros((len(seqs), s_max), dtype=bool)
        for i, seq in enumerate(seqs):
            if not seq:
                continue
            cached = self._cache.get(seq) if self.frozen else None
            if cached is None:
                ids = self.ids(seq)[None]
                with no_grad():
                    cached = self._internal(ids, np.ones_like(ids, dtype=bool)).data[0]
                if self.frozen:
                    self._cache[seq] = cached
            hidden[i, :len(seq)] = cached
            valid[i, :len(seq)] = True
        return hidden, valid

    def encode_batch(self, token_lists) -> ConditionContext:
        hidden, valid = self.hidden_states(token_lists)
        values = self.projection(Tensor(hidden))
        return ConditionContext(values=values, key_mask=valid)

    def encode(self, tokens) -> Tensor:
        """``(S, out_dim)`` projected encoding of one token sequence."""
        if not len(tokens):
            return Tensor(np.zeros((0, self.projection.out_features)))
        ctx = self.encode_batch([tokens])
        return ctx.values.reshape(*ctx.values.shape[1:])

    def internal_parameters(self) -> list[Tensor]:
        proj = {id(p) for p in self.projection.parameters()}
        return [p for p in self.parameters() if id(p) not in proj]

    def freeze(self) -> None:
        for p in self.internal_parameters():
            p.requires_grad = False
        self.frozen = True
        self._cache.clear()

    def fit(self, token_lists, steps: int | None = None, seed: int = 0) -> list[float]:
        """Masked-token fitting of the internals (Brier loss on token posteriors), then freeze."""
        cfg = self.enc_config
        steps = cfg.fit_steps if steps is None else steps
        rng = seeded_rng(seed)
        corpus = [self.ids(toks) for toks in token_lists if len(toks)]
        head = Linear(cfg.dim, len(self.vocab), rng)
        params = self.internal_parameters() + head.parameters()
        for p in params:
            p.requires_grad = True
        opt = Adam(params, AdamConfig(lr=cfg.fit_lr, warmup_steps=max(1, steps // 10)))
        mask_id = self.index["<mask>"]
        history = []
        for _ in range(steps if corpus else 0):
            picks = rng.integers(0, len(corpus), size=cfg.fit_batch)
            seqs = [corpus[i] for i in picks]
            s_max = max(len(s) for s in seqs)
            ids = np.zeros((len(seqs), s_max), dtype=np.int64)
            valid = np.zeros_like(ids, dtype=bool)
            hidden_at = np.zeros_like(ids, dtype=bool)
            for i, s in enumerate(seqs):
                ids[i, :len(s)] = s
                valid[i, :len(s)] = True
                chosen = rng.random(len(s)) < cfg.mask_rate
                if not chosen.any():
                    chosen[rng.integers(len(s))] = True
                hidden_at[i, :len(s)] = chosen
            targets = np.eye(len(self.vocab))[ids]
            ids = np.where(hidden_at, mask_id, ids)
            probs = softmax(head(self._internal(ids, valid)), axis=-1)
            diff = probs - targets
            w = hidden_at / hidden_at.sum()
            loss = (diff * diff * w[..., None]).sum()
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(float(loss.data))
        self.freeze()
        return history

    def with_projection(self, out_dim: int, seed: int = 0) -> "ConditionEncoder":
        """Share the frozen internals, attach a fresh trainable projection to ``out_dim``."""
        clone = object.__new__(ConditionEncoder)
        clone.__dict__.update(self.__dict__)
        clone.projection = Linear(self.enc_config.dim, out_dim, seeded_rng(seed))
        clone._cache = self._cache if self.frozen else {}
        return clone


def encode_condition(encoder: ConditionEncoder, z_f) -> Tensor:
    return encoder.encode(list(z_f))


# -- cross-attention -----------------------------------------------------------

class CrossAttention(Module):
    """Residual multi-head attention from frames to condition tokens, output projection zeroed."""

    def __init__(self, model_dim: int, n_heads: int, head_dim: int, rng: np.random.Generator,
                 kv_dim: int | None = None):
        self.ln = LayerNorm(model_dim)
        self.attn = MultiHeadAttention(model_dim, kv_dim or model_dim, n_heads, head_dim, rng,
                                       out_dim=model_dim, zero_out=True)

    def __call__(self, h, cond: ConditionContext | None):
        if cond is None or cond.length == 0:
            return h
        kv_dim = self.attn.k.in_features
        if cond.values.shape[-1] != kv_dim:
            raise ShapeError(
                f"cross-attention: condition width {cond.values.shape[-1]} != configured {kv_dim}")
        out = self.attn(self.ln(h), cond.values, key_padding_bias(cond.key_mask, h.dtype))
        if not cond.present.all():
            out = out * cond.present[:, None, None].astype(h.dtype)
        return h + out


def cross_attention_forward(module: CrossAttention, hidden, cond) -> Tensor:
    """Functional form accepting unbatched ``(T, D)`` hidden and ``(S, D)`` condition."""
    hidden = as_tensor(hidden)
    unbatched = hidden.ndim == 2
    if unbatched:
        hidden = hidden.reshape(1, *hidden.shape)
    if not isinstance(cond, ConditionContext):
        cond = as_tensor(cond)
        if cond.ndim == 2:
            cond = cond.reshape(1, *cond.shape)
        cond = ConditionContext(values=cond, key_mask=np.ones(cond.shape[:2], dtype=bool))
    out = module(hidden, cond)
    return out.reshape(*out.shape[1:]) if unbatched else out


# -- parameter-efficient mechanisms ------------------------------------------------

class LoRA(Module):
    """Low-rank delta ``(alpha / r) B A x`` with ``B`` zero-initialised."""

    def __init__(self, n_in: int, n_out: int, rank: int, alpha: float, dropout: float,
                 rng: np.random.Generator):
        if rank <= 0:
            raise ValueError(f"LoRA rank must be positive, got {rank}")
        self.A = Tensor(init_normal(rng, 1.0 / np.sqrt(n_in), (rank, n_in)), requires_grad=True)
        self.B = Tensor(np.zeros((n_out, rank)), requires_grad=True)
        self.rank = rank
        self.alpha = float(alpha)
        self.dropout = float(dropout)
        self.rng = rng

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def __call__(self, x):
        if self.training and self.dropout > 0:
            keep = self.rng.random(x.shape) >= self.dropout
            x = x * (keep / (1.0 - self.dropout))
        return ((x @ self.A.T) @ self.B.T) * self.scale

    def delta_weight(self) -> np.ndarray:
        return self.scale * (self.B.data @ self.A.data)


def lora_linear_forward(layer: Linear, attachment: LoRA, x):
    return x @ layer.weight.T + layer.bias + attachment(x)


class AdapterBlock(Module):
    """Two-layer ReLU bottleneck; the up-projection starts at zero.

    ``sequential`` reads the sub-block output, ``parallel`` the sub-block input;
    both add their result to the sub-block output.
    """

    def __init__(self, dim: int, hidden: int, mode: str, rng: np.random.Generator):
        if mode not in ("sequential", "parallel"):
            raise ValueError(f"adapter mode must be sequential or parallel, got {mode!r}")
        self.mode = mode
        self.down = Linear(dim, hidden, rng)
        self.up = Linear(hidden, dim, rng, zero_init=True)

    def __call__(self, sub_block_in, sub_block_out):
        src = sub_block_out if self.mode == "sequential" else sub_block_in
        return sub_block_out + self.up(relu(self.down(src)))


def adapter_block_forward(block: AdapterBlock, sub_block_in, sub_block_out):
    return block(sub_block_in, sub_block_out)


class BiasTune(Module):
    """``(y + b) * s`` on a linear layer's output, ``b = 0`` and ``s = 1`` at start."""

    def __init__(self, n_out: int):
        self.b = Tensor(np.zeros(n_out), requires_grad=True)
        self.s = Tensor(np.ones(n_out), requires_grad=True)

    def __call__(self, y):
        if y.shape[-1] != self.b.shape[0]:
            raise ShapeError(f"bias-tuning: output width {y.shape[-1]} != vector width {self.b.shape[0]}")
        return (y + self.b) * self.s


def bias_tuned_linear(layer: Linear, attachment: BiasTune, x):
    y = x @ layer.weight.T + layer.bias
    if layer.lora is not None:
        y = y + layer.lora(x)
    return attachment(y)


# -- injection and partitioning ------------------------------------------------------

@dataclass
class ParameterPartition:
    trainable: list[str] = field(default_factory=list)
    frozen: list[str] = field(default_factory=list)
    n_trainable: int = 0
    n_frozen: int = 0

    @classmethod
    def from_model(cls, model: Module) -> "ParameterPartition":
        part = cls()
        for name, p in model.named_parameters():
            if p.requires_grad:
                part.trainable.append(name)
                part.n_trainable += p.size
            else:
                part.frozen.append(name)
                part.n_frozen += p.size
        return part

    def tensors(self, model: Module, which: str = "trainable") -> list[Tensor]:
        named = dict(model.named_parameters())
        return [named[n] for n in getattr(self, which)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterPartition":
        return cls(list(d["trainable"]), list(d["frozen"]), int(d["n_trainable"]), int(d["n_frozen"]))


def _lora_targets(layer: TransformerLayer, placement: str) -> list[Linear]:
    attn = layer.self_attn
    if placement == "self_attention_inputs":
        return [attn.q, attn.k, attn.v]
    return [attn.q, attn.k, attn.v, attn.o, layer.ff.ff1, layer.ff.ff2]


def inject_adapters(model, spec: AdapterSpec, encoder: ConditionEncoder, seed: int = 0):
    """Freeze the backbone and attach the conditioning pathway plus ``spec``'s modules.

    Returns ``(model, partition)``; the model is modified in place.
    """
    if model.adapter_spec is not None or model.condition_encoder is not None:
        raise ValueError("adapters already injected into this model")
    rng = seeded_rng(seed)
    dim = model.config.model_dim
    pretrained_linears = [m for m in model.modules() if isinstance(m, Linear)]
    pretrained_norms = [m for m in model.modules() if isinstance(m, LayerNorm)]
    for p in model.parameters():
        p.requires_grad = False

    if not encoder.frozen:
        encoder.freeze()
    model.condition_encoder = encoder.with_projection(dim, seed=int(rng.integers(2**31)))
    for layer in model.layers:
        layer.cross_attn = CrossAttention(dim, spec.cross_attn_heads, spec.cross_attn_head_dim, rng)

    if spec.kind in ("sequential", "parallel"):
        for layer in model.layers:
            layer.attn_adapter = AdapterBlock(dim, spec.adapter_hidden, spec.kind, rng)
            layer.ff_adapter = AdapterBlock(dim, spec.adapter_hidden, spec.kind, rng)
    if spec.uses_lora:
        for layer in model.layers:
            for lin in _lora_targets(layer, spec.lora_placement):
                lin.lora = LoRA(lin.in_features, lin.out_features, spec.lora_rank,
                                spec.lora_alpha, spec.lora_dropout,
                                seeded_rng(int(rng.integers(2**31))))
    if spec.bias_tuning:
        for lin in pretrained_linears:
            lin.bias_tune = BiasTune(lin.out_features)
        for norm in pretrained_norms:
            norm.weight.requires_grad = True
            norm.bias.requires_grad = True
    if spec.train_all:
        internal = {id(p) for p in model.condition_encoder.internal_parameters()}
        for p in model.parameters():
            if id(p) not in internal:
                p.requires_grad = True

    model.adapter_spec = spec
    return model, ParameterPartition.from_model(model)


def is_adaptive_parameter(name: str, spec: AdapterSpec | None) -> bool:
    """Parameters counted as "adaptive modules" (excludes cross-attention and the projection)."""
    if ".lora." in name or "_adapter." in name or ".bias_tune." in name:
        return True
    if spec is not None and spec.bias_tuning:
        return (name.endswith(("ln1.weight", "ln1.bias", "ln2.weight", "ln2.bias"))
                or name.startswith("final_ln.")) and ".cross_attn." not in name
    return False


def adaptive_parameter_count(model) -> int:
    """Enumerate adaptive-module parameters of an injected model."""
    spec = model.adapter_spec
    return sum(p.size for n, p in model.named_parameters()
               if is_adaptive_parameter(n, spec) and not n.startswith("condition_encoder."))


def cross_attention_parameter_count(model) -> int:
    return sum(p.size for n, p in model.named_parameters() if ".cross_attn." in n)


def adapter_block_param_formula(dim: int, hidden: int) -> int:
    return 2 * dim * hidden + hidden + dim


def lora_param_formula(n_in: int, n_out: int, rank: int) -> int:
    return rank * (n_in + n_out)


def adaptive_param_formula(config: BackboneConfig, spec: AdapterSpec) -> int:
    """Closed-form adaptive-module parameter count for a vector-field backbone."""
    d, f, n = config.model_dim, config.ff_dim, config.n_layers
    if spec.kind in ("sequential", "parallel"):
        return n * 2 * adapter_block_param_formula(d, spec.adapter_hidden)
    if spec.kind == "none":
        return 0
    r = spec.lora_rank
    if spec.lora_placement == "self_attention_inputs":
        total = n * 3 * lora_param_formula(d, d, r)
    else:
        total = n * (4 * lora_param_formula(d, d, r) + lora_param_formula(d, f, r)
                     + lora_param_formula(f, d, r))
    if spec.bias_tuning:
        out_dims = n * (4 * d + f + d) + d + config.feature_dim
        norm_params = 2 * d * (2 * n + 1)
        total += 2 * out_dims + norm_params
    return total


def backbone_param_formula(config: BackboneConfig) -> int:
    c = config
    d, f = c.model_dim, c.ff_dim
    per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
    return (c.vocab_size * c.symbol_dim + c.input_dim * d + d + c.max_seq_len * d
            + c.n_layers * per_layer + 2 * d + d * c.feature_dim + c.feature_dim)


# -- merging and fine-tuning -------------------------------------------------------------

def merge_lora(model) -> Module:
    """Fold every LoRA delta into its base weight and drop the attachment."""
    if model.training:
        raise RuntimeError("merge_lora requires eval mode (LoRA dropout is active in training mode)")
    targets = [m for m in model.modules() if isinstance(m, Linear) and m.lora is not None]
    if not targets:
        raise ValueError("no LoRA attachments to merge")
    for lin in targets:
        lin.weight.data = lin.weight.data + lin.lora.delta_weight()
        lin.lora = None
    return model


def finetune_step(model, partition: ParameterPartition, batch: Batch, optimizer: Adam,
                  rng: np.random.Generator, params: PathParams = PathParams(),
                  policy: str = "masked") -> float:
    """Flow-matching update restricted to the partition's trainable set."""
    if model.adapter_spec is None:
        raise ValueError("finetune_step needs an adapter-injected model")
    allowed = {id(p) for p in partition.tensors(model, "trainable")}
    if any(id(p) not in allowed for p in optimizer.params):
        raise ValueError("optimizer holds parameters outside the trainable partition")
    return train_step(model, batch, optimizer, rng, params, policy)


def hash_parameters(model: Module, names=None) -> str:
    """SHA-256 over (name, shape, raw bytes) of the named parameters in sorted order."""
    named = dict(model.named_parameters())
    h = hashlib.sha256()
    for name in sorted(named if names is None else names):
        arr = np.ascontiguousarray(named[name].data)
        h.update(name.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()
