"""Conditional flow matching: probability path, regression target, masking, loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import Adam, Tensor

LOSS_POLICIES = ("masked", "all")


@dataclass(frozen=True)
class PathParams:
    sigma_min: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.sigma_min < 1.0:
            raise ValueError(f"sigma_min must lie in (0, 1), got {self.sigma_min}")


@dataclass(frozen=True)
class MaskSpec:
    """Which frames of ``x1`` are hidden from the model.

    For ``mode="span"`` a ``None`` start or length is drawn from the rng passed
    to :func:`apply_mask` (length fraction uniform in ``length_range``).
    """

    mode: str = "span"
    start: float | None = None
    length: float | None = None
    length_range: tuple[float, float] = (0.7, 1.0)

    def __post_init__(self):
        if self.mode not in ("all", "span", "none"):
            raise ValueError(f"unknown mask mode {self.mode!r}")
        for name in ("start", "length"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"mask {name} fraction {v} outside [0, 1]")
        lo, hi = self.length_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"bad length_range {self.length_range}")


@dataclass
class TrainingExample:
    x1: np.ndarray            # (frames, feature_dim)
    symbols: np.ndarray       # (frames,) frame-aligned symbol ids
    z_f: list[str] = field(default_factory=list)
    mask: MaskSpec = field(default_factory=MaskSpec)

    def __post_init__(self):
        self.x1 = np.asarray(self.x1, dtype=np.float64)
        self.symbols = np.asarray(self.symbols, dtype=np.int64)
        if self.x1.ndim != 2 or len(self.x1) != len(self.symbols):
            raise ValueError(f"x1 {self.x1.shape} and symbols {self.symbols.shape} are not aligned")


def _check_same_shape(op: str, a, b) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"{op}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def conditional_path(x0, x1, t, params: PathParams = PathParams()):
    """``(1 - (1 - sigma_min) t) x0 + t x1``; ``t`` broadcasts over leading dims."""
    _check_same_shape("conditional_path", x0, x1)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    # (1 - t) + sigma t equals 1 - (1 - sigma) t but is exact at both endpoints
    return ((1.0 - t) + params.sigma_min * t) * x0 + t * x1


def target_field(x0, x1, params: PathParams = PathParams()):
    """Regression target ``x1 - (1 - sigma_min) x0``; it does not depend on t."""
    _check_same_shape("target_field", x0, x1)
    return np.asarray(x1, dtype=np.float64) - (1.0 - params.sigma_min) * np.asarray(x0, dtype=np.float64)


def mask_vector(n_frames: int, spec: MaskSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """Boolean per-frame mask (True = hidden)."""
    if spec.mode == "all":
        return np.ones(n_frames, dtype=bool)
    if spec.mode == "none":
        return np.zeros(n_frames, dtype=bool)
    length = spec.length
    if length is None:
        if rng is None:
            raise ValueError("random span mask needs an rng")
        length = rng.uniform(*spec.length_range)
    start = spec.start
    if start is None:
        if rng is None:
            raise ValueError("random span mask needs an rng")
        start = rng.uniform(0.0, 1.0 - length)
    first = math.floor(start * n_frames)
    count = math.floor(length * n_frames)
    out = np.zeros(n_frames, dtype=bool)
    out[first:min(first + count, n_frames)] = True
    return out


def masked_features(x1: np.ndarray, mask: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """``x1`` with hidden frames set to ``fill`` plus a trailing 0/1 indicator channel."""
    x1 = np.asarray(x1, dtype=np.float64)
    out = np.concatenate([x1, np.zeros(x1.shape[:-1] + (1,))], axis=-1)
    out[mask, :-1] = fill
    out[mask, -1] = 1.0
    return out


def apply_mask(x1, spec: MaskSpec, rng: np.random.Generator | None = None):
    """Return ``(masked features with indicator channel, boolean mask)``."""
    x1 = np.asarray(x1, dtype=np.float64)
    mask = mask_vector(len(x1), spec, rng)
    return masked_features(x1, mask), mask


@dataclass
class Batch:
    """Padded batch. ``valid`` marks real frames; padding is never attended or scored."""

    x1: np.ndarray        # (B, T, F)
    symbols: np.ndarray   # (B, T)
    valid: np.ndarray     # (B, T)
    z_f: list[list[str]]
    masks: list[MaskSpec]

    @property
    def size(self) -> int:
        return len(self.x1)


def collate(examples: Sequence[TrainingExample]) -> Batch:
    if not examples:
        raise ValueError("empty batch")
    n_feat = examples[0].x1.shape[1]
    t_max = max(len(e.x1) for e in examples)
    b = len(examples)
    x1 = np.zeros((b, t_max, n_feat))
    symbols = np.zeros((b, t_max), dtype=np.int64)
    valid = np.zeros((b, t_max), dtype=bool)
    for i, e in enumerate(examples):
        n = len(e.x1)
        x1[i, :n] = e.x1
        symbols[i, :n] = e.symbols
        valid[i, :n] = True
    return Batch(x1, symbols, valid, [list(e.z_f) for e in examples], [e.mask for e in examples])


def loss_weights(valid: np.ndarray, masks: np.ndarray, policy: str) -> np.ndarray:
    """Per-frame weights that turn a squared-error sum into the batch-mean of per-example MSEs.

    ``policy="masked"`` scores hidden frames only, falling back to every frame
    when an example has none hidden.
    """
    if policy not in LOSS_POLICIES:
        raise ValueError(f"unknown loss policy {policy!r}")
    selected = valid.copy()
    if policy == "masked":
        hidden = masks & valid
        has_hidden = hidden.any(axis=1)
        selected[has_hidden] = hidden[has_hidden]
    counts = selected.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("an example has no frames to score")
    return selected / counts[:, None] / len(valid)


def batch_cfm_loss(model, batch: Batch, t: np.ndarray, x0: np.ndarray, masks: np.ndarray,
                   params: PathParams = PathParams(), policy: str = "masked",
                   cond=None) -> Tensor:
    """Mean over the batch of per-example masked MSE between prediction and target."""
    psi = conditional_path(x0, batch.x1, t, params) * batch.valid[..., None]
    target = target_field(x0, batch.x1, params)
    ctx = masked_features(batch.x1, masks | ~batch.valid)
    ctx[~batch.valid] = 0.0
    if cond is None and model.condition_encoder is not None:
        cond = model.encode_condition(batch.z_f)
    pred = model(Tensor(psi), ctx, batch.symbols, t, cond=cond, frame_mask=batch.valid)
    w = loss_weights(batch.valid, masks, policy) / x0.shape[-1]
    diff = pred - target
    return (diff * diff * w[..., None]).sum()


def cfm_loss(model, example: TrainingExample, t: float, x0, loss_mask_policy: str = "masked",
             params: PathParams = PathParams(), rng: np.random.Generator | None = None) -> Tensor:
    """Single-example flow-matching loss (differentiable w.r.t. trainable parameters)."""
    _check_same_shape("cfm_loss", x0, example.x1)
    batch = collate([example])
    masks = mask_vector(len(example.x1), example.mask, rng)[None]
    return batch_cfm_loss(model, batch, np.array([t]), np.asarray(x0, dtype=np.float64)[None],
                          masks, params, loss_mask_policy)


def sample_training_draws(batch: Batch, rng: np.random.Generator):
    """Per-example ``t ~ U[0, 1]``, ``x0 ~ N(0, I)`` and frame masks, in a fixed draw order."""
    b, t_max, n_feat = batch.x1.shape
    t = np.empty(b)
    x0 = np.zeros((b, t_max, n_feat))
    masks = np.zeros((b, t_max), dtype=bool)
    for i in range(b):
        n = int(batch.valid[i].sum())
        t[i] = rng.uniform(0.0, 1.0)
        x0[i, :n] = rng.standard_normal((n, n_feat))
        masks[i, :n] = mask_vector(n, batch.masks[i], rng)
    return t, x0, masks


def train_step(model, batch: Batch, optimizer: Adam, rng: np.random.Generator,
               params: PathParams = PathParams(), policy: str = "masked") -> float:
    """One optimiser update on the batch-mean flow-matching loss.

    Gradients reach only tensors with ``requires_grad`` and updates only the
    optimizer's parameter list.
    """
    t, x0, masks = sample_training_draws(batch, rng)
    optimizer.zero_grad()
    loss = batch_cfm_loss(model, batch, t, x0, masks, params, policy)
    value = float(loss.data)
    if not math.isfinite(value):
        optimizer.zero_grad()
        raise FloatingPointError(f"non-finite loss {value}; step aborted")
    if loss.requires_grad:
        loss.backward()
    optimizer.step()
    return value


def pretrain_step(model, batch: Batch, optimizer: Adam, rng: np.random.Generator,
                  params: PathParams = PathParams(), policy: str = "masked",
                  full_training: bool = False) -> float:
    """Flow-matching update on every trainable parameter of an un-adapted backbone.

    ``full_training=True`` permits an injected model (the train-everything baselines).
    """
    if model.adapter_spec is not None and not full_training:
        raise ValueError("pretrain_step on an adapted model needs full_training=True")
    return train_step(model, batch, optimizer, rng, params, policy)
