"""Run configuration: a JSON key-value tree with strict key checking and a content fingerprint."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .adapters import AdapterSpec, EncoderConfig
from .duration import DurationConfig
from .flow import LOSS_POLICIES, PathParams
from .numerics import AdamConfig
from .sampler import SolverConfig
from .tasks import TaskSpec
from .transformer import BackboneConfig

CONFIG_VERSION = 1
CORPUS_KINDS = ("task", "toy_bimodal")


@dataclass
class CorpusConfig:
    kind: str = "task"
    n_pretrain: int = 1000
    n_finetune: int = 3000
    held_out_fraction: float = 0.15
    toy_frames: int = 8

    def __post_init__(self):
        if self.kind not in CORPUS_KINDS:
            raise ValueError(f"unknown corpus kind {self.kind!r}; expected one of {CORPUS_KINDS}")
        if self.n_pretrain < 1 or self.n_finetune < 1:
            raise ValueError("corpus sizes must be >= 1")


@dataclass
class TrainingConfig:
    pretrain_steps: int = 2000
    finetune_steps: int = 4200   # emphasis runs 0.6x: 2520 acoustic steps
    duration_pretrain_steps: int | None = None   # default: pretrain_steps
    duration_finetune_steps: int | None = None   # default: 2x the acoustic fine-tune steps
    batch_size: int = 16
    checkpoint_every: int = 500
    log_every: int = 10
    mask_all_prob: float = 0.3
    span_length_range: tuple[float, float] = (0.7, 1.0)
    loss_policy: str = "masked"
    data_fraction: float = 1.0
    emphasis_step_scale: float = 0.6

    def __post_init__(self):
        for name in ("pretrain_steps", "finetune_steps", "batch_size", "checkpoint_every", "log_every"):
            if getattr(self, name) < 0:
                raise ValueError(f"training.{name} must be >= 0")
        if self.batch_size < 1 or self.checkpoint_every < 1 or self.log_every < 1:
            raise ValueError("batch_size, checkpoint_every and log_every must be >= 1")
        if self.loss_policy not in LOSS_POLICIES:
            raise ValueError(f"unknown loss policy {self.loss_policy!r}")
        if not 0.0 < self.data_fraction <= 1.0:
            raise ValueError("data_fraction must lie in (0, 1]")
        if not 0.0 <= self.mask_all_prob <= 1.0:
            raise ValueError("mask_all_prob must lie in [0, 1]")


_SECTIONS = {
    "backbone": BackboneConfig,
    "duration": DurationConfig,
    "path": PathParams,
    "task": TaskSpec,
    "corpus": CorpusConfig,
    "adapter": AdapterSpec,
    "encoder": EncoderConfig,
    "solver": SolverConfig,
    "optimizer": AdamConfig,
    "training": TrainingConfig,
}


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    duration: DurationConfig = field(default_factory=DurationConfig)
    path: PathParams = field(default_factory=PathParams)
    task: TaskSpec = field(default_factory=TaskSpec)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    adapter: AdapterSpec | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    seed: int = 0
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.corpus.kind == "task":
            if self.backbone.feature_dim != self.task.feature_dim:
                raise ValueError(f"backbone.feature_dim {self.backbone.feature_dim} != "
                                 f"task.feature_dim {self.task.feature_dim}")
            if self.backbone.vocab_size < self.task.vocab_size:
                raise ValueError("backbone.vocab_size smaller than the task vocabulary")
            if self.duration.vocab_size < self.task.vocab_size:
                raise ValueError("duration.vocab_size smaller than the task vocabulary")

    # -- schedule ------------------------------------------------------------------
    @property
    def acoustic_finetune_steps(self) -> int:
        scale = self.training.emphasis_step_scale if self.task.task == "emphasis" else 1.0
        return int(round(self.training.finetune_steps * scale))

    @property
    def duration_finetune_steps(self) -> int:
        explicit = self.training.duration_finetune_steps
        return 2 * self.acoustic_finetune_steps if explicit is None else explicit

    @property
    def duration_pretrain_steps(self) -> int:
        explicit = self.training.duration_pretrain_steps
        return self.training.pretrain_steps if explicit is None else explicit

    # -- serialisation ---------------------------------------------------------------
    def to_dict(self) -> dict:
        out = {"version": CONFIG_VERSION}
        for name in _SECTIONS:
            section = getattr(self, name)
            out[name] = None if section is None else asdict(section)
        out["seed"] = self.seed
        out["out_dir"] = self.out_dir
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        version = d.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {version}")
        unknown = sorted(set(d) - set(_SECTIONS) - {"seed", "out_dir"})
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        kwargs = {}
        for name, section_cls in _SECTIONS.items():
            if name in d:
                kwargs[name] = None if d[name] is None else _build(section_cls, d[name], name)
        for name in ("seed", "out_dir"):
            if name in d:
                kwargs[name] = d[name]
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def fingerprint(self) -> str:
        """Content hash of everything that determines the run (the output directory excluded)."""
        d = self.to_dict()
        d.pop("out_dir")
        return _digest(d)

    def backbone_fingerprint(self) -> str:
        """Hash of the pieces a fine-tune must share with its base checkpoint."""
        d = self.to_dict()
        return _digest({k: d[k] for k in ("backbone", "duration", "path")})


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _build(section_cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ValueError(f"config section {where!r} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(section_cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ValueError(f"unknown keys in {where!r}: {unknown}")
    kwargs = {}
    for key, value in values.items():
        default = known[key].default
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return section_cls(**kwargs)
