"""Synthetic speech-analog tasks, their rule-based detector, F1 scoring and dataset files.

Each symbol owns a fixed unit-energy feature pattern and a base duration.
Annotations alter the rendering:

* ``emphasis`` scales the symbol's frames so their energy grows by ``energy_scale``;
* ``pause`` appends near-silent frames after the symbol;
* ``burst`` appends frames carrying an oscillation at ``burst_frequency``.

Inserted frames are attributed to the preceding symbol, so the per-symbol
aligned duration is ``durations + extra_frames``.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .duration import DurationExample
from .flow import MaskSpec, TrainingExample
from .numerics import derive_seed, seeded_rng

TASKS = ("pause", "emphasis", "burst")
CATEGORY = {"pause": "pause", "emphasis": "emphasis", "burst": "burst"}
FEATURE_MAGIC = b"FAFT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class TaskSpec:
    task: str = "emphasis"
    vocab_size: int = 16
    feature_dim: int = 8
    pattern_seed: int = 0
    annotation_rate: float = 0.2
    energy_scale: float = 4.0
    pause_range: tuple[int, int] = (3, 5)
    burst_frequency: float = 0.5
    burst_frames: int = 4
    burst_amplitude: float = 1.0
    noise_std: float = 0.05
    length_range: tuple[int, int] = (3, 6)
    base_duration_range: tuple[int, int] = (3, 5)
    duration_jitter: int = 1
    pattern_margin: float = 1.0
    silence_threshold: float = 0.1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not 0.0 <= self.annotation_rate <= 1.0:
            raise ValueError("annotation_rate must lie in [0, 1]")
        lo, hi = self.length_range
        if not 1 <= lo <= hi <= self.vocab_size:
            raise ValueError("length_range must lie within [1, vocab_size]; symbols are distinct per utterance")
        if self.pause_range[0] < 2 or self.pause_range[0] > self.pause_range[1]:
            raise ValueError("pause_range must start at 2 frames or more")
        if self.base_duration_range[0] - self.duration_jitter < 1:
            raise ValueError("durations could fall below one frame")
        if self.energy_scale <= 1.0:
            raise ValueError("energy_scale must exceed 1")

    @property
    def category(self) -> str:
        return CATEGORY[self.task]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        for key in ("pause_range", "length_range", "base_duration_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def symbol_table(spec: TaskSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-symbol patterns ``(vocab, feature_dim)`` with mean-square 1, and base durations."""
    rng = seeded_rng(derive_seed(spec.pattern_seed, "patterns"))
    for _ in range(1000):
        raw = rng.standard_normal((spec.vocab_size, spec.feature_dim))
        patterns = raw / np.sqrt(np.mean(raw * raw, axis=1, keepdims=True))
        gaps = np.linalg.norm(patterns[:, None] - patterns[None], axis=-1)
        gaps[np.diag_indices(spec.vocab_size)] = np.inf
        if gaps.min() >= spec.pattern_margin:
            break
    else:
        raise RuntimeError("could not draw distinguishable symbol patterns")
    lo, hi = spec.base_duration_range
    base = rng.integers(lo, hi + 1, size=spec.vocab_size)
    return patterns, base


# -- condition strings ------------------------------------------------------------------

def symbol_token(symbol: int) -> str:
    return f"s{int(symbol)}"


def serialize_condition(symbols: Sequence[int], annotations: Iterable[tuple[int, str]]) -> str:
    """Transcript with inline markers: ``*s3*`` emphasis, ``<pause>``/``<burst>`` after a symbol."""
    marks: dict[int, set[str]] = {}
    for pos, kind in annotations:
        marks.setdefault(int(pos), set()).add(kind)
    words = []
    for i, s in enumerate(symbols):
        kinds = marks.get(i, set())
        words.append(f"*{symbol_token(s)}*" if "emphasis" in kinds else symbol_token(s))
        if "pause" in kinds:
            words.append("<pause>")
        if "burst" in kinds:
            words.append("<burst>")
    return " ".join(words)


_MARKERS = ("<pause>", "<burst>")


def condition_tokens(text: str) -> list[str]:
    """Encoder tokens: each word together with the annotations it carries.

    ``*s3*`` is one token distinct from ``s3``, and a trailing marker binds to the
    word before it, so ``s1 <pause>`` is the single token ``s1<pause>``.
    """
    out: list[str] = []
    for word in text.split():
        if word in _MARKERS and out and not out[-1].endswith(_MARKERS):
            out[-1] += word
        else:
            out.append(word)
    return out


def parse_condition(text: str) -> tuple[list[int], list[tuple[int, str]]]:
    """Inverse of :func:`serialize_condition`."""
    symbols: list[int] = []
    annotations: list[tuple[int, str]] = []
    for word in text.split():
        if word in ("<pause>", "<burst>"):
            if not symbols:
                raise ValueError(f"{word} before any symbol in {text!r}")
            annotations.append((len(symbols) - 1, word[1:-1]))
            continue
        emphasised = len(word) > 2 and word.startswith("*") and word.endswith("*")
        core = word[1:-1] if emphasised else word
        if not (core.startswith("s") and core[1:].isdigit()):
            raise ValueError(f"malformed condition word {word!r}")
        symbols.append(int(core[1:]))
        if emphasised:
            annotations.append((len(symbols) - 1, "emphasis"))
    return symbols, sorted(annotations)


def condition_vocabulary(spec: TaskSpec) -> list[str]:
    words = [symbol_token(i) for i in range(spec.vocab_size)]
    words += [f"*{w}*" for w in words]
    return words + [w + m for m in _MARKERS for w in words]


# -- utterances and rendering --------------------------------------------------------------

@dataclass
class Utterance:
    id: str
    symbols: np.ndarray
    durations: np.ndarray
    extra_frames: np.ndarray
    annotations: list[tuple[int, str]]
    features: np.ndarray | None = None

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int64)
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.extra_frames = np.asarray(self.extra_frames, dtype=np.int64)
        self.annotations = sorted((int(p), str(k)) for p, k in self.annotations)

    @property
    def aligned_durations(self) -> np.ndarray:
        return self.durations + self.extra_frames

    @property
    def n_frames(self) -> int:
        return int(self.aligned_durations.sum())

    @property
    def z_f(self) -> str:
        return serialize_condition(self.symbols, self.annotations)

    @property
    def z_f_tokens(self) -> list[str]:
        return condition_tokens(self.z_f)

    def aligned_symbols(self) -> np.ndarray:
        return np.repeat(self.symbols, self.aligned_durations)


def render_features(utterance: Utterance, spec: TaskSpec, rng: np.random.Generator | None = None,
                    noise_std: float | None = None) -> np.ndarray:
    """Frames for ``utterance``; noise is drawn from ``rng`` (none if ``rng`` is None)."""
    patterns, _ = symbol_table(spec)
    marks = {}
    for pos, kind in utterance.annotations:
        marks.setdefault(pos, set()).add(kind)
    gain = math.sqrt(spec.energy_scale)
    blocks = []
    for i, (s, d, e) in enumerate(zip(utterance.symbols, utterance.durations, utterance.extra_frames)):
        kinds = marks.get(i, set())
        frame = patterns[s] * (gain if "emphasis" in kinds else 1.0)
        blocks.append(np.tile(frame, (d, 1)))
        if e:
            if "burst" in kinds:
                n = np.arange(e)
                wave = spec.burst_amplitude * np.cos(2 * np.pi * spec.burst_frequency * n)
                blocks.append(np.tile(wave[:, None], (1, spec.feature_dim)))
            else:
                blocks.append(np.zeros((e, spec.feature_dim)))
    x = np.concatenate(blocks) if blocks else np.zeros((0, spec.feature_dim))
    std = spec.noise_std if noise_std is None else noise_std
    if rng is not None and std > 0:
        x = x + std * rng.standard_normal(x.shape)
    return x


def _make_utterance(spec: TaskSpec, index: int, seed: int, base: np.ndarray,
                    noise_std: float | None) -> Utterance:
    rng = seeded_rng(derive_seed(seed, "utterance", index))
    lo, hi = spec.length_range
    n = int(rng.integers(lo, hi + 1))
    symbols = rng.choice(spec.vocab_size, size=n, replace=False)
    j = spec.duration_jitter
    durations = base[symbols] + rng.integers(-j, j + 1, size=n)
    flagged = rng.random(n) < spec.annotation_rate
    extra = np.zeros(n, dtype=np.int64)
    if spec.task == "pause":
        lengths = rng.integers(spec.pause_range[0], spec.pause_range[1] + 1, size=n)
        extra = np.where(flagged, lengths, 0)
    elif spec.task == "burst":
        extra = np.where(flagged, spec.burst_frames, 0)
    annotations = [(int(i), spec.category) for i in np.flatnonzero(flagged)]
    utt = Utterance(f"u{index:05d}", symbols, durations, extra, annotations)
    # float32 storage keeps the file round-trip exact
    utt.features = render_features(utt, spec, rng, noise_std).astype(np.float32)
    return utt


@dataclass
class Corpus:
    spec: TaskSpec
    train: list[Utterance]
    held_out: list[Utterance]

    @property
    def all(self) -> list[Utterance]:
        return sorted(self.train + self.held_out, key=lambda u: u.id)


def generate_corpus(spec: TaskSpec, n_utterances: int, seed: int, held_out_fraction: float = 0.1,
                    noise_std: float | None = None) -> Corpus:
    """Deterministic corpus; each utterance draws from its own seed-derived stream."""
    if n_utterances < 1:
        raise ValueError("n_utterances must be >= 1")
    if not 0.0 <= held_out_fraction < 1.0:
        raise ValueError("held_out_fraction must lie in [0, 1)")
    _, base = symbol_table(spec)
    utts = [_make_utterance(spec, i, seed, base, noise_std) for i in range(n_utterances)]
    order = seeded_rng(derive_seed(seed, "split")).permutation(n_utterances)
    n_held = int(round(held_out_fraction * n_utterances))
    held = set(order[:n_held].tolist())
    return Corpus(spec,
                  [u for i, u in enumerate(utts) if i not in held],
                  [u for i, u in enumerate(utts) if i in held])


def strip_annotations(utterances: Sequence[Utterance]) -> list[Utterance]:
    """Same audio, no condition: the pre-training view of a corpus."""
    return [Utterance(u.id, u.symbols, u.durations, u.extra_frames, [], u.features) for u in utterances]


# -- detector and scoring ---------------------------------------------------------------------

def frame_energy(features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    return np.mean(x * x, axis=-1)


def _spans(aligned_durations) -> list[tuple[int, int]]:
    ends = np.cumsum(aligned_durations)
    return [(int(e - d), int(e)) for d, e in zip(aligned_durations, ends)]


def symbol_energies(features, aligned_durations, silence_threshold: float) -> np.ndarray:
    """Mean energy over non-silent frames of each symbol's span (0 if all silent)."""
    energy = frame_energy(features)
    out = np.zeros(len(aligned_durations))
    for i, (a, b) in enumerate(_spans(aligned_durations)):
        e = energy[a:b]
        loud = e[e >= silence_threshold]
        out[i] = loud.mean() if len(loud) else 0.0
    return out


def burst_magnitude(frames, frequency: float) -> float:
    """Mean over channels of |DFT| at ``frequency`` cycles/frame across the span."""
    x = np.asarray(frames, dtype=np.float64)
    if not len(x):
        return 0.0
    phase = np.exp(-2j * np.pi * frequency * np.arange(len(x)))
    return float(np.mean(np.abs(phase @ x)))


def corpus_reference_energy(utterances: Sequence[Utterance], spec: TaskSpec) -> float:
    """Median per-symbol energy over a corpus: the detector's emphasis reference."""
    values = [symbol_energies(u.features, u.aligned_durations, spec.silence_threshold)
              for u in utterances]
    values = np.concatenate(values) if values else np.zeros(0)
    values = values[values > 0]
    return float(np.median(values)) if len(values) else 1.0


def detect_annotations(features, aligned_durations, spec: TaskSpec,
                       reference_energy: float = 1.0) -> list[tuple[int, str]]:
    """Rule-based annotator over per-symbol spans of ``features``."""
    features = np.asarray(features, dtype=np.float64)
    aligned_durations = np.asarray(aligned_durations, dtype=np.int64)
    if aligned_durations.sum() != len(features):
        raise ValueError(f"alignment covers {aligned_durations.sum()} frames, features have {len(features)}")
    energy = frame_energy(features)
    emph = symbol_energies(features, aligned_durations, spec.silence_threshold)
    threshold = 0.7 * spec.energy_scale * reference_energy
    burst_threshold = 0.5 * spec.burst_amplitude * spec.burst_frames
    found = []
    for i, (a, b) in enumerate(_spans(aligned_durations)):
        if emph[i] >= threshold:
            found.append((i, "emphasis"))
        run = longest = 0
        for quiet in energy[a:b] < spec.silence_threshold:
            run = run + 1 if quiet else 0
            longest = max(longest, run)
        if longest >= 2:
            found.append((i, "pause"))
        if burst_magnitude(features[a:b], spec.burst_frequency) >= burst_threshold:
            found.append((i, "burst"))
    return found


def f1_micro(predicted, gold, categories: Sequence[str]) -> dict[str, dict[str, float]]:
    """Exact-match scoring of ``(utterance, position, category)`` items.

    Returns per-category and pooled (``"micro"``) precision/recall/F1 with
    counts. Empty gold and empty prediction score 1.0.
    """
    pred = {tuple(p) for p in predicted if p[-1] in categories}
    ref = {tuple(g) for g in gold if g[-1] in categories}

    def score(p: set, g: set) -> dict[str, float]:
        tp, fp, fn = len(p & g), len(p - g), len(g - p)
        if tp + fp + fn == 0:
            return {"precision": 1.0, "recall": 1.0, "f1": 1.0, "tp": 0, "fp": 0, "fn": 0}
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * tp / (2 * tp + fp + fn)
        return {"precision": precision, "recall": recall, "f1": f1, "tp": tp, "fp": fp, "fn": fn}

    out = {c: score({x for x in pred if x[-1] == c}, {x for x in ref if x[-1] == c}) for c in categories}
    out["micro"] = score(pred, ref)
    return out


# -- conversions ---------------------------------------------------------------------------

def to_training_example(utt: Utterance, with_condition: bool, mask: MaskSpec = MaskSpec()) -> TrainingExample:
    return TrainingExample(np.asarray(utt.features, dtype=np.float64), utt.aligned_symbols(),
                           utt.z_f_tokens if with_condition else [], mask)


def to_duration_example(utt: Utterance, with_condition: bool) -> DurationExample:
    return DurationExample(utt.symbols, utt.aligned_durations, utt.z_f_tokens if with_condition else [])


def toy_bimodal_examples(n: int, seed: int, n_frames: int = 8, feature_dim: int = 8,
                         separation: float = 1.0, noise_std: float = 0.05
                         ) -> tuple[list[TrainingExample], np.ndarray]:
    """Two equally likely modes: every frame near ``+c`` or near ``-c`` (``c`` all ``separation``)."""
    rng = seeded_rng(derive_seed(seed, "toy"))
    centers = np.stack([np.full(feature_dim, separation), np.full(feature_dim, -separation)])
    out = []
    for _ in range(n):
        k = int(rng.integers(2))
        x = centers[k] + noise_std * rng.standard_normal((n_frames, feature_dim))
        out.append(TrainingExample(x, np.zeros(n_frames, dtype=np.int64), [], MaskSpec("all")))
    return out, centers


def mode_occupancy(samples: Sequence[np.ndarray], centers: np.ndarray) -> np.ndarray:
    """Fraction of samples whose mean frame is nearest each center."""
    means = np.stack([np.asarray(s).mean(axis=0) for s in samples])
    nearest = np.argmin(np.linalg.norm(means[:, None] - centers[None], axis=-1), axis=1)
    return np.bincount(nearest, minlength=len(centers)) / len(samples)


# -- dataset files -----------------------------------------------------------------------------

def write_features(path, features) -> None:
    """16-byte header (magic, version, frames, dim) then little-endian float32 rows."""
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise ValueError("features must be 2-D")
    data = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(data.tobytes())


def read_features(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, version, frames, dim = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise ValueError(f"{path}: unsupported feature format version {version}")
    body = raw[_HEADER.size:]
    if len(body) != 4 * frames * dim:
        raise ValueError(f"{path}: expected {frames}x{dim} floats, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f4").reshape(frames, dim).astype(np.float32)


def utterance_record(utt: Utterance, feature_file: str, **extra) -> dict:
    rec = {
        "id": utt.id,
        "symbols": utt.symbols.tolist(),
        "durations": utt.durations.tolist(),
        "extra_frames": utt.extra_frames.tolist(),
        "annotations": [[p, k] for p, k in utt.annotations],
        "z_f": utt.z_f,
        "features": feature_file,
    }
    rec.update(extra)
    return rec


def save_dataset(directory, utterances: Sequence[Utterance], manifest: str = "manifest.jsonl",
                 split: str | None = None) -> Path:
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    path = directory / manifest
    with open(path, "w") as fh:
        for utt in utterances:
            rel = f"features/{utt.id}.feat"
            write_features(directory / rel, utt.features)
            extra = {"split": split} if split else {}
            fh.write(json.dumps(utterance_record(utt, rel, **extra)) + "\n")
    return path


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def record_to_utterance(rec: dict, root, load_features: bool = True) -> Utterance:
    utt = Utterance(rec["id"], rec["symbols"], rec["durations"],
                    rec.get("extra_frames", [0] * len(rec["symbols"])),
                    [tuple(a) for a in rec.get("annotations", [])])
    if load_features:
        utt.features = read_features(Path(root) / rec["features"])
    return utt


def load_dataset(manifest_path) -> list[Utterance]:
    manifest_path = Path(manifest_path)
    return [record_to_utterance(r, manifest_path.parent) for r in read_manifest(manifest_path)]


def save_corpus(directory, corpus: Corpus) -> tuple[Path, Path]:
    return (save_dataset(directory, corpus.train, "train.jsonl", "train"),
            save_dataset(directory, corpus.held_out, "held_out.jsonl", "held_out"))
