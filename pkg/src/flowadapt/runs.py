"""Run orchestration: corpus, pretrain, fine-tune, generate, evaluate and sweep.

Every run directory holds ``config.json``, ``fingerprint.txt``, a
``telemetry.jsonl`` log and ``checkpoints/``; a run can be repeated from its
directory alone.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapters import (
    AdapterSpec,
    ConditionEncoder,
    EncoderConfig,
    adaptive_parameter_count,
    cross_attention_parameter_count,
    finetune_step,
    inject_adapters,
    named_adapter_specs,
)
from .checkpoint import Checkpoint, apply_partition, file_hash, load_checkpoint, save_checkpoint
from .config import RunConfig
from .duration import DurationModel, duration_train_step, predict_durations_batch
from .flow import MaskSpec, TrainingExample, collate, pretrain_step
from .numerics import Adam, derive_seed, seeded_rng
from .sampler import GenerationRequest, SolverConfig, generate_batch
from .tasks import (
    Corpus,
    TaskSpec,
    Utterance,
    burst_magnitude,
    condition_tokens,
    condition_vocabulary,
    corpus_reference_energy,
    detect_annotations,
    f1_micro,
    generate_corpus,
    parse_condition,
    read_features,
    read_manifest,
    record_to_utterance,
    save_corpus,
    save_dataset,
    serialize_condition,
    strip_annotations,
    symbol_energies,
    to_duration_example,
    to_training_example,
    toy_bimodal_examples,
    write_features,
)
from .transformer import VectorFieldModel

SWEEP_AXES = ("lora_rank", "cross_attn_dim", "data_fraction", "adapter")
GENERATE_CHUNK = 64


class RunError(RuntimeError):
    pass


# -- run directory helpers ----------------------------------------------------------------

class Telemetry:
    def __init__(self, path: Path):
        self.path = path
        self.start = time.perf_counter()

    def log(self, **record) -> None:
        record.setdefault("wall_time", round(time.perf_counter() - self.start, 6))
        with open(self.path, "a") as fh:
            fh.write(json.dumps(record) + "\n")


def _prepare_run_dir(config: RunConfig) -> tuple[Path, Telemetry]:
    out = Path(config.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    (out / "fingerprint.txt").write_text(config.fingerprint() + "\n")
    tel = out / "telemetry.jsonl"
    tel.write_text("")
    return out, Telemetry(tel)


def _meta(config: RunConfig, stage: str, **extra) -> dict:
    stored = config.to_dict()
    stored.pop("out_dir")  # identical runs in different directories write identical files
    meta = {"config": stored, "config_fingerprint": config.fingerprint(),
            "backbone_fingerprint": config.backbone_fingerprint(), "stage": stage,
            "adapter": None, "encoder": None}
    meta.update(extra)
    return meta


def resolve_checkpoint(path) -> Path:
    """A checkpoint file, or a run directory (its ``final.ckpt``, else its latest step file)."""
    path = Path(path)
    if path.is_file():
        return path
    if (path / "final.ckpt").is_file():
        return path / "final.ckpt"
    steps = sorted((path / "checkpoints").glob("step_*.ckpt"))
    if not steps:
        raise FileNotFoundError(f"no checkpoint found under {path}")
    return steps[-1]


# -- data ----------------------------------------------------------------------------------

def pretrain_corpus(config: RunConfig) -> Corpus:
    return generate_corpus(config.task, config.corpus.n_pretrain,
                           derive_seed(config.seed, "pretrain-corpus"), held_out_fraction=0.0)


def finetune_corpus(config: RunConfig) -> Corpus:
    return generate_corpus(config.task, config.corpus.n_finetune,
                           derive_seed(config.seed, "finetune-corpus"), config.corpus.held_out_fraction)


def select_fraction(utterances: Sequence[Utterance], fraction: float, seed: int) -> list[Utterance]:
    """``ceil(fraction * N)`` utterances from a seeded permutation."""
    n = math.ceil(fraction * len(utterances))
    order = seeded_rng(derive_seed(seed, "data-fraction")).permutation(len(utterances))
    return [utterances[i] for i in sorted(order[:n].tolist())]


def _draw_mask(config: RunConfig, rng: np.random.Generator) -> MaskSpec:
    t = config.training
    if rng.random() < t.mask_all_prob:
        return MaskSpec("all")
    return MaskSpec("span", length_range=tuple(t.span_length_range))


def _acoustic_batch(examples: Sequence[TrainingExample], config: RunConfig, rng: np.random.Generator):
    picks = rng.integers(0, len(examples), size=config.training.batch_size)
    chosen = []
    for i in picks:
        e = examples[i]
        mask = e.mask if config.corpus.kind == "toy_bimodal" else _draw_mask(config, rng)
        chosen.append(TrainingExample(e.x1, e.symbols, e.z_f, mask))
    return collate(chosen)


def _duration_batch(examples, config: RunConfig, rng: np.random.Generator):
    picks = rng.integers(0, len(examples), size=config.training.batch_size)
    return [examples[i] for i in picks]


# -- model construction ------------------------------------------------------------------------

def fresh_models(config: RunConfig) -> tuple[VectorFieldModel, DurationModel]:
    return (VectorFieldModel(config.backbone, seed=derive_seed(config.seed, "acoustic-init")),
            DurationModel(config.duration, seed=derive_seed(config.seed, "duration-init")))


def models_from_checkpoint(ckpt: Checkpoint) -> tuple[VectorFieldModel, DurationModel]:
    """Rebuild both models (with their adapters, if any) and restore parameters and partitions."""
    config = RunConfig.from_dict(ckpt.meta["config"])
    acoustic = VectorFieldModel(config.backbone)
    duration = DurationModel(config.duration)
    if ckpt.meta.get("adapter") is not None:
        spec = AdapterSpec(**ckpt.meta["adapter"])
        enc = ckpt.meta["encoder"]
        encoder = ConditionEncoder(enc["vocab"], EncoderConfig(**enc["config"]), config.backbone.model_dim)
        encoder.freeze()
        inject_adapters(acoustic, spec, encoder)
        inject_adapters(duration, spec, encoder)
    for name, model in (("acoustic", acoustic), ("duration", duration)):
        model.load_state_dict(ckpt.model_state(name))
        apply_partition(model, ckpt.partition(name))
        if model.condition_encoder is not None:
            model.condition_encoder._cache.clear()
        model.eval()
    return acoustic, duration


def _train(model, steps: int, make_batch, step_fn, optimizer, telemetry: Telemetry, label: str,
           n_trainable: int, on_checkpoint, every: int, log_every: int) -> list[float]:
    losses = []
    model.train()
    for step in range(1, steps + 1):
        batch = make_batch()
        try:
            loss = step_fn(batch)
        except FloatingPointError as exc:
            telemetry.log(model=label, step=step, error=str(exc))
            raise RunError(f"{label} training halted at step {step}: {exc}") from exc
        losses.append(loss)
        if step % log_every == 0 or step == steps:
            telemetry.log(model=label, step=step, loss=loss, n_trainable=n_trainable)
        if step % every == 0 and step != steps:
            on_checkpoint(label, step)
    model.eval()
    return losses


# -- pretrain ----------------------------------------------------------------------------------

def run_pretrain(config: RunConfig) -> Path:
    """Train the acoustic and duration backbones on the annotation-free corpus."""
    if config.adapter is not None:
        raise ValueError("pretrain config must not carry an adapter spec")
    out, telemetry = _prepare_run_dir(config)
    acoustic, duration = fresh_models(config)
    models = {"acoustic": acoustic, "duration": duration}

    if config.corpus.kind == "toy_bimodal":
        examples, _ = toy_bimodal_examples(config.corpus.n_pretrain, derive_seed(config.seed, "toy"),
                                           config.corpus.toy_frames, config.backbone.feature_dim)
        dur_examples = []
    else:
        utts = strip_annotations(pretrain_corpus(config).train)
        examples = [to_training_example(u, with_condition=False) for u in utts]
        dur_examples = [to_duration_example(u, with_condition=False) for u in utts]

    progress = {"acoustic": 0, "duration": 0}

    def checkpoint(label: str, step: int) -> None:
        progress[label] = step
        total = progress["acoustic"] + progress["duration"]
        save_checkpoint(out / "checkpoints" / f"step_{total:06d}.ckpt", models,
                        _meta(config, "pretrain", progress=dict(progress)), step=total)

    checkpoint("acoustic", 0)
    t = config.training
    rng = seeded_rng(derive_seed(config.seed, "pretrain-acoustic"))
    opt = Adam(acoustic.parameters(), config.optimizer)
    if t.pretrain_steps:
        _train(acoustic, t.pretrain_steps, lambda: _acoustic_batch(examples, config, rng),
               lambda b: pretrain_step(acoustic, b, opt, rng, config.path, t.loss_policy),
               opt, telemetry, "acoustic", acoustic.num_parameters(), checkpoint,
               t.checkpoint_every, t.log_every)
        progress["acoustic"] = t.pretrain_steps

    d_steps = config.duration_pretrain_steps if dur_examples else 0
    if d_steps:
        d_rng = seeded_rng(derive_seed(config.seed, "pretrain-duration"))
        d_opt = Adam(duration.parameters(), config.optimizer)
        _train(duration, d_steps, lambda: _duration_batch(dur_examples, config, d_rng),
               lambda b: duration_train_step(duration, b, d_opt),
               d_opt, telemetry, "duration", duration.num_parameters(), checkpoint,
               t.checkpoint_every, t.log_every)
        progress["duration"] = d_steps

    total = progress["acoustic"] + progress["duration"]
    if total:
        save_checkpoint(out / "final.ckpt", models, _meta(config, "pretrain", progress=progress, final=True),
                        step=total)
    return out


# -- fine-tune ----------------------------------------------------------------------------------

def run_finetune(config: RunConfig, base_checkpoint, override: bool = False) -> Path:
    """Inject ``config.adapter`` into a pre-trained pair and train only the new parameters."""
    if config.adapter is None:
        raise ValueError("fine-tune config needs an adapter spec")
    if config.corpus.kind != "task":
        raise ValueError("fine-tuning needs an annotated task corpus")
    base_path = resolve_checkpoint(base_checkpoint)
    base = load_checkpoint(base_path, config.backbone_fingerprint(), override=override)
    if base.meta.get("adapter") is not None:
        raise ValueError(f"{base_path} already carries adapters; fine-tune from an un-adapted checkpoint")
    acoustic, duration = models_from_checkpoint(base)
    out, telemetry = _prepare_run_dir(config)

    corpus = finetune_corpus(config)
    train = select_fraction(corpus.train, config.training.data_fraction, config.seed)
    data_info = {"n_available": len(corpus.train), "n_used": len(train),
                 "data_fraction": config.training.data_fraction, "ids": [u.id for u in train]}
    (out / "data.json").write_text(json.dumps(data_info, indent=2) + "\n")
    telemetry.log(event="data", n_available=len(corpus.train), n_used=len(train),
                  data_fraction=config.training.data_fraction)

    encoder = ConditionEncoder(condition_vocabulary(config.task), config.encoder,
                               config.backbone.model_dim, seed=derive_seed(config.seed, "encoder-init"))
    encoder.fit([u.z_f_tokens for u in train], seed=derive_seed(config.seed, "encoder-fit"))
    _, part_a = inject_adapters(acoustic, config.adapter, encoder, seed=derive_seed(config.seed, "inject-a"))
    _, part_d = inject_adapters(duration, config.adapter, encoder, seed=derive_seed(config.seed, "inject-d"))
    partitions = {"acoustic": part_a, "duration": part_d}
    models = {"acoustic": acoustic, "duration": duration}
    meta_extra = {"adapter": config.adapter.to_dict(),
                  "encoder": {"vocab": encoder.vocab, "config": config.encoder.to_dict()},
                  "base_checkpoint_sha256": file_hash(base_path), "base_step": base.step}
    progress = {"acoustic": 0, "duration": 0}

    def checkpoint(label: str, step: int) -> None:
        progress[label] = step
        total = progress["acoustic"] + progress["duration"]
        save_checkpoint(out / "checkpoints" / f"step_{total:06d}.ckpt", models,
                        _meta(config, "finetune", progress=dict(progress), **meta_extra),
                        partitions, step=total)

    checkpoint("acoustic", 0)
    t = config.training
    examples = [to_training_example(u, with_condition=True) for u in train]
    rng = seeded_rng(derive_seed(config.seed, "finetune-acoustic"))
    opt = Adam(part_a.tensors(acoustic), config.optimizer)
    steps = config.acoustic_finetune_steps
    if steps:
        _train(acoustic, steps, lambda: _acoustic_batch(examples, config, rng),
               lambda b: finetune_step(acoustic, part_a, b, opt, rng, config.path, t.loss_policy),
               opt, telemetry, "acoustic", part_a.n_trainable, checkpoint, t.checkpoint_every, t.log_every)
        progress["acoustic"] = steps

    dur_examples = [to_duration_example(u, with_condition=True) for u in train]
    d_rng = seeded_rng(derive_seed(config.seed, "finetune-duration"))
    d_opt = Adam(part_d.tensors(duration), config.optimizer)
    d_steps = config.duration_finetune_steps
    if d_steps:
        _train(duration, d_steps, lambda: _duration_batch(dur_examples, config, d_rng),
               lambda b: duration_train_step(duration, b, d_opt),
               d_opt, telemetry, "duration", part_d.n_trainable, checkpoint, t.checkpoint_every, t.log_every)
        progress["duration"] = d_steps

    total = progress["acoustic"] + progress["duration"]
    save_checkpoint(out / "final.ckpt", models,
                    _meta(config, "finetune", progress=progress, final=True, **meta_extra),
                    partitions, step=total)
    summary = {
        "adapter": config.adapter.to_dict(),
        "n_trainable": part_a.n_trainable,
        "n_frozen": part_a.n_frozen,
        "n_adaptive": adaptive_parameter_count(acoustic),
        "n_cross_attention": cross_attention_parameter_count(acoustic),
        "duration_n_trainable": part_d.n_trainable,
        "n_train_utterances": len(train),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return out


# -- requests and generation ------------------------------------------------------------------------

def make_requests(utterances: Sequence[Utterance], with_condition: bool = True, seed: int = 0,
                  gold_durations: bool = True) -> list[dict]:
    """One zero-shot request per utterance; its seed derives from ``seed`` and the utterance id."""
    out = []
    for u in utterances:
        req = {"id": u.id, "symbols": u.symbols.tolist(),
               "z_f": u.z_f if with_condition else "",
               "seed": derive_seed(seed, "request", u.id)}
        if gold_durations:
            req["durations"] = u.aligned_durations.tolist()
        out.append(req)
    return out


def make_paired_requests(utterances: Sequence[Utterance], task: TaskSpec, n_pairs: int, seed: int,
                         gold_durations: bool = True) -> list[dict]:
    """``n_pairs`` (annotated, plain) twins differing only in one annotation on one symbol.

    Durations are the un-annotated base durations so the two twins are identical requests
    apart from the condition.
    """
    rng = seeded_rng(derive_seed(seed, "pairs"))
    out = []
    for i in range(n_pairs):
        u = utterances[i % len(utterances)]
        k = int(rng.integers(len(u.symbols)))
        s = derive_seed(seed, "pair", i)
        base = {"symbols": u.symbols.tolist(), "seed": s}
        if gold_durations:
            base["durations"] = u.durations.tolist()
        plain_id, marked_id = f"pair{i:04d}_plain", f"pair{i:04d}_marked"
        out.append(dict(base, id=plain_id, z_f=serialize_condition(u.symbols, [])))
        out.append(dict(base, id=marked_id, z_f=serialize_condition(u.symbols, [(k, task.category)]),
                        pair_of=plain_id))
    return out


def write_jsonl(path, records: Sequence[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    return path


def _parse_request(rec: dict, root: Path, acoustic, feature_dim: int, default_solver: SolverConfig):
    """Validated ``(GenerationRequest fields, annotations)``; raises ValueError with the reason."""
    symbols = [int(s) for s in rec.get("symbols", [])]
    if not symbols:
        raise ValueError("request has no symbols")
    vocab = acoustic.config.vocab_size
    if min(symbols) < 0 or max(symbols) >= vocab:
        raise ValueError(f"symbol outside vocabulary [0, {vocab})")
    z_f = rec.get("z_f", "") or ""
    annotations: list = []
    if z_f:
        if acoustic.condition_encoder is None:
            raise ValueError("request carries z_f but the checkpoint has no adapters")
        parsed, annotations = parse_condition(z_f)
        if parsed != symbols:
            raise ValueError("z_f transcript does not match the request symbols")
        unknown = [t for t in condition_tokens(z_f) if t not in acoustic.condition_encoder.index]
        if unknown:
            raise ValueError(f"unknown condition token {unknown[0]!r}")
    prompt = None
    if rec.get("prompt"):
        p = rec["prompt"]
        src = read_features(root / p["features"]).astype(np.float64)
        prompt = src[:int(p["frames"])]
        if prompt.shape[1] != feature_dim:
            raise ValueError("prompt feature width does not match the model")
    solver = SolverConfig(**rec["solver"]) if rec.get("solver") else default_solver
    durations = rec.get("durations")
    if durations is not None and (len(durations) != len(symbols) or min(durations) < 1):
        raise ValueError("durations must be positive and one per symbol")
    return symbols, condition_tokens(z_f), durations, prompt, solver, int(rec.get("seed", 0)), annotations


def run_generate(config: RunConfig, checkpoint, request_file, out_dir, override: bool = False) -> Path:
    """Generate every request in ``request_file``; returns the output manifest path.

    Invalid requests are recorded in the manifest with ``status="rejected"`` and a reason.
    """
    ckpt = load_checkpoint(resolve_checkpoint(checkpoint), config.backbone_fingerprint(), override=override)
    acoustic, duration = models_from_checkpoint(ckpt)
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    request_file = Path(request_file)
    records = read_manifest(request_file)
    results: list[dict | None] = [None] * len(records)
    pending = []
    for i, rec in enumerate(records):
        try:
            parsed = _parse_request(rec, request_file.parent, acoustic, config.backbone.feature_dim, config.solver)
        except (ValueError, KeyError, OSError) as exc:
            results[i] = {"id": rec.get("id", f"request{i}"), "status": "rejected", "reason": str(exc)}
            continue
        pending.append((i, rec, parsed))

    need_durations = [(i, p) for i, _, p in pending if p[2] is None]
    if need_durations:
        use_cond = duration.condition_encoder is not None
        predicted = predict_durations_batch(duration, [p[0] for _, p in need_durations],
                                            [p[1] if use_cond else [] for _, p in need_durations])
        filled = {i: d.tolist() for (i, _), d in zip(need_durations, predicted)}
    else:
        filled = {}

    requests = []
    for i, rec, (symbols, tokens, durations, prompt, solver, seed, annotations) in pending:
        durations = durations if durations is not None else filled[i]
        if prompt is not None and len(prompt) >= sum(durations):
            results[i] = {"id": rec["id"], "status": "rejected", "reason": "prompt not shorter than output"}
            continue
        requests.append((i, rec, annotations, GenerationRequest(symbols, durations, tokens, prompt, solver, seed)))

    by_solver: dict[SolverConfig, list] = {}
    for item in requests:
        by_solver.setdefault(item[3].solver, []).append(item)
    for group in by_solver.values():
        for start in range(0, len(group), GENERATE_CHUNK):
            chunk = group[start:start + GENERATE_CHUNK]
            outputs = generate_batch(acoustic, [r for *_, r in chunk])
            for (i, rec, annotations, req), feats in zip(chunk, outputs):
                rel = f"features/{rec['id']}.feat"
                write_features(out / rel, feats)
                results[i] = {"id": rec["id"], "status": "ok", "symbols": list(req.symbols),
                              "durations": [int(d) for d in req.durations],
                              "extra_frames": [0] * len(req.symbols),
                              "annotations": [list(a) for a in annotations], "z_f": rec.get("z_f", ""),
                              "features": rel, "seed": req.seed,
                              "prompt_frames": 0 if req.prompt is None else len(req.prompt)}
                if "pair_of" in rec:
                    results[i]["pair_of"] = rec["pair_of"]
    return write_jsonl(out / "manifest.jsonl", results)


# -- evaluation ------------------------------------------------------------------------------------

def _contrast(kind: str, marked: Utterance, plain: Utterance, pos: int, spec: TaskSpec) -> float:
    """Signed difference of the annotated quantity at ``pos`` (marked minus plain)."""
    if kind == "emphasis":
        e_m = symbol_energies(marked.features, marked.aligned_durations, spec.silence_threshold)[pos]
        e_p = symbol_energies(plain.features, plain.aligned_durations, spec.silence_threshold)[pos]
        return float(e_m - e_p)
    if kind == "pause":
        return float(marked.aligned_durations[pos] - plain.aligned_durations[pos])
    spans = []
    for u in (marked, plain):
        ends = np.cumsum(u.aligned_durations)
        spans.append(np.asarray(u.features)[ends[pos] - u.aligned_durations[pos]:ends[pos]])
    return burst_magnitude(spans[0], spec.burst_frequency) - burst_magnitude(spans[1], spec.burst_frequency)


def paired_contrasts(generated_manifest, spec: TaskSpec, categories: Sequence[str] | None = None
                     ) -> dict | None:
    """Marked-minus-plain differences over every ``pair_of`` twin in a generated manifest."""
    generated_manifest = Path(generated_manifest)
    categories = list(categories or [spec.category])
    generated = {r["id"]: r for r in read_manifest(generated_manifest)}
    diffs = []
    for rec in generated.values():
        if "pair_of" not in rec or rec.get("status", "ok") != "ok":
            continue
        twin = generated.get(rec["pair_of"])
        if twin is None or twin.get("status", "ok") != "ok":
            continue
        marked = record_to_utterance(rec, generated_manifest.parent)
        plain = record_to_utterance(twin, generated_manifest.parent)
        for pos, kind in marked.annotations:
            if kind in categories:
                diffs.append(_contrast(kind, marked, plain, pos, spec))
    if not diffs:
        return None
    diffs = np.asarray(diffs)
    return {"record": "contrast", "kind": spec.category, "n": len(diffs), "holds": int((diffs > 0).sum()),
            "fraction": float((diffs > 0).mean()), "mean_difference": float(diffs.mean())}


def run_evaluate(generated_manifest, gold_manifest, spec: TaskSpec, out_path=None,
                 categories: Sequence[str] | None = None) -> dict:
    """Detector F1 of generations against the gold annotations, plus paired contrasts.

    F1 covers the ids of ``gold_manifest``; ids without a usable generation are
    listed and excluded. The emphasis reference energy is the gold corpus median.
    """
    generated_manifest, gold_manifest = Path(generated_manifest), Path(gold_manifest)
    categories = list(categories or [spec.category])
    gold_records = read_manifest(gold_manifest)
    gold = [record_to_utterance(r, gold_manifest.parent) for r in gold_records]
    reference = corpus_reference_energy(gold, spec)
    generated = {r["id"]: r for r in read_manifest(generated_manifest)}

    lines: list[dict] = []
    predicted, wanted = [], []
    missing = 0
    for g in gold:
        rec = generated.get(g.id)
        reason = None
        if rec is None:
            reason = "no generated record"
        elif rec.get("status", "ok") != "ok":
            reason = f"generation {rec.get('status')}: {rec.get('reason', '')}"
        elif list(rec["symbols"]) != g.symbols.tolist():
            reason = "generated symbols differ from gold"
        if reason is None:
            try:
                utt = record_to_utterance(rec, generated_manifest.parent)
            except (OSError, ValueError) as exc:
                reason = f"unreadable output: {exc}"
        if reason is not None:
            missing += 1
            lines.append({"record": "missing", "id": g.id, "reason": reason})
            continue
        for pos, kind in detect_annotations(utt.features, utt.aligned_durations, spec, reference):
            predicted.append((g.id, pos, kind))
        for pos, kind in g.annotations:
            wanted.append((g.id, pos, kind))

    scores = f1_micro(predicted, wanted, categories)
    for cat, s in scores.items():
        lines.append({"record": "f1", "category": cat, **s})
    contrast = paired_contrasts(generated_manifest, spec, categories)
    if contrast is not None:
        lines.append(contrast)
    summary = {"record": "summary", "n_evaluated": len(gold_records) - missing, "n_missing": missing,
               "reference_energy": reference, "f1": scores["micro"]["f1"]}
    lines.append(summary)
    if out_path is not None:
        write_jsonl(out_path, lines)
    return {"f1": scores, "summary": summary, "contrast": contrast,
            "missing": [l for l in lines if l["record"] == "missing"]}


# -- corpus command ------------------------------------------------------------------------

def run_corpus(config: RunConfig) -> Path:
    """Write the pre-training and fine-tuning corpora plus ready-made request files."""
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    if config.corpus.kind == "toy_bimodal":
        raise ValueError("the toy corpus is generated in memory by pretrain; nothing to write")
    save_dataset(out / "pretrain", strip_annotations(pretrain_corpus(config).train))
    ft = finetune_corpus(config)
    save_corpus(out / "finetune", ft)
    write_jsonl(out / "finetune" / "requests_held_out.jsonl", make_requests(ft.held_out, seed=config.seed))
    write_jsonl(out / "finetune" / "requests_paired.jsonl",
                make_paired_requests(ft.held_out, config.task, 100, config.seed))
    return out


# -- sweep -------------------------------------------------------------------------------------------

def sweep_config(template: RunConfig, axis: str, value, out_dir: Path) -> RunConfig:
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    spec = template.adapter
    if spec is None:
        raise ValueError("sweep template needs an adapter spec")
    training = template.training
    if axis == "lora_rank":
        spec = replace(spec, lora_rank=int(value), lora_alpha=float(value))
    elif axis == "cross_attn_dim":
        spec = replace(spec, cross_attn_head_dim=int(value))
    elif axis == "data_fraction":
        training = replace(training, data_fraction=float(value))
    else:
        named = named_adapter_specs()
        if value not in named:
            raise ValueError(f"unknown adapter configuration {value!r}; expected one of {sorted(named)}")
        spec = replace(named[value], adapter_hidden=spec.adapter_hidden, lora_rank=spec.lora_rank,
                       lora_alpha=spec.lora_alpha, lora_dropout=spec.lora_dropout,
                       cross_attn_heads=spec.cross_attn_heads, cross_attn_head_dim=spec.cross_attn_head_dim)
    return template.replace(adapter=spec, training=training, out_dir=str(out_dir / f"{axis}={value}"))


def evaluate_finetuned(config: RunConfig, run_dir: Path) -> dict:
    """Zero-shot generations for the held-out split with their conditions, scored by the detector."""
    corpus = finetune_corpus(config)
    gold_path = save_dataset(run_dir / "gold", corpus.held_out)
    requests = write_jsonl(run_dir / "requests.jsonl", make_requests(corpus.held_out, seed=config.seed))
    manifest = run_generate(config, run_dir / "final.ckpt", requests, run_dir / "generated")
    return run_evaluate(manifest, gold_path, config.task, run_dir / "metrics.jsonl")


def run_sweep(template: RunConfig, base_checkpoint, axis: str, values: Sequence, out_dir,
              override: bool = False) -> list[dict]:
    """Fine-tune, generate and evaluate once per value; failures are recorded and skipped."""
    if not values:
        raise ValueError("sweep needs at least one value")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        row = {"axis": axis, "value": value, "task": template.task.task}
        try:
            cfg = sweep_config(template, axis, value, out)
            run_dir = run_finetune(cfg, base_checkpoint, override=override)
            summary = json.loads((run_dir / "summary.json").read_text())
            report = evaluate_finetuned(cfg, run_dir)
            row.update(status="ok", f1=report["f1"]["micro"]["f1"],
                       **{f"f1_{c}": s["f1"] for c, s in report["f1"].items() if c != "micro"},
                       n_trainable=summary["n_trainable"], n_adaptive=summary["n_adaptive"],
                       n_cross_attention=summary["n_cross_attention"],
                       n_train_utterances=summary["n_train_utterances"], error="")
        except Exception as exc:  # a failed run must not stop the sweep
            row.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        rows.append(row)
        write_jsonl(out / "sweep.jsonl", rows)
    columns = sorted({k for r in rows for k in r}, key=lambda k: (k not in ("axis", "value", "task", "status"), k))
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    return rows
