"""Command-line entry point: ``flowadapt <command> --config C --seed S --out DIR``.

Exit status is 0 only when every step of the command succeeded: 1 flags
partial failure (rejected requests, missing outputs, failed sweep runs),
2 a command that could not run at all.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .adapters import named_adapter_specs
from .config import RunConfig
from .runs import (
    RunError,
    read_manifest,
    run_corpus,
    run_evaluate,
    run_finetune,
    run_generate,
    run_pretrain,
    run_sweep,
)

_AXIS_TYPES = {"lora_rank": int, "cross_attn_dim": int, "data_fraction": float, "adapter": str}


def _load_config(args) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    return config.replace(**changes) if changes else config


def _cmd_pretrain(args, config: RunConfig) -> int:
    print(run_pretrain(config))
    return 0


def _cmd_corpus(args, config: RunConfig) -> int:
    print(run_corpus(config))
    return 0


def _cmd_finetune(args, config: RunConfig) -> int:
    if args.adapter:
        specs = named_adapter_specs()
        if args.adapter not in specs:
            raise ValueError(f"unknown adapter configuration {args.adapter!r}; choose from {sorted(specs)}")
        config = config.replace(adapter=specs[args.adapter])
    if args.data_fraction is not None:
        config = config.replace(training=replace(config.training, data_fraction=args.data_fraction))
    out = run_finetune(config, args.base, override=args.override_fingerprint)
    print((out / "summary.json").read_text().strip())
    return 0


def _cmd_generate(args, config: RunConfig) -> int:
    manifest = run_generate(config, args.checkpoint, args.requests, config.out_dir,
                            override=args.override_fingerprint)
    records = read_manifest(manifest)
    rejected = [r for r in records if r.get("status") != "ok"]
    for r in rejected:
        print(f"rejected {r['id']}: {r.get('reason')}", file=sys.stderr)
    print(manifest)
    return 1 if rejected else 0


def _cmd_evaluate(args, config: RunConfig) -> int:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = run_evaluate(args.generated, args.gold, config.task, out / "metrics.jsonl")
    print(json.dumps(report["summary"]))
    for m in report["missing"]:
        print(f"missing {m['id']}: {m['reason']}", file=sys.stderr)
    return 1 if report["missing"] else 0


def _cmd_sweep(args, config: RunConfig) -> int:
    cast = _AXIS_TYPES[args.axis]
    values = [cast(v) for v in args.values.split(",") if v.strip()]
    rows = run_sweep(config, args.base, args.axis, values, config.out_dir,
                     override=args.override_fingerprint)
    print(Path(config.out_dir) / "sweep.csv")
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        print(f"failed {r['axis']}={r['value']}: {r['error']}", file=sys.stderr)
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowadapt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name: str, handler, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="run configuration (JSON); defaults are used if omitted")
        p.add_argument("--seed", type=int, help="override the configuration seed")
        p.add_argument("--out", help="output directory (overrides the configuration's out_dir)")
        p.set_defaults(handler=handler)
        return p

    command("pretrain", _cmd_pretrain, "train the backbone and duration model without annotations")
    command("corpus", _cmd_corpus, "write the synthetic corpora and request files")
    p = command("finetune", _cmd_finetune, "inject adapters and fine-tune on the annotated corpus")
    p.add_argument("--base", required=True, help="pre-trained checkpoint or run directory")
    p.add_argument("--adapter", help=f"adapter configuration name, one of {sorted(named_adapter_specs())}")
    p.add_argument("--data-fraction", type=float, help="fraction of fine-tuning utterances to use")
    p.add_argument("--override-fingerprint", action="store_true", help="load despite a fingerprint mismatch")
    p = command("generate", _cmd_generate, "generate features for a request file")
    p.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
    p.add_argument("--requests", required=True, help="JSONL request file")
    p.add_argument("--override-fingerprint", action="store_true", help="load despite a fingerprint mismatch")
    p = command("evaluate", _cmd_evaluate, "score generations with the rule-based detector")
    p.add_argument("--generated", required=True, help="manifest written by generate")
    p.add_argument("--gold", required=True, help="gold dataset manifest")
    p = command("sweep", _cmd_sweep, "fine-tune/generate/evaluate across one axis")
    p.add_argument("--base", required=True, help="pre-trained checkpoint or run directory")
    p.add_argument("--axis", required=True, choices=sorted(_AXIS_TYPES))
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--override-fingerprint", action="store_true", help="load despite a fingerprint mismatch")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        return args.handler(args, config)
    except (ValueError, KeyError, OSError, RunError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
