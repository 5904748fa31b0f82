import json
import subprocess
import sys

import pytest

from flowadapt.cli import main
from flowadapt.runs import write_jsonl
from flowadapt.tasks import read_manifest


@pytest.fixture
def config_file(tiny, tmp_path):
    path = tmp_path / "config.json"
    tiny(tmp_path / "unused").save(path)
    return path


def _run(*argv):
    return main([str(a) for a in argv])


def test_help_runs_as_module():
    out = subprocess.run([sys.executable, "-m", "flowadapt.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for command in ("pretrain", "finetune", "generate", "evaluate", "sweep", "corpus"):
        assert command in out.stdout


def test_full_pipeline_exit_codes(config_file, tmp_path, capsys):
    pre, ft = tmp_path / "pre", tmp_path / "ft"
    assert _run("pretrain", "--config", config_file, "--out", pre) == 0
    assert (pre / "final.ckpt").is_file()
    assert _run("corpus", "--config", config_file, "--out", tmp_path / "data") == 0
    assert _run("finetune", "--config", config_file, "--out", ft, "--base", pre,
                "--adapter", "lora_self_attention+bias_tuning", "--data-fraction", "0.5") == 0
    assert json.loads((ft / "summary.json").read_text())["n_trainable"] > 0

    held = tmp_path / "data" / "finetune" / "held_out.jsonl"
    requests = tmp_path / "data" / "finetune" / "requests_held_out.jsonl"
    assert _run("generate", "--config", config_file, "--out", tmp_path / "gen",
                "--checkpoint", ft, "--requests", requests) == 0
    assert _run("evaluate", "--config", config_file, "--out", tmp_path / "ev",
                "--generated", tmp_path / "gen" / "manifest.jsonl", "--gold", held) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert summary["n_missing"] == 0 and 0.0 <= summary["f1"] <= 1.0


def test_rejected_request_gives_partial_failure(config_file, tmp_path, capsys):
    pre = tmp_path / "pre"
    assert _run("pretrain", "--config", config_file, "--out", pre) == 0
    requests = write_jsonl(tmp_path / "r.jsonl", [{"id": "a", "symbols": [1, 2]},
                                                  {"id": "b", "symbols": [1], "z_f": "*s1*"}])
    assert _run("generate", "--config", config_file, "--out", tmp_path / "g",
                "--checkpoint", pre, "--requests", requests) == 1
    assert "rejected b" in capsys.readouterr().err
    assert [r["status"] for r in read_manifest(tmp_path / "g" / "manifest.jsonl")] == ["ok", "rejected"]


def test_evaluate_with_missing_outputs_gives_partial_failure(config_file, tmp_path):
    assert _run("corpus", "--config", config_file, "--out", tmp_path / "data") == 0
    held = tmp_path / "data" / "finetune" / "held_out.jsonl"
    records = read_manifest(held)
    partial = write_jsonl(tmp_path / "data" / "finetune" / "partial.jsonl", records[1:])
    assert _run("evaluate", "--config", config_file, "--out", tmp_path / "ev",
                "--generated", partial, "--gold", held) == 1


def test_unusable_inputs_exit_two(config_file, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"trainig": {}}))
    assert _run("pretrain", "--config", bad, "--out", tmp_path / "x") == 2
    assert _run("finetune", "--config", config_file, "--out", tmp_path / "y",
                "--base", tmp_path / "nowhere", "--adapter", "lora_self_attention") == 2
    assert _run("finetune", "--config", config_file, "--out", tmp_path / "y",
                "--base", tmp_path, "--adapter", "prefix_tuning") == 2


def test_seed_override_changes_run(config_file, tmp_path):
    assert _run("pretrain", "--config", config_file, "--out", tmp_path / "a", "--seed", "4") == 0
    assert json.loads((tmp_path / "a" / "config.json").read_text())["seed"] == 4


def test_sweep_command(config_file, tmp_path):
    pre = tmp_path / "pre"
    assert _run("pretrain", "--config", config_file, "--out", pre) == 0
    cfg = json.loads(config_file.read_text())
    cfg["adapter"] = {"kind": "lora", "lora_rank": 2, "lora_alpha": 2.0}
    sweep_cfg = tmp_path / "sweep.json"
    sweep_cfg.write_text(json.dumps(cfg))
    assert _run("sweep", "--config", sweep_cfg, "--out", tmp_path / "s", "--base", pre,
                "--axis", "lora_rank", "--values", "2,8") == 0
    rows = read_manifest(tmp_path / "s" / "sweep.jsonl")
    assert [r["value"] for r in rows] == [2, 8] and rows[1]["n_adaptive"] == 4 * rows[0]["n_adaptive"]
    assert _run("sweep", "--config", sweep_cfg, "--out", tmp_path / "s2", "--base", pre,
                "--axis", "adapter", "--values", "bogus") == 1
