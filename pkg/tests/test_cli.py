"""CLI harness: artifact flow, manifests, determinism, exit codes."""

import json
from pathlib import Path

import pytest

from noisecap.artifacts import sha256_file
from noisecap.cli import main
from noisecap.config import RunConfig, load_config
from noisecap.experiments import build_context
from noisecap.model import save_checkpoint
from noisecap.world import SHAPES, COLORS, SIZES, RELATIONS, OBJECT_COUNT_WEIGHTS

TINY = [
    "--set", "world.n_train_scenes=10", "--set", "world.n_val_scenes=2",
    "--set", "world.n_test_scenes=4",
    "--set", "model.d_model=32", "--set", "model.n_blocks=1",
    "--set", "model.prefix_len=4", "--set", "model.mapper_hidden=64",
    "--set", "training.steps=30", "--set", "training.batch_size=8",
    "--set", "training.val_every=15",
    "--set", "decoding.strategy=greedy",
    "--set", "noise.estimation_groups=8",
]


def run(args):
    return main(args)


def tiny_args(cmd, out, seed=3, extra=()):
    return [cmd, "--out", str(out), "--seed", str(seed), *TINY, *extra]


@pytest.fixture()
def run_dir(tmp_path):
    return tmp_path / "run"


def test_quickstart_sequence(run_dir, capsys):
    assert run(tiny_args("gen-data", run_dir)) == 0
    assert (run_dir / "captions.jsonl").exists()
    assert (run_dir / "scenes.jsonl").exists()
    assert (run_dir / "manifest-gen-data.json").exists()
    assert run(tiny_args("estimate-eps", run_dir)) == 0
    eps = json.loads((run_dir / "epsilon.json").read_text())
    assert eps["epsilon"] > 0
    assert run(tiny_args("train", run_dir)) == 0
    assert (run_dir / "model.ckpt").exists()
    assert run(tiny_args("eval", run_dir)) == 0
    metrics = json.loads((run_dir / "metrics.json").read_text())
    assert set(metrics) >= {"image_captioning", "text_reconstruction",
                            "offset_corrected"}


def test_gen_data_refuses_overwrite_then_forces(run_dir):
    assert run(tiny_args("gen-data", run_dir)) == 0
    h1 = sha256_file(run_dir / "captions.jsonl")
    assert run(tiny_args("gen-data", run_dir)) == 2
    assert run(tiny_args("gen-data", run_dir, extra=("--force",))) == 0
    assert sha256_file(run_dir / "captions.jsonl") == h1  # same seed, same bytes


def test_estimated_epsilon_reused_by_train(run_dir):
    run(tiny_args("gen-data", run_dir))
    run(tiny_args("estimate-eps", run_dir))
    stored = json.loads((run_dir / "epsilon.json").read_text())["epsilon"]
    assert run(tiny_args("train", run_dir)) == 0
    manifest = json.loads((run_dir / "manifest-train.json").read_text())
    assert manifest["epsilon"] == stored
    assert manifest["epsilon_provenance"]["stored"] is True


def test_train_rerun_from_manifest_reproduces_checkpoint(run_dir):
    run(tiny_args("gen-data", run_dir))
    run(tiny_args("estimate-eps", run_dir))
    assert run(tiny_args("train", run_dir)) == 0
    h1 = sha256_file(run_dir / "model.ckpt")
    manifest_path = run_dir / "manifest-train.json"
    assert run(["train", "--config", str(manifest_path)]) == 0
    assert sha256_file(run_dir / "model.ckpt") == h1


def test_missing_artifact_names_producer(run_dir, capsys):
    rc = run(tiny_args("train", run_dir))
    assert rc == 2
    err = capsys.readouterr().err
    assert "gen-data" in err and "captions.jsonl" in err


def test_eval_requires_checkpoint(run_dir, capsys):
    run(tiny_args("gen-data", run_dir))
    rc = run(tiny_args("eval", run_dir))
    assert rc == 2
    assert "train" in capsys.readouterr().err


def chance_rate():
    per_object = len(SHAPES) * len(COLORS) * len(SIZES)
    total = 0.0
    for k, w in OBJECT_COUNT_WEIGHTS.items():
        space = per_object ** k * (len(RELATIONS) if k >= 2 else 1)
        total += w / space
    return total


def test_eval_untrained_checkpoint_near_chance(run_dir):
    run(tiny_args("gen-data", run_dir))
    cfg = RunConfig(seed=3)
    for item in TINY[1::2]:
        cfg.apply_override(*item.split("="))
    cfg.seed = 3
    cfg.out_dir = str(run_dir)
    ctx = build_context(cfg)
    save_checkpoint(ctx.new_model(), run_dir / "model.ckpt")
    assert run(tiny_args("eval", run_dir)) == 0
    metrics = json.loads((run_dir / "metrics.json").read_text())
    acc = metrics["image_captioning"]["attribute_accuracy"]
    assert acc < 1.5 * chance_rate() + 1e-12


def test_sweep_and_report(run_dir):
    extra = ("--set", "sweep.grid=[0.0]")
    assert run(tiny_args("sweep", run_dir, extra=extra)) == 0
    csv_path = run_dir / "sweep" / "sweep.csv"
    rows = csv_path.read_text().strip().splitlines()
    assert len(rows) - 1 == 1 * 4 * 6  # grid x methods x metrics
    assert run(["report", str(run_dir)]) == 0
    assert (run_dir / "report" / "summary.csv").exists()
    assert (run_dir / "report" / "chart-attribute_accuracy.svg").exists()


def test_report_on_empty_dir_fails(tmp_path, capsys):
    assert run(["report", str(tmp_path)]) == 2
    assert "sweep" in capsys.readouterr().err


def test_usage_errors_exit_one(capsys):
    assert run(["train", "--set", "notakey"]) == 1
    assert run(["train", "--set", "bogus.path=1"]) == 1
    assert run(["definitely-not-a-command"]) == 1


def test_config_file_and_overrides(tmp_path):
    cfg = RunConfig(seed=9)
    cfg.training.steps = 77
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    loaded = load_config(path)
    assert loaded.training.steps == 77 and loaded.seed == 9
    loaded.apply_override("training.steps", "123")
    loaded.apply_override("sweep.grid", "[0.0, 0.5]")
    assert loaded.training.steps == 123
    assert loaded.sweep.grid == (0.0, 0.5)
