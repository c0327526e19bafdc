"""Command-line harness: gen-data, estimate-eps, train, eval, sweep, report.

Every command resolves a RunConfig (defaults < --config file < --seed/--out
< repeated --set key=value overrides), runs, and writes a manifest JSON
with the resolved config and sha256 hashes of its deterministic outputs.
A manifest is itself a valid --config input, so any command can be
re-run from its manifest alone.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .artifacts import read_csv, sha256_file, write_csv, write_json, write_manifest
from .config import ConfigError, RunConfig, load_config
from .experiments import (
    SWEEP_CSV_COLUMNS,
    build_context,
    image_captioning_eval,
    modality_offset_from_corpus,
    noise_sweep,
    text_reconstruction_eval,
    write_sweep_charts,
)
from .model import load_checkpoint, save_checkpoint
from .training import TrainingDivergedError, train_text_only, NoiseConfig
from .world import Grammar, load_corpus, save_corpus


class UsageError(Exception):
    pass


class MissingArtifactError(RuntimeError):
    def __init__(self, path, producer):
        super().__init__(f"missing artifact {path}; produce it with `noisecap {producer}`")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _paths(out_dir):
    out = Path(out_dir)
    return {
        "captions": out / "captions.jsonl",
        "scenes": out / "scenes.jsonl",
        "epsilon": out / "epsilon.json",
        "checkpoint": out / "model.ckpt",
        "training_log": out / "training_log.csv",
        "metrics": out / "metrics.json",
        "sweep_dir": out / "sweep",
    }


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        cfg.apply_override(key.strip(), value.strip())
    return cfg


def _load_world(cfg: RunConfig, grammar: Grammar):
    p = _paths(cfg.out_dir)
    if not p["captions"].exists() or not p["scenes"].exists():
        raise MissingArtifactError(
            p["captions"] if not p["captions"].exists() else p["scenes"], "gen-data")
    scenes, corpus = load_corpus(p["captions"], p["scenes"], grammar=grammar)
    return build_context(cfg, grammar=grammar, scenes=scenes, corpus=corpus)


def _load_epsilon(cfg: RunConfig) -> dict:
    import json
    p = _paths(cfg.out_dir)["epsilon"]
    if not p.exists():
        raise MissingArtifactError(p, "estimate-eps")
    with open(p, encoding="utf-8") as f:
        return json.load(f)


# -- commands --------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, force: bool) -> int:
    p = _paths(cfg.out_dir)
    existing = [str(x) for x in (p["captions"], p["scenes"]) if x.exists()]
    if existing and not force:
        raise RuntimeError(
            f"refusing to overwrite {existing}; pass --force to regenerate")
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    ctx = build_context(cfg)
    save_corpus(ctx.corpus, ctx.scenes, p["captions"], p["scenes"])
    write_manifest(cfg.out_dir, "gen-data", cfg.to_dict(),
                   outputs={"captions": p["captions"], "scenes": p["scenes"]},
                   extra={"n_scenes": len(ctx.scenes),
                          "n_captions": len(ctx.corpus.captions),
                          "gap": ctx.image_encoder.gap.magnitudes()})
    print(f"wrote {p['captions']} ({len(ctx.corpus.captions)} captions) "
          f"and {p['scenes']} ({len(ctx.scenes)} scenes)")
    return 0


def cmd_estimate_eps(cfg: RunConfig) -> int:
    ctx = _load_world(cfg, Grammar())
    eps, provenance = ctx.resolve_epsilon()
    p = _paths(cfg.out_dir)
    payload = {"epsilon": eps, "epsilon_sq": eps * eps,
               "provenance": provenance,
               "inputs_hash": sha256_file(p["captions"])}
    write_json(p["epsilon"], payload)
    write_manifest(cfg.out_dir, "estimate-eps", cfg.to_dict(),
                   outputs={"epsilon": p["epsilon"]}, extra={"epsilon": eps})
    print(f"epsilon = {eps:.6f} (epsilon^2 = {eps*eps:.6f})")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    ctx = _load_world(cfg, Grammar())
    stored = _load_epsilon(cfg) if cfg.noise.source == "estimated" else None
    eps, provenance = ctx.resolve_epsilon(
        stored_epsilon=stored["epsilon"] if stored else None)
    if stored:
        provenance["estimate_inputs_hash"] = stored.get("inputs_hash")
    noise = NoiseConfig(epsilon=eps, source=cfg.noise.source,
                        rng_stream=cfg.noise.rng_stream)
    model = ctx.new_model()
    p = _paths(cfg.out_dir)
    diverged = False
    try:
        result = train_text_only(ctx.corpus, ctx.text_encoder, model, noise,
                                 ctx.train_config())
    except TrainingDivergedError as exc:
        result = exc.result
        diverged = True
    save_checkpoint(model, p["checkpoint"])
    write_csv(p["training_log"], result.log,
              ["step", "loss", "val_loss", "lr", "wall_ms"])
    write_manifest(cfg.out_dir, "train", cfg.to_dict(),
                   outputs={"checkpoint": p["checkpoint"]},
                   aux_outputs={"training_log": p["training_log"]},
                   extra={"epsilon": eps, "epsilon_sq": eps * eps,
                          "epsilon_provenance": provenance,
                          "diverged": diverged,
                          "final_loss": result.final_loss,
                          "param_count": model.param_count(),
                          "param_count_formula": model.param_count_formula(),
                          "gap": ctx.image_encoder.gap.magnitudes()})
    if diverged:
        print(f"training diverged; last good checkpoint kept at {p['checkpoint']}",
              file=sys.stderr)
        return 2
    print(f"trained {cfg.training.steps} steps at epsilon={eps:.6f}; "
          f"final loss {result.final_loss:.4f}; checkpoint {p['checkpoint']}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    ctx = _load_world(cfg, Grammar())
    p = _paths(cfg.out_dir)
    if not p["checkpoint"].exists():
        raise MissingArtifactError(p["checkpoint"], "train")
    model = load_checkpoint(p["checkpoint"],
                            expected_vocab_hash=ctx.grammar.vocab.vocab_hash())
    decode_cfg = ctx.decode_config()
    offset = modality_offset_from_corpus(ctx)
    image = image_captioning_eval(ctx, model, decode_cfg)
    recon = text_reconstruction_eval(ctx, model, decode_cfg)
    corrected = image_captioning_eval(ctx, model, decode_cfg, offset=offset)
    from .artifacts import run_id_for
    payload = {
        "config_fingerprint": run_id_for(cfg.to_dict(), cfg.seed),
        "image_captioning": image.scores,
        "text_reconstruction": recon.scores,
        "offset_corrected": corrected.scores,
        "image_captioning_samples": {
            str(k): v for k, v in sorted(image.per_sample.items())},
    }
    write_json(p["metrics"], payload)
    write_manifest(cfg.out_dir, "eval", cfg.to_dict(),
                   outputs={"metrics": p["metrics"]})
    for name, rep in (("image_captioning", image), ("text_reconstruction", recon),
                      ("offset_corrected", corrected)):
        line = " ".join(f"{m}={rep[m]:.4f}" for m in rep.scores)
        print(f"{name}: {line}")
    return 0


def cmd_sweep(cfg: RunConfig) -> int:
    p = _paths(cfg.out_dir)
    result = noise_sweep(cfg, out_dir=p["sweep_dir"])
    outputs = {"sweep_csv": result.csv_path}
    outputs.update({f"chart_{m}": path for m, path in result.chart_paths.items()})
    write_manifest(cfg.out_dir, "sweep", cfg.to_dict(), outputs=outputs,
                   extra={"failures": {str(k): v for k, v in result.failures.items()},
                          "run_id": result.run_id})
    print(f"sweep over {len(cfg.sweep.grid)} grid points -> {result.csv_path}")
    if result.failures:
        print(f"failed grid points: {result.failures}", file=sys.stderr)
    return 0


def cmd_report(run_dir) -> int:
    run_dir = Path(run_dir)
    csvs = sorted(run_dir.glob("**/sweep.csv"))
    if not csvs:
        raise RuntimeError(f"no sweep.csv found under {run_dir}; run `noisecap sweep`")
    rows = []
    for c in csvs:
        rows.extend(read_csv(c))
    report_dir = run_dir / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    summary_path = report_dir / "summary.csv"
    write_csv(summary_path, rows, SWEEP_CSV_COLUMNS)
    charts = write_sweep_charts(rows, report_dir)
    print(f"aggregated {len(csvs)} sweep table(s), {len(rows)} rows "
          f"-> {summary_path} and {len(charts)} charts")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="noisecap",
                     description="noise-injected text-only captioning testbed")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="config or manifest JSON path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="run output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="config override, repeatable")

    for name in ("gen-data", "estimate-eps", "train", "eval", "sweep"):
        p = sub.add_parser(name)
        common(p)
        if name == "gen-data":
            p.add_argument("--force", action="store_true",
                           help="overwrite existing data files")
    rp = sub.add_parser("report")
    rp.add_argument("run_dir", help="run directory holding sweep outputs")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command == "report":
            return cmd_report(args.run_dir)
        cfg = _resolve_config(args)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, force=args.force)
        if args.command == "estimate-eps":
            return cmd_estimate_eps(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
