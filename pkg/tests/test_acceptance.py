"""Acceptance suite: the mechanistic findings, one test per criterion.

Each test prints a PASS/FAIL line. The profile below is the frozen
acceptance configuration; the noise-sweep criteria train 12 models per
seed for three seeds, so the whole module takes over an hour on a
2-core CPU. Criterion runtimes are dominated by training, not checks.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from noisecap import tensor as T
from noisecap.artifacts import sha256_file
from noisecap.cli import main as cli_main
from noisecap.config import RunConfig
from noisecap.experiments import (
    build_context,
    image_captioning_eval,
    modality_offset_from_corpus,
    noise_sweep,
    text_reconstruction_eval,
)
from noisecap.metrics import compute_metrics
from noisecap.model import DecoderModel, ModelConfig
from noisecap.training import (
    NoiseConfig,
    estimate_epsilon,
    estimation_groups,
    train_text_only,
)
from noisecap.world import Grammar, contains_style_marker
from oracles import (
    bleu_corpus,
    cider_corpus,
    epsilon_bruteforce,
    finite_difference_grad,
    finite_difference_grad_sampled,
    grad_close,
    rouge_l_corpus,
)

GRID = (0.0, 0.001, 0.004, 0.016, 0.064, 0.25)
SWEEP_SEEDS = (0, 1, 2)


def acceptance_profile(seed=0, style="neutral") -> RunConfig:
    cfg = RunConfig(seed=seed)
    cfg.world.n_train_scenes = 1000
    cfg.world.n_val_scenes = 20
    cfg.world.n_test_scenes = 150
    cfg.world.style = style
    cfg.gap.offset_linf = 0.20
    cfg.gap.rotation_strength = 0.42
    cfg.gap.per_sample_jitter_std = 0.04
    cfg.training.steps = 2400
    cfg.training.batch_size = 32
    cfg.training.lr = 2e-3
    cfg.training.warmup_steps = 100
    cfg.training.val_every = 10**9  # no mid-run validation in timed runs
    cfg.decoding.strategy = "greedy"
    cfg.sweep.grid = GRID
    return cfg


def announce(criterion, ok, detail):
    print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, detail


# -- shared expensive fixtures ------------------------------------------------------


@pytest.fixture(scope="module")
def gap_bridge_run():
    """Criterion 1's paired runs; also reused by the style criterion."""
    t0 = time.perf_counter()
    ctx = build_context(acceptance_profile(seed=0))
    eps = estimate_epsilon(estimation_groups(ctx.corpus, 15), ctx.text_encoder)
    models = {}
    reports = {}
    for tag, e in (("zero", 0.0), ("estimated", eps)):
        model = ctx.new_model()
        train_text_only(ctx.corpus, ctx.text_encoder, model, NoiseConfig(e),
                        ctx.train_config())
        models[tag] = model
        reports[tag] = image_captioning_eval(ctx, model)
    return {"ctx": ctx, "epsilon": eps, "models": models, "reports": reports,
            "wall_minutes": (time.perf_counter() - t0) / 60}


@pytest.fixture(scope="module")
def sweeps():
    """Full default-grid sweeps for three seeds (criteria 2, 3, 4, 5b)."""
    results = {}
    for seed in SWEEP_SEEDS:
        results[seed] = noise_sweep(acceptance_profile(seed=seed))
        assert not results[seed].failures, results[seed].failures
    return results


# -- criteria -----------------------------------------------------------------------


def test_criterion_1_gap_bridging(gap_bridge_run):
    run = gap_bridge_run
    a0 = run["reports"]["zero"]["attribute_accuracy"]
    ae = run["reports"]["estimated"]["attribute_accuracy"]
    b0 = run["reports"]["zero"]["bleu4"]
    be = run["reports"]["estimated"]["bleu4"]
    ok = (ae >= a0 + 0.15) and (be > b0) and run["wall_minutes"] < 15.0
    announce(1, ok,
             f"attr {a0:.3f} -> {ae:.3f} (need +0.15), bleu4 {b0:.3f} -> {be:.3f} "
             f"(need strictly higher), wall {run['wall_minutes']:.1f} min (< 15)")


def test_criterion_2_interior_optimum(sweeps):
    argmaxes = {s: r.argmax_epsilon_sq("text_only", "attribute_accuracy")
                for s, r in sweeps.items()}
    interior = {s: (GRID[0] < a < GRID[-1]) for s, a in argmaxes.items()}
    announce(2, all(interior.values()),
             f"text-only attribute-accuracy argmax per seed: {argmaxes} "
             f"(must be strictly inside ({GRID[0]}, {GRID[-1]}))")


def test_criterion_3_text_reconstruction_prefers_no_noise(sweeps):
    argmaxes = {s: r.argmax_epsilon_sq("text_reconstruction", "attribute_accuracy")
                for s, r in sweeps.items()}
    announce(3, all(a == GRID[0] for a in argmaxes.values()),
             f"text-reconstruction argmax per seed: {argmaxes} (must be {GRID[0]})")


def test_criterion_4_supervised_prefers_no_noise(sweeps):
    argmaxes = {s: r.argmax_epsilon_sq("supervised_paired", "attribute_accuracy")
                for s, r in sweeps.items()}
    announce(4, all(a == GRID[0] for a in argmaxes.values()),
             f"supervised-paired argmax per seed: {argmaxes} (must be {GRID[0]})")


def test_criterion_5_offset_correction(sweeps):
    # (a) pure-offset gap: every non-offset gap component is switched off
    # (no rotation, no jitter, no renormalization, single canonical caption
    # so the image embedding IS a text embedding plus the offset vector).
    # Offset-corrected decoding is compared against text reconstruction of
    # those same held-out canonical captions; with the gap analytically
    # bridged the two accuracies must agree within 2 points.
    cfg = acceptance_profile(seed=0)
    cfg.gap.rotation_strength = 0.0
    cfg.gap.per_sample_jitter_std = 0.0
    cfg.gap.renormalize = False
    cfg.encoder.canonical_captions = 1
    ctx = build_context(cfg)
    model = ctx.new_model()
    train_text_only(ctx.corpus, ctx.text_encoder, model, NoiseConfig(0.0),
                    ctx.train_config())
    offset = modality_offset_from_corpus(ctx)
    corrected = image_captioning_eval(ctx, model, offset=offset)

    # text reconstruction over the same scenes' canonical captions
    from noisecap.decoding import caption_batch
    test_scenes = [ctx.scene_by_id[i] for i in ctx.corpus.scene_ids("test")]
    canon = [ctx.image_encoder.canonical_captions(s)[0] for s in test_scenes]
    decoded = caption_batch(ctx.text_encoder.encode_all(canon), model,
                            ctx.decode_config(), ctx.grammar)
    recon = compute_metrics({i: c for i, c in enumerate(decoded)},
                            {i: [c] for i, c in enumerate(canon)}, ctx.grammar)
    gap_a = abs(corrected["attribute_accuracy"] - recon["attribute_accuracy"])
    ok_a = gap_a <= 0.02

    # (b) default mixed gap: the best noisy text-only grid point beats
    # offset-corrected zero-noise decoding
    ok_b = True
    detail_b = []
    for seed, res in sweeps.items():
        best_noisy = max(v for e, v in res.curve("text_only", "attribute_accuracy"))
        off0 = res.value(0.0, "offset_corrected", "attribute_accuracy")
        detail_b.append(f"seed {seed}: best text-only {best_noisy:.3f} vs "
                        f"offset@0 {off0:.3f}")
        ok_b = ok_b and best_noisy > off0
    announce(5, ok_a and ok_b,
             f"pure-offset |corrected - recon| = {gap_a:.3f} (<= 0.02, corrected "
             f"{corrected['attribute_accuracy']:.3f} vs recon "
             f"{recon['attribute_accuracy']:.3f}); mixed gap: {'; '.join(detail_b)}")


def test_criterion_6_epsilon_estimator_oracle():
    grammar = Grammar()
    from noisecap.encoders import EncoderConfig, TextEncoder
    from noisecap.world import generate_corpus
    worst = 0.0
    for trial in range(20):
        encoder = TextEncoder(grammar, EncoderConfig(seed=trial))
        rng = np.random.default_rng(trial)
        _, corpus = generate_corpus(trial, int(rng.integers(6, 16)), 5,
                                    split_counts=None, grammar=grammar)
        groups = list(corpus.by_scene().values())
        est = estimate_epsilon(groups, encoder)
        brute = epsilon_bruteforce([encoder.encode_all(g) for g in groups])
        worst = max(worst, abs(est - brute))
    cap = corpus.captions[0]
    zero = estimate_epsilon([[cap] * 5], encoder)
    ok = worst <= 1e-7 and zero == 0.0
    announce(6, ok, f"max |estimator - bruteforce| over 20 sets = {worst:.2e} "
                    f"(<= 1e-7); identical-caption groups -> {zero}")


def _t(v):
    return v if isinstance(v, T.Tensor) else T.Tensor(v, dtype=np.float64)


def _primitive_cases(rng):
    x = rng.normal(size=(3, 5))
    g0 = rng.normal(size=5) * 0.3 + 1.0
    b0 = rng.normal(size=5) * 0.2
    a2 = rng.normal(size=(4, 3))
    b2 = rng.normal(size=(3, 2))
    table = rng.normal(size=(6, 4))
    ids = rng.integers(0, 6, size=(2, 3))
    yield "relu", lambda v: T.relu(_t(v)), x + 0.1
    yield "gelu", lambda v: T.gelu(_t(v)), x
    yield "softmax", lambda v: T.softmax(_t(v)), x
    yield ("layer_norm",
           lambda v: T.layer_norm(_t(v), T.Tensor(g0, dtype=np.float64),
                                  T.Tensor(b0, dtype=np.float64)), x)
    yield ("matmul",
           lambda v: T.matmul(_t(v), T.Tensor(b2, dtype=np.float64)), a2)
    yield "mul_broadcast", lambda v: T.mul(_t(v), T.Tensor(b0, dtype=np.float64)), x
    yield "add_broadcast", lambda v: T.add(_t(v), T.Tensor(b0, dtype=np.float64)), x
    yield ("embedding_gather",
           lambda v: T.embedding_gather(_t(v), ids), table)
    yield ("concat_slice",
           lambda v: T.concat([_t(v), T.Tensor(a2, dtype=np.float64)],
                              axis=1)[:, 1:5], a2)
    yield ("reshape_transpose",
           lambda v: T.transpose(T.reshape(_t(v), (2, 6))), a2)
    yield ("cross_entropy",
           lambda v: T.cross_entropy(_t(v), np.array([2, 0, 4]), pad_id=0), x)


def test_criterion_7_gradients_match_finite_differences():
    failures = []
    trials = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        for name, op, x0 in _primitive_cases(rng):
            trials += 1
            with T.ComputationTape():
                xt = T.Tensor(x0, requires_grad=True, dtype=np.float64)
                out = op(xt)
                loss = T.mul(out, out).sum() if out.size > 1 else out
                T.backward(loss)

            def f(v, op=op):
                o = op(v)
                return float((o.data * o.data).sum()) if o.size > 1 else o.item()

            fd = finite_difference_grad(f, np.asarray(x0, dtype=np.float64).copy())
            if not grad_close(xt.grad, fd, rel=1e-3, abs_floor=1e-5):
                failures.append((seed, name))

    # full model loss, sampled coordinates per trial
    cfg = ModelConfig(embed_dim=8, d_model=16, n_heads=2, n_blocks=1,
                      prefix_len=2, vocab_size=11, max_seq_len=6,
                      mapper_hidden=12)
    model_trials = 0
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        model = DecoderModel(cfg, "accept", seed=seed)
        for p in model.params.values():
            p.data = p.data.astype(np.float64)
        emb = rng.standard_normal((2, 8))
        tokens = rng.integers(3, 11, size=(2, 5))
        tokens[:, 0] = 1
        pname = ["tok_emb", "head", "block0.wq", "map.w1"][seed % 4]
        param = model.params[pname]
        with T.ComputationTape() as tape:
            loss = T.cross_entropy(model.forward(emb, tokens), tokens, pad_id=0)
            tape.backward(loss)
        coords = rng.choice(param.size, size=min(12, param.size), replace=False)

        def f_model(v, model=model, pname=pname, emb=emb, tokens=tokens):
            old = model.params[pname].data
            model.params[pname].data = v
            out = T.cross_entropy(model.forward(emb, tokens), tokens, pad_id=0).item()
            model.params[pname].data = old
            return out

        fd = finite_difference_grad_sampled(f_model, param.data.copy(), coords)
        analytic = param.grad.reshape(-1)
        for c, val in fd.items():
            model_trials += 1
            if not grad_close(analytic[c], val, rel=1e-3, abs_floor=1e-5):
                failures.append((seed, f"model:{pname}[{c}]"))
    ok = not failures
    announce(7, ok, f"{trials} primitive checks + {model_trials} sampled "
                    f"full-model coordinates across 100 seeded trials; "
                    f"failures: {failures[:5]}")


def test_criterion_8_metric_oracle_equivalence(grammar):
    cands = {
        "s1": "a big red circle",
        "s2": "there is a small blue square left of a big green star",
        "s3": "a small blue circle",
    }
    refs = {
        "s1": ["a big red circle", "there is a large crimson disk",
               "you can see a big red circle", "a large red disk",
               "the picture shows a big crimson circle"],
        "s2": ["a small blue square left of a big green star",
               "there is a little cobalt block left of a large jade burst",
               "a small blue block left of a big green star",
               "you can see a small cobalt square left of a large green star",
               "a little blue square left of a big jade star"],
        "s3": ["a big yellow ring", "a large gold hoop",
               "there is a big yellow ring", "you can see a large gold ring",
               "a big gold ring"],
    }
    rep = compute_metrics(cands, refs, grammar)
    ids = sorted(cands)
    cw = [tuple(cands[i].split()) for i in ids]
    rw = [[tuple(r.split()) for r in refs[i]] for i in ids]
    deltas = {
        "bleu1": abs(rep["bleu1"] - bleu_corpus(cw, rw, 1)),
        "bleu4": abs(rep["bleu4"] - bleu_corpus(cw, rw, 4)),
        "rouge_l": abs(rep["rouge_l"] - rouge_l_corpus(cw, rw)),
        "cider": abs(rep["cider"] - cider_corpus(cw, rw)[0]),
    }
    ident = compute_metrics({0: "a big red circle"},
                            {0: ["a big red circle"]}, grammar)
    disjoint = compute_metrics({0: "a big red circle"},
                               {0: ["there is one small cobalt star"]}, grammar)
    ok = (max(deltas.values()) <= 1e-6 and ident["bleu1"] == 1.0
          and ident["rouge_l"] == 1.0 and disjoint["bleu1"] == 0.0)
    announce(8, ok, f"oracle deltas {deltas} (<= 1e-6); identical -> bleu1="
                    f"{ident['bleu1']}, rouge={ident['rouge_l']}; disjoint -> "
                    f"bleu1={disjoint['bleu1']}")


def test_criterion_9_style_adaptation(gap_bridge_run):
    neutral_ctx = gap_bridge_run["ctx"]
    neutral_model = gap_bridge_run["models"]["estimated"]
    neutral_rep = gap_bridge_run["reports"]["estimated"]

    style_cfg = acceptance_profile(seed=0, style="romantic_like")
    style_ctx = build_context(style_cfg)
    # the noise scale estimated once on neutral text is reused for the
    # styled corpus rather than re-estimated per dataset
    eps = gap_bridge_run["epsilon"]
    style_model = style_ctx.new_model()
    train_text_only(style_ctx.corpus, style_ctx.text_encoder, style_model,
                    NoiseConfig(eps), style_ctx.train_config())
    style_rep = image_captioning_eval(style_ctx, style_model)

    rate_before = neutral_rep["style_marker_rate"]
    rate_after = style_rep["style_marker_rate"]
    attr_drop = (neutral_rep["attribute_accuracy"]
                 - style_rep["attribute_accuracy"])
    ok = rate_before < 0.05 and rate_after > 0.80 and attr_drop <= 0.10
    announce(9, ok,
             f"style marker rate {rate_before:.3f} -> {rate_after:.3f} "
             f"(need <0.05 -> >0.80); attribute accuracy drop {attr_drop:.3f} "
             f"(<= 0.10)")


def test_criterion_10_manifest_determinism(tmp_path):
    tiny = [
        "--set", "world.n_train_scenes=12", "--set", "world.n_val_scenes=2",
        "--set", "world.n_test_scenes=4", "--set", "model.d_model=32",
        "--set", "model.n_blocks=1", "--set", "model.prefix_len=4",
        "--set", "model.mapper_hidden=64", "--set", "training.steps=40",
        "--set", "training.batch_size=8", "--set", "training.val_every=20",
        "--set", "decoding.strategy=greedy",
        "--set", "noise.estimation_groups=8",
        "--set", "sweep.grid=[0.0, 0.01]",
    ]
    out = tmp_path / "run"
    hashes = {}
    for cmd in ("gen-data", "estimate-eps", "train", "eval", "sweep"):
        args = [cmd, "--out", str(out), "--seed", "11", *tiny]
        if cmd == "gen-data":
            args.append("--force")
        assert cli_main(args) == 0, cmd
    import json
    mismatches = []
    for cmd in ("gen-data", "estimate-eps", "train", "eval", "sweep"):
        manifest = out / f"manifest-{cmd}.json"
        recorded = json.loads(manifest.read_text())["outputs"]
        assert cli_main([cmd, "--config", str(manifest),
                         *(["--force"] if cmd == "gen-data" else [])]) == 0
        base = out if cmd != "sweep" else out / "sweep"
        for label, meta in recorded.items():
            path = (out / meta["path"]) if (out / meta["path"]).exists() \
                else (base / meta["path"])
            if sha256_file(path) != meta["sha256"]:
                mismatches.append((cmd, label))
    announce(10, not mismatches,
             f"all command outputs reproduce their manifest hashes exactly; "
             f"mismatches: {mismatches}")
