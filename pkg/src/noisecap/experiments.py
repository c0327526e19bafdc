"""Experiment orchestration: world construction from a RunConfig, the three
image-side evaluations, the text-reconstruction evaluation, modality offset
correction, and the noise sweep with CSV/SVG emission.

The sweep trains every grid point from the identical parameter
initialization (same derived init seed), so curves differ only through
the injected noise scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .artifacts import run_id_for, write_csv
from .config import RunConfig
from .decoding import DecodeConfig, caption_batch
from .encoders import EncoderConfig, GapConfig, ImageEncoder, TextEncoder
from .metrics import METRIC_NAMES, MetricsReport, compute_metrics
from .model import DecoderModel, ModelConfig
from .seeding import stable_seed
from .training import (
    NoiseConfig,
    TrainConfig,
    estimate_epsilon,
    estimation_groups,
    supervised_paired_train,
    train_text_only,
)
from .world import Corpus, Grammar, Scene, generate_corpus

SWEEP_CSV_COLUMNS = ["epsilon_sq", "method", "metric", "value", "seed", "run_id"]


@dataclass
class ExperimentContext:
    """Everything derived from (RunConfig, seed): world, encoders, splits."""

    config: RunConfig
    grammar: Grammar
    scenes: list[Scene]
    corpus: Corpus
    text_encoder: TextEncoder
    image_encoder: ImageEncoder
    scene_by_id: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scene_by_id = {s.scene_id: s for s in self.scenes}

    def decode_config(self) -> DecodeConfig:
        d = self.config.decoding
        return DecodeConfig(strategy=d.strategy, beam_width=d.beam_width,
                            max_length=d.max_length, length_norm=d.length_norm)

    def train_config(self) -> TrainConfig:
        t = self.config.training
        return TrainConfig(steps=t.steps, batch_size=t.batch_size, lr=t.lr,
                           warmup_steps=t.warmup_steps, weight_decay=t.weight_decay,
                           seed=stable_seed(self.config.seed, "training"),
                           val_every=t.val_every,
                           early_stop_patience=t.early_stop_patience)

    def model_config(self) -> ModelConfig:
        m = self.config.model
        return ModelConfig(embed_dim=self.config.encoder.dim, d_model=m.d_model,
                           n_heads=m.n_heads, n_blocks=m.n_blocks,
                           prefix_len=m.prefix_len,
                           vocab_size=len(self.grammar.vocab),
                           max_seq_len=m.max_seq_len, mapper=m.mapper,
                           mapper_hidden=m.mapper_hidden,
                           mapper_layers=m.mapper_layers,
                           mapper_activation=m.mapper_activation,
                           init_std=m.init_std)

    def new_model(self) -> DecoderModel:
        return DecoderModel(self.model_config(), self.grammar.vocab.vocab_hash(),
                            seed=stable_seed(self.config.seed, "model-init"))

    def resolve_epsilon(self, stored_epsilon: float | None = None):
        """Noise scale per the config: estimated from caption groups or fixed."""
        n = self.config.noise
        if n.source == "fixed":
            return float(n.epsilon), {"source": "fixed", "epsilon": float(n.epsilon)}
        if stored_epsilon is not None:
            return float(stored_epsilon), {"source": "estimated", "stored": True}
        groups = estimation_groups(self.corpus, n.estimation_groups)
        eps = estimate_epsilon(groups, self.text_encoder)
        return eps, {"source": "estimated", "n_groups": n.estimation_groups,
                     "group_scene_ids": [g[0].scene_id for g in groups]}


def build_context(cfg: RunConfig, grammar: Grammar | None = None,
                  scenes=None, corpus=None) -> ExperimentContext:
    grammar = grammar or Grammar()
    if scenes is None or corpus is None:
        scenes, corpus = generate_corpus(
            seed=stable_seed(cfg.seed, "world"),
            n_scenes=cfg.world.n_scenes,
            captions_per_scene=cfg.world.captions_per_scene,
            style=cfg.world.style,
            split_counts=cfg.world.split_counts,
            grammar=grammar,
        )
    enc = TextEncoder(grammar, EncoderConfig(
        dim=cfg.encoder.dim, seed=stable_seed(cfg.seed, "encoder"),
        salt_scale=cfg.encoder.salt_scale,
        canonical_captions=cfg.encoder.canonical_captions))
    gap = GapConfig.create(
        dim=cfg.encoder.dim, seed=stable_seed(cfg.seed, "gap"),
        offset_linf=cfg.gap.offset_linf,
        rotation_strength=cfg.gap.rotation_strength,
        per_sample_jitter_std=cfg.gap.per_sample_jitter_std,
        renormalize=cfg.gap.renormalize)
    img = ImageEncoder(enc, gap)
    return ExperimentContext(config=cfg, grammar=grammar, scenes=scenes,
                             corpus=corpus, text_encoder=enc, image_encoder=img)


# -- evaluations -----------------------------------------------------------------


def image_captioning_eval(ctx: ExperimentContext, model: DecoderModel,
                          decode_cfg: DecodeConfig | None = None,
                          split: str = "test",
                          offset: np.ndarray | None = None) -> MetricsReport:
    """Decode image embeddings of a split's scenes and score against that
    scene's reference captions and ground-truth attributes."""
    decode_cfg = decode_cfg or ctx.decode_config()
    ids = ctx.corpus.scene_ids(split)
    groups = ctx.corpus.by_scene()
    embs = np.stack([ctx.image_encoder.encode(ctx.scene_by_id[i]) for i in ids])
    caps = caption_batch(embs, model, decode_cfg, ctx.grammar,
                         scene_ids=ids, offset=offset)
    return compute_metrics(
        {c.scene_id: c for c in caps},
        {i: groups[i] for i in ids},
        ctx.grammar,
        expected_attributes={i: ctx.scene_by_id[i].attribute_multiset() for i in ids},
    )


def text_reconstruction_eval(ctx: ExperimentContext, model: DecoderModel,
                             decode_cfg: DecodeConfig | None = None,
                             split: str = "test",
                             limit: int | None = None) -> MetricsReport:
    """Decode clean text embeddings of held-out captions and score each
    decode against its own source caption."""
    decode_cfg = decode_cfg or ctx.decode_config()
    captions = ctx.corpus.split(split)
    if limit is not None:
        captions = captions[:limit]
    if not captions:
        raise ValueError(f"no held-out captions in split {split!r}")
    embs = ctx.text_encoder.encode_all(captions)
    decoded = caption_batch(embs, model, decode_cfg, ctx.grammar)
    candidates = {i: c for i, c in enumerate(decoded)}
    references = {i: [c] for i, c in enumerate(captions)}
    return compute_metrics(candidates, references, ctx.grammar)


def compute_modality_offset(text_embeddings: np.ndarray,
                            image_embeddings: np.ndarray) -> np.ndarray:
    """Shift between the modality means: mean(text) - mean(image).

    The two sets need not be paired; they only need a common dimension.
    """
    text_embeddings = np.asarray(text_embeddings)
    image_embeddings = np.asarray(image_embeddings)
    if text_embeddings.size == 0 or image_embeddings.size == 0:
        raise ValueError("offset needs non-empty embedding sets")
    if text_embeddings.shape[1] != image_embeddings.shape[1]:
        raise ValueError(
            f"dimension mismatch: text d={text_embeddings.shape[1]} vs "
            f"image d={image_embeddings.shape[1]}")
    return (text_embeddings.mean(axis=0, dtype=np.float64)
            - image_embeddings.mean(axis=0, dtype=np.float64)).astype(np.float32)


def modality_offset_from_corpus(ctx: ExperimentContext, split: str = "train"):
    texts = ctx.text_encoder.encode_all(ctx.corpus.split(split))
    images = np.stack([ctx.image_encoder.encode(ctx.scene_by_id[i])
                       for i in ctx.corpus.scene_ids(split)])
    return compute_modality_offset(texts, images)


def offset_corrected_caption(scene: Scene, model: DecoderModel,
                             offset: np.ndarray, ctx: ExperimentContext,
                             decode_cfg: DecodeConfig | None = None):
    """Decode E_img(scene) + offset with the given model."""
    from .decoding import caption_image
    return caption_image(scene, model, decode_cfg or ctx.decode_config(),
                         ctx.grammar, image_encoder=ctx.image_encoder,
                         offset=offset)


# -- noise sweep --------------------------------------------------------------------


@dataclass
class SweepResult:
    rows: list[dict]
    failures: dict
    run_id: str
    csv_path: Path | None = None
    chart_paths: dict = field(default_factory=dict)

    def value(self, epsilon_sq: float, method: str, metric: str) -> float:
        for r in self.rows:
            if (float(r["epsilon_sq"]) == float(epsilon_sq)
                    and r["method"] == method and r["metric"] == metric):
                return float(r["value"])
        raise KeyError((epsilon_sq, method, metric))

    def curve(self, method: str, metric: str):
        pts = [(float(r["epsilon_sq"]), float(r["value"])) for r in self.rows
               if r["method"] == method and r["metric"] == metric]
        pts.sort()
        return pts

    def argmax_epsilon_sq(self, method: str, metric: str) -> float:
        pts = self.curve(method, metric)
        vals = np.array([v for _, v in pts])
        return pts[int(np.nanargmax(vals))][0]


def _fmt(v: float) -> str:
    return "nan" if not np.isfinite(v) else f"{v:.6f}"


def noise_sweep(cfg: RunConfig, out_dir=None, progress=None) -> SweepResult:
    """Train and evaluate every method at every grid noise variance.

    Emits one CSV row per (epsilon_sq, method, metric); grid points that
    fail are recorded and filled with nan rows so the table shape is
    stable.
    """
    grid = sorted(float(e) for e in cfg.sweep.grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    methods = tuple(cfg.sweep.methods)
    ctx = build_context(cfg)
    run_id = run_id_for(cfg.to_dict(), cfg.seed)
    decode_cfg = ctx.decode_config()
    train_cfg = ctx.train_config()
    offset = modality_offset_from_corpus(ctx)
    rows: list[dict] = []
    failures: dict = {}

    for eps_sq in grid:
        eps = math.sqrt(eps_sq)
        reports: dict[str, MetricsReport] = {}
        try:
            noise = NoiseConfig(epsilon=eps, source="fixed",
                                rng_stream=cfg.noise.rng_stream)
            if {"text_only", "text_reconstruction", "offset_corrected"} & set(methods):
                model = ctx.new_model()
                train_text_only(ctx.corpus, ctx.text_encoder, model, noise, train_cfg)
                if "text_only" in methods:
                    reports["text_only"] = image_captioning_eval(ctx, model, decode_cfg)
                if "text_reconstruction" in methods:
                    reports["text_reconstruction"] = text_reconstruction_eval(
                        ctx, model, decode_cfg)
                if "offset_corrected" in methods:
                    reports["offset_corrected"] = image_captioning_eval(
                        ctx, model, decode_cfg, offset=offset)
            if "supervised_paired" in methods:
                sup = ctx.new_model()
                supervised_paired_train(ctx.scenes, ctx.corpus, ctx.image_encoder,
                                        sup, noise, train_cfg)
                reports["supervised_paired"] = image_captioning_eval(
                    ctx, sup, decode_cfg)
        except Exception as exc:  # record and continue with the rest of the grid
            failures[eps_sq] = f"{type(exc).__name__}: {exc}"
        for method in methods:
            rep = reports.get(method)
            for metric in METRIC_NAMES:
                value = rep[metric] if rep is not None else float("nan")
                rows.append({"epsilon_sq": _fmt(eps_sq), "method": method,
                             "metric": metric, "value": _fmt(value),
                             "seed": cfg.seed, "run_id": run_id})
        if progress:
            progress(eps_sq, reports)

    result = SweepResult(rows=rows, failures=failures, run_id=run_id)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.csv_path = out_dir / "sweep.csv"
        write_csv(result.csv_path, rows, SWEEP_CSV_COLUMNS)
        result.chart_paths = write_sweep_charts(rows, out_dir)
    return result


def write_sweep_charts(rows: list[dict], out_dir) -> dict:
    """One SVG line chart per metric: noise variance (log x) vs score,
    one series per method."""
    import matplotlib
    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "noisecap"  # deterministic SVG ids
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_metric: dict[str, dict[str, list]] = {}
    for r in rows:
        by_metric.setdefault(r["metric"], {}).setdefault(r["method"], []).append(
            (float(r["epsilon_sq"]), float(r["value"])))
    paths = {}
    for metric, series in sorted(by_metric.items()):
        fig, ax = plt.subplots(figsize=(6, 4))
        positives = [x for pts in series.values() for x, _ in pts if x > 0]
        linthresh = min(positives) / 2 if positives else 1e-3
        for method, pts in sorted(series.items()):
            pts = sorted(pts)
            ax.plot([x for x, _ in pts], [y for _, y in pts],
                    marker="o", label=method)
        ax.set_xscale("symlog", linthresh=linthresh)
        ax.set_xlabel("noise variance ε² (log scale)")
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} vs noise variance")
        ax.legend(fontsize=8)
        ax.grid(True, alpha=0.3)
        path = out_dir / f"chart-{metric}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths[metric] = path
    return paths
