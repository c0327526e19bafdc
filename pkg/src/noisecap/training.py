"""Noise-calibrated text-only training.

The noise scale is estimated from groups of captions that describe the
same scene: embed each group, take every unordered pairwise difference,
and average the max-coordinate magnitudes of those differences. Training
reconstructs each caption from its (noised) frozen text embedding with
teacher forcing; the supervised baseline runs the identical loop but
conditions on the paired image embedding instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .encoders import ImageEncoder, TextEncoder
from .model import DecoderModel
from .optim import AdamW
from .seeding import rng_for
from .world import PAD_ID, Corpus, Scene


@dataclass(frozen=True)
class NoiseConfig:
    epsilon: float
    source: str = "fixed"  # "fixed" | "estimated"
    rng_stream: int = 0

    def __post_init__(self):
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")
        if self.source not in ("fixed", "estimated"):
            raise ValueError(f"unknown noise source {self.source!r}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 600
    batch_size: int = 16
    lr: float = 3e-4
    warmup_steps: int = 60
    weight_decay: float = 0.01
    seed: int = 0
    val_every: int = 100
    early_stop_patience: int = 0  # validation rounds; 0 disables

    def __post_init__(self):
        for name in ("steps", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass
class TrainResult:
    model: DecoderModel
    log: list[dict] = field(default_factory=list)
    diverged: bool = False
    final_loss: float = float("nan")
    best_val_loss: float = float("nan")
    epsilon: float = 0.0
    wall_seconds: float = 0.0

    def losses(self) -> np.ndarray:
        return np.array([row["loss"] for row in self.log])


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; the model retains the last good parameters."""

    def __init__(self, step, result: TrainResult):
        super().__init__(f"training diverged at step {step}; last good state retained")
        self.step = step
        self.result = result


# -- epsilon ----------------------------------------------------------------------


def estimate_epsilon(caption_groups, encoder: TextEncoder) -> float:
    """Mean max-coordinate norm of pairwise embedding differences within groups."""
    norms = []
    for gi, group in enumerate(caption_groups):
        group = list(group)
        if len(group) < 2:
            raise ValueError(f"caption group {gi} has {len(group)} captions, needs >= 2")
        sids = {c.scene_id for c in group if hasattr(c, "scene_id")}
        if len(sids) > 1:
            raise ValueError(f"caption group {gi} mixes scenes {sorted(sids)}")
        embs = encoder.encode_all(group)
        for i in range(len(embs)):
            diffs = embs[i + 1:] - embs[i]
            if len(diffs):
                norms.extend(np.abs(diffs).max(axis=1).tolist())
    return float(np.mean(norms))


def estimation_groups(corpus: Corpus, n_groups: int = 15, split: str = "train"):
    """First n_groups scenes of a split, mirroring the few-image estimate."""
    groups = corpus.by_scene()
    ids = corpus.scene_ids(split)[:n_groups]
    if len(ids) < n_groups:
        raise ValueError(f"split {split!r} has only {len(ids)} scenes, need {n_groups}")
    return [groups[i] for i in ids]


def inject_noise(embedding: np.ndarray, noise: NoiseConfig, rng: np.random.Generator):
    """Add i.i.d. zero-mean Gaussian noise of std epsilon; no renormalization.

    A fresh sample is drawn per call; epsilon == 0 returns the input
    unchanged (and consumes no randomness), so the zero-noise path is the
    noise-free baseline exactly.
    """
    if noise.epsilon == 0.0:
        return embedding
    sample = rng.standard_normal(embedding.shape, dtype=np.float32)
    return embedding + noise.epsilon * sample


# -- training loops ----------------------------------------------------------------


def _pad_batch(token_seqs) -> np.ndarray:
    width = max(len(t) for t in token_seqs)
    out = np.full((len(token_seqs), width), PAD_ID, dtype=np.int64)
    for i, t in enumerate(token_seqs):
        out[i, : len(t)] = t
    return out


def dataset_loss(model: DecoderModel, cond_embs: np.ndarray, token_seqs,
                 noise: NoiseConfig | None, rng: np.random.Generator | None,
                 batch_size: int = 64) -> float:
    """Mean teacher-forced loss over a dataset, optionally under fresh noise."""
    total, count = 0.0, 0
    for lo in range(0, len(token_seqs), batch_size):
        batch = token_seqs[lo: lo + batch_size]
        embs = cond_embs[lo: lo + len(batch)]
        if noise is not None and noise.epsilon > 0:
            embs = inject_noise(embs, noise, rng)
        tokens = _pad_batch(batch)
        loss = T.cross_entropy(model.forward(embs, tokens), tokens, pad_id=PAD_ID)
        n = int((tokens != PAD_ID).sum())
        total += loss.item() * n
        count += n
    return total / count


def _run_loop(model, train_embs, train_tokens, val_embs, val_tokens,
              noise: NoiseConfig, cfg: TrainConfig) -> TrainResult:
    data_rng = rng_for(cfg.seed, "data-order")
    noise_rng = rng_for(cfg.seed, "noise", noise.rng_stream)
    val_rng_seed = (cfg.seed, "val-noise", noise.rng_stream)
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay,
                warmup_steps=cfg.warmup_steps)
    result = TrainResult(model=model, epsilon=noise.epsilon)
    n = len(train_tokens)
    order = data_rng.permutation(n)
    cursor = 0
    best_val = float("inf")
    best_state = None
    last_good = model.clone_state()
    rounds_since_best = 0
    t_start = time.perf_counter()

    for step in range(1, cfg.steps + 1):
        if cursor + cfg.batch_size > n:
            order = data_rng.permutation(n)
            cursor = 0
        idx = order[cursor: cursor + cfg.batch_size]
        cursor += cfg.batch_size
        embs = inject_noise(train_embs[idx], noise, noise_rng)
        tokens = _pad_batch([train_tokens[i] for i in idx])
        t0 = time.perf_counter()
        with T.ComputationTape() as tape:
            loss = T.cross_entropy(model.forward(embs, tokens), tokens, pad_id=PAD_ID)
            loss_val = loss.item()
            if np.isfinite(loss_val):
                tape.backward(loss)
        row = {"step": step, "loss": loss_val, "val_loss": "",
               "lr": opt.effective_lr(step),
               "wall_ms": round((time.perf_counter() - t0) * 1e3, 3)}
        if not np.isfinite(loss_val):
            model.load_state_arrays(best_state if best_state is not None else last_good)
            result.log.append(row)
            result.diverged = True
            result.final_loss = loss_val
            result.wall_seconds = time.perf_counter() - t_start
            raise TrainingDivergedError(step, result)
        opt.step()
        opt.zero_grad()
        model.train_step += 1

        if val_embs is not None and (step % cfg.val_every == 0 or step == cfg.steps):
            # fresh validation noise at the training epsilon, dedicated stream
            vrng = rng_for(*val_rng_seed, step)
            vloss = dataset_loss(model, val_embs, val_tokens, noise, vrng)
            row["val_loss"] = vloss
            last_good = model.clone_state()
            if vloss < best_val:
                best_val = vloss
                best_state = model.clone_state()
                rounds_since_best = 0
            else:
                rounds_since_best += 1
            if cfg.early_stop_patience and rounds_since_best > cfg.early_stop_patience:
                result.log.append(row)
                break
        result.log.append(row)

    if cfg.early_stop_patience and best_state is not None:
        model.load_state_arrays(best_state)
    result.final_loss = result.log[-1]["loss"]
    result.best_val_loss = best_val if best_val != float("inf") else float("nan")
    result.wall_seconds = time.perf_counter() - t_start
    model.epsilon_used = noise.epsilon
    return result


def train_text_only(corpus: Corpus, encoder: TextEncoder, model: DecoderModel,
                    noise: NoiseConfig, cfg: TrainConfig) -> TrainResult:
    """Reconstruct each caption from its noised frozen text embedding."""
    train = corpus.split("train")
    if not train:
        raise ValueError("corpus has no training captions")
    train_embs = encoder.encode_all(train)
    train_tokens = [c.tokens for c in train]
    val = corpus.split("val")
    val_embs = encoder.encode_all(val) if val else None
    val_tokens = [c.tokens for c in val] if val else None
    return _run_loop(model, train_embs, train_tokens, val_embs, val_tokens, noise, cfg)


def supervised_paired_train(scenes: list[Scene], corpus: Corpus,
                            image_encoder: ImageEncoder, model: DecoderModel,
                            noise: NoiseConfig, cfg: TrainConfig) -> TrainResult:
    """Identical loop, but condition on the paired image embedding of each
    caption's scene, with noise applied to the image embeddings."""
    by_id = {s.scene_id: s for s in scenes}
    train = corpus.split("train")
    if not train:
        raise ValueError("corpus has no training captions")
    train_embs = np.stack([image_encoder.encode(by_id[c.scene_id]) for c in train])
    train_tokens = [c.tokens for c in train]
    val = corpus.split("val")
    val_embs = (np.stack([image_encoder.encode(by_id[c.scene_id]) for c in val])
                if val else None)
    val_tokens = [c.tokens for c in val] if val else None
    return _run_loop(model, train_embs, train_tokens, val_embs, val_tokens, noise, cfg)
