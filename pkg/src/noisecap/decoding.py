"""Autoregressive caption generation: batched greedy and beam search.

Beam hypotheses are pruned by cumulative log-probability and the final
hypothesis is selected by length-normalized score (logprob / len^alpha).
Ties break deterministically toward the lower beam index and lower token
id, which makes beam width 1 reproduce greedy token for token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import DecoderModel
from .world import BOS_ID, EOS_ID, PAD_ID, Caption, Grammar, Scene


@dataclass(frozen=True)
class DecodeConfig:
    strategy: str = "beam"  # "greedy" | "beam"
    beam_width: int = 5
    max_length: int = 26  # total tokens including bos and eos
    length_norm: float = 0.7

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam"):
            raise ValueError(f"unknown decode strategy {self.strategy!r}")
        if self.beam_width < 1:
            raise ValueError("beam width must be >= 1")
        if self.max_length < 2:
            raise ValueError("max_length must fit at least bos+eos")


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    s = x - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _strip(seq) -> list[int]:
    out = []
    for t in seq:
        if t == PAD_ID:
            continue
        out.append(int(t))
        if t == EOS_ID:
            break
    return out


def generate(model: DecoderModel, embeddings: np.ndarray, cfg: DecodeConfig):
    """Decode token sequences for a batch of conditioning embeddings."""
    embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float32))
    if embeddings.shape[1] != model.config.embed_dim:
        raise ValueError(
            f"embedding dimension {embeddings.shape[1]} does not match model "
            f"input dimension {model.config.embed_dim}")
    if cfg.max_length > model.config.max_seq_len:
        raise ValueError(
            f"max_length {cfg.max_length} exceeds model max_seq_len "
            f"{model.config.max_seq_len}")
    if cfg.strategy == "greedy":
        return _greedy(model, embeddings, cfg)
    return _beam(model, embeddings, cfg)


def _greedy(model, embeddings, cfg):
    n = embeddings.shape[0]
    tokens = np.full((n, 1), BOS_ID, dtype=np.int64)
    finished = np.zeros(n, dtype=bool)
    while tokens.shape[1] < cfg.max_length and not finished.all():
        logits = model.next_logits(embeddings, tokens)
        logits[:, PAD_ID] = -np.inf
        logits[:, BOS_ID] = -np.inf
        nxt = logits.argmax(axis=1)
        nxt[finished] = PAD_ID
        tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
        finished |= nxt == EOS_ID
    return [_strip(row) for row in tokens]


def _beam(model, embeddings, cfg):
    n, w = embeddings.shape[0], cfg.beam_width
    v = model.config.vocab_size
    flat_embs = np.repeat(embeddings, w, axis=0)
    tokens = np.full((n, w, 1), BOS_ID, dtype=np.int64)
    scores = np.full((n, w), -np.inf, dtype=np.float64)
    scores[:, 0] = 0.0  # a single live beam at the start
    finished = np.zeros((n, w), dtype=bool)

    while tokens.shape[2] < cfg.max_length and not finished.all():
        t = tokens.shape[2]
        logits = model.next_logits(flat_embs, tokens.reshape(n * w, t))
        logp = _log_softmax(logits.astype(np.float64)).reshape(n, w, v)
        logp[:, :, PAD_ID] = -np.inf
        logp[:, :, BOS_ID] = -np.inf
        cand = scores[:, :, None] + logp
        # a finished beam continues only as itself, via a pad no-op
        fin_rows = np.where(finished)
        cand[fin_rows[0], fin_rows[1], :] = -np.inf
        cand[fin_rows[0], fin_rows[1], PAD_ID] = scores[fin_rows]
        flat = cand.reshape(n, w * v)
        order = np.argsort(-flat, axis=1, kind="stable")[:, :w]
        beam_idx = order // v
        tok_idx = order % v
        scores = np.take_along_axis(flat, order, axis=1)
        new_tokens = np.empty((n, w, t + 1), dtype=np.int64)
        for i in range(n):
            new_tokens[i, :, :t] = tokens[i, beam_idx[i]]
            new_tokens[i, :, t] = tok_idx[i]
        tokens = new_tokens
        finished = np.take_along_axis(finished, beam_idx, axis=1) | (tok_idx == EOS_ID)

    # length-normalized final selection, finished hypotheses first
    out = []
    for i in range(n):
        best_key = None
        best_seq = None
        for b in range(w):
            seq = _strip(tokens[i, b])
            gen_len = max(len(seq) - 1, 1)  # generated tokens, bos excluded
            norm = scores[i, b] / (gen_len ** cfg.length_norm)
            key = (bool(finished[i, b]), norm, -b)
            if best_key is None or key > best_key:
                best_key = key
                best_seq = seq
        out.append(best_seq)
    return out


def caption_image(scene_or_embedding, model: DecoderModel, cfg: DecodeConfig,
                  grammar: Grammar, image_encoder=None,
                  offset: np.ndarray | None = None) -> Caption:
    """Decode one caption from a scene (via the image encoder) or a raw
    embedding, optionally shifted by a modality offset before decoding."""
    if isinstance(scene_or_embedding, Scene):
        if image_encoder is None:
            raise ValueError("captioning a Scene requires an image encoder")
        emb = image_encoder.encode(scene_or_embedding)
        scene_id = scene_or_embedding.scene_id
    else:
        emb = np.asarray(scene_or_embedding, dtype=np.float32)
        scene_id = -1
    if offset is not None:
        emb = emb + np.asarray(offset, dtype=np.float32)
    seq = generate(model, emb[None, :], cfg)[0]
    text = grammar.vocab.detokenize(seq)
    return Caption(text=text, tokens=tuple(seq), scene_id=scene_id)


def caption_batch(embeddings, model, cfg, grammar, scene_ids=None,
                  offset: np.ndarray | None = None) -> list[Caption]:
    embeddings = np.asarray(embeddings, dtype=np.float32)
    if offset is not None:
        embeddings = embeddings + np.asarray(offset, dtype=np.float32)[None, :]
    seqs = generate(model, embeddings, cfg)
    ids = scene_ids if scene_ids is not None else [-1] * len(seqs)
    return [Caption(text=grammar.vocab.detokenize(s), tokens=tuple(s), scene_id=i)
            for s, i in zip(seqs, ids)]
