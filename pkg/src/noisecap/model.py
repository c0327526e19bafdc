"""Trainable captioner: mapping network (embedding -> K prefix vectors)
plus a small causal transformer decoder, with checkpoint persistence.

Token convention: a caption's token sequence is [bos, w1..wn, eos]
(optionally padded). forward() returns logits aligned to teacher
positions — logits[i] is the model's distribution for teacher token i,
computed from the prefix and tokens strictly before i. Training
therefore supervises every real token including eos; position 0 (bos,
predicted from the prefix alone) is trivially learnable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .seeding import rng_for
from .world import BOS_ID, PAD_ID

CHECKPOINT_MAGIC = b"NCCK"
CHECKPOINT_VERSION = 1

NEG_INF = -1e9


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    prefix_len: int = 8
    vocab_size: int = 103
    max_seq_len: int = 26
    mapper: str = "mlp"  # "mlp" | "transformer"
    mapper_hidden: int = 128
    mapper_layers: int = 2
    mapper_activation: str = "gelu"  # relu allowed in the mapping network
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must divide evenly into heads")
        if self.mapper not in ("mlp", "transformer"):
            raise ValueError(f"unknown mapper {self.mapper!r}")


def _act(cfg: ModelConfig):
    return T.relu if cfg.mapper_activation == "relu" else T.gelu


class DecoderModel:
    """Prefix-conditioned causal decoder with all parameters trainable."""

    def __init__(self, config: ModelConfig, vocab_hash: str, seed: int = 0):
        self.config = config
        self.vocab_hash = vocab_hash
        self.train_step = 0
        self.epsilon_used: float | None = None
        self.params: dict[str, T.Tensor] = {}
        rng = rng_for(seed, "model-init")
        c = config

        def w(name, *shape):
            self.params[name] = T.Tensor(
                rng.standard_normal(shape) * c.init_std, requires_grad=True)

        def zeros(name, *shape):
            self.params[name] = T.Tensor(np.zeros(shape), requires_grad=True)

        def ones(name, *shape):
            self.params[name] = T.Tensor(np.ones(shape), requires_grad=True)

        if c.mapper == "mlp":
            w("map.w1", c.embed_dim, c.mapper_hidden)
            zeros("map.b1", c.mapper_hidden)
            w("map.w2", c.mapper_hidden, c.prefix_len * c.d_model)
            zeros("map.b2", c.prefix_len * c.d_model)
        else:
            w("map.proj", c.embed_dim, c.prefix_len * c.d_model)
            zeros("map.proj_b", c.prefix_len * c.d_model)
            w("map.constants", c.prefix_len, c.d_model)
            w("map.pos", 2 * c.prefix_len, c.d_model)
            for i in range(c.mapper_layers):
                self._block_params(f"map.block{i}", w, zeros, ones)

        w("tok_emb", c.vocab_size, c.d_model)
        w("pos_emb", c.prefix_len + c.max_seq_len, c.d_model)
        for i in range(c.n_blocks):
            self._block_params(f"block{i}", w, zeros, ones)
        ones("ln_f.g", c.d_model)
        zeros("ln_f.b", c.d_model)
        w("head", c.d_model, c.vocab_size)

        # strictly causal template mask over the longest possible sequence
        full = c.prefix_len + c.max_seq_len
        self._mask = np.triu(np.full((full, full), NEG_INF, dtype=np.float32), k=1)

    def _block_params(self, prefix, w, zeros, ones):
        c = self.config
        ones(f"{prefix}.ln1.g", c.d_model)
        zeros(f"{prefix}.ln1.b", c.d_model)
        for nm in ("wq", "wk", "wv", "wo"):
            w(f"{prefix}.{nm}", c.d_model, c.d_model)
            zeros(f"{prefix}.{nm}_b", c.d_model)
        ones(f"{prefix}.ln2.g", c.d_model)
        zeros(f"{prefix}.ln2.b", c.d_model)
        w(f"{prefix}.mlp.w1", c.d_model, 4 * c.d_model)
        zeros(f"{prefix}.mlp.b1", 4 * c.d_model)
        w(f"{prefix}.mlp.w2", 4 * c.d_model, c.d_model)
        zeros(f"{prefix}.mlp.b2", c.d_model)

    # -- forward pieces ------------------------------------------------------------

    def _attention(self, x, prefix, mask):
        c = self.config
        p = self.params
        b, t, dm = x.shape
        dk = dm // c.n_heads

        def heads(name):
            h = T.add(T.matmul(x, p[f"{prefix}.{name}"]), p[f"{prefix}.{name}_b"])
            return T.transpose(T.reshape(h, (b, t, c.n_heads, dk)), (0, 2, 1, 3))

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dk))
        if mask is not None:
            scores = T.add(scores, T.Tensor(mask[:t, :t]))
        mixed = T.matmul(T.softmax(scores), v)
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (b, t, dm))
        return T.add(T.matmul(merged, p[f"{prefix}.wo"]), p[f"{prefix}.wo_b"])

    def _block(self, x, prefix, mask):
        p = self.params
        h = T.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"])
        x = T.add(x, self._attention(h, prefix, mask))
        h = T.layer_norm(x, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"])
        ff = T.matmul(T.gelu(T.add(T.matmul(h, p[f"{prefix}.mlp.w1"]),
                                   p[f"{prefix}.mlp.b1"])), p[f"{prefix}.mlp.w2"])
        return T.add(x, T.add(ff, p[f"{prefix}.mlp.b2"]))

    def mapping_network(self, emb):
        """[B, embed_dim] -> [B, K, d_model] prefix, for any input."""
        c = self.config
        p = self.params
        emb = emb if isinstance(emb, T.Tensor) else T.Tensor(np.atleast_2d(emb))
        b = emb.shape[0]
        act = _act(c)
        if c.mapper == "mlp":
            h = act(T.add(T.matmul(emb, p["map.w1"]), p["map.b1"]))
            out = T.add(T.matmul(h, p["map.w2"]), p["map.b2"])
            return T.reshape(out, (b, c.prefix_len, c.d_model))
        proj = T.add(T.matmul(emb, p["map.proj"]), p["map.proj_b"])
        proj = T.reshape(proj, (b, c.prefix_len, c.d_model))
        consts = T.add(T.reshape(p["map.constants"], (1, c.prefix_len, c.d_model)),
                       T.Tensor(np.zeros((b, 1, 1), dtype=np.float32)))
        x = T.concat([proj, consts], axis=1)
        x = T.add(x, T.reshape(p["map.pos"], (1, 2 * c.prefix_len, c.d_model)))
        for i in range(c.mapper_layers):
            x = self._block(x, f"map.block{i}", mask=None)
        return x[:, c.prefix_len:, :]

    def _hidden(self, embeddings, tokens):
        """Hidden states [B, K+S, d_model] after the final layer norm."""
        c = self.config
        p = self.params
        tokens = np.atleast_2d(np.asarray(tokens))
        if tokens.max(initial=0) >= c.vocab_size or tokens.min(initial=0) < 0:
            raise T.ShapeError(
                f"token id out of range for vocabulary of {c.vocab_size}")
        s = tokens.shape[1]
        if s > c.max_seq_len:
            raise T.ShapeError(f"sequence length {s} exceeds max {c.max_seq_len}")
        prefix = self.mapping_network(embeddings)
        tok = T.embedding_gather(p["tok_emb"], tokens)
        x = T.concat([prefix, tok], axis=1)
        x = T.add(x, T.reshape(p["pos_emb"][: c.prefix_len + s, :],
                               (1, c.prefix_len + s, c.d_model)))
        for i in range(c.n_blocks):
            x = self._block(x, f"block{i}", self._mask)
        return T.layer_norm(x, p["ln_f.g"], p["ln_f.b"])

    def forward(self, embeddings, teacher_tokens) -> T.Tensor:
        """Teacher-forced logits [B, S, V]; logits[:, i] is the prediction of
        teacher token i and depends only on the prefix and tokens < i."""
        tokens = np.atleast_2d(np.asarray(teacher_tokens))
        if (tokens[:, 0] != BOS_ID).any():
            raise T.ShapeError("teacher tokens must begin with bos")
        k = self.config.prefix_len
        s = tokens.shape[1]
        h = self._hidden(embeddings, tokens)
        shifted = h[:, k - 1: k + s - 1, :]
        return T.matmul(shifted, self.params["head"])

    def next_logits(self, embeddings, tokens) -> np.ndarray:
        """Distribution over the token following `tokens` (no grad recording)."""
        h = self._hidden(embeddings, tokens)
        return (h[:, -1, :] @ self.params["head"]).data

    # -- bookkeeping -----------------------------------------------------------------

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def param_count_formula(self) -> dict:
        """Closed-form parameter count, kept in manifests for regression checks."""
        c = self.config
        dm, v, k = c.d_model, c.vocab_size, c.prefix_len
        block = 12 * dm * dm + 13 * dm
        if c.mapper == "mlp":
            mapper = (c.embed_dim * c.mapper_hidden + c.mapper_hidden
                      + c.mapper_hidden * k * dm + k * dm)
            mapper_formula = "d*H + H + H*K*dm + K*dm"
        else:
            mapper = (c.embed_dim * k * dm + k * dm + k * dm + 2 * k * dm
                      + c.mapper_layers * block)
            mapper_formula = "d*K*dm + 3*K*dm + 2*K*dm + L*(12*dm^2+13*dm)"
        total = (mapper + v * dm + (k + c.max_seq_len) * dm
                 + c.n_blocks * block + 2 * dm + dm * v)
        return {
            "formula": f"mapper[{mapper_formula}] + V*dm + (K+S)*dm "
                       f"+ N*(12*dm^2+13*dm) + 2*dm + dm*V",
            "value": total,
        }

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        for k, p in self.params.items():
            p.data = np.ascontiguousarray(arrays[k], dtype=p.data.dtype).copy()

    def clone_state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}


# -- checkpoints: versioned header + config JSON + raw little-endian payload -------


def save_checkpoint(model: DecoderModel, path):
    names = sorted(model.params)
    header = {
        "config": asdict(model.config),
        "vocab_hash": model.vocab_hash,
        "train_step": model.train_step,
        "epsilon_used": model.epsilon_used,
        "params": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
        "param_count": model.param_count(),
        "param_count_formula": model.param_count_formula()["formula"],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(model.params[n].data, dtype="<f4").tobytes())


def load_checkpoint(path, expected_vocab_hash: str | None = None) -> DecoderModel:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {blob[:4]!r}")
    version, jlen = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[12: 12 + jlen].decode("utf-8"))
    if expected_vocab_hash is not None and header["vocab_hash"] != expected_vocab_hash:
        raise CheckpointError(
            f"vocabulary hash mismatch: checkpoint {header['vocab_hash']} vs "
            f"current {expected_vocab_hash}")
    model = DecoderModel(ModelConfig(**header["config"]), header["vocab_hash"])
    model.train_step = header["train_step"]
    model.epsilon_used = header["epsilon_used"]
    offset = 12 + jlen
    for spec in header["params"]:
        n = int(np.prod(spec["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset)
        model.params[spec["name"]].data = arr.reshape(spec["shape"]).copy()
        offset += n * 4
    if offset != len(blob):
        raise CheckpointError("checkpoint payload size mismatch")
    return model
