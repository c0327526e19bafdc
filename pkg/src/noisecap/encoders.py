"""Frozen embedding functions and the binary embedding interchange format.

The text encoder is a fixed seeded random projection of a caption's
bag-of-lexemes (synonyms collapse to one lexeme) plus a small positional
salt, L2-normalized. The image encoder embeds a scene as the normalized
centroid of its canonical caption embeddings, displaced by a configurable
modality gap: partial rotation toward a fixed direction, a fixed offset
vector, and per-scene Gaussian jitter.

Neither encoder has trainable parameters; outputs are bit-identical
across calls for fixed construction inputs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .seeding import rng_for
from .world import BOS_ID, EOS_ID, PAD_ID, Caption, Grammar, Scene

MAX_SALT_POSITIONS = 64
FUNCTION_WORD_WEIGHT = 0.5


@dataclass(frozen=True)
class EncoderConfig:
    dim: int = 64
    seed: int = 0
    salt_scale: float = 0.15
    canonical_captions: int = 5


class TextEncoder:
    """Deterministic caption -> unit vector in R^dim."""

    def __init__(self, grammar: Grammar, config: EncoderConfig = EncoderConfig()):
        self.grammar = grammar
        self.config = config
        d = config.dim
        lex = grammar.lexeme_table()
        n_lex = grammar.n_lexemes()
        self._word_lexeme = np.full(len(grammar.vocab), -1, dtype=np.int64)
        self._word_weight = np.zeros(len(grammar.vocab), dtype=np.float32)
        attr_words = set()
        for table_word, lexeme_id in lex.items():
            wid = grammar.vocab.word_to_id[table_word]
            self._word_lexeme[wid] = lexeme_id
        for word in grammar.vocab.id_to_word:
            if word in ("<pad>", "<bos>", "<eos>"):
                continue
            wid = grammar.vocab.word_to_id[word]
            is_attr = grammar._attr.get(word) is not None
            if is_attr:
                attr_words.add(word)
            self._word_weight[wid] = 1.0 if is_attr else FUNCTION_WORD_WEIGHT
        scale = 1.0 / np.sqrt(d)
        self._lexeme_proj = (rng_for(config.seed, "lexeme-proj")
                             .standard_normal((n_lex, d)) * scale).astype(np.float32)
        self._salt_proj = (rng_for(config.seed, "salt-proj")
                           .standard_normal((len(grammar.vocab), d)) * scale).astype(np.float32)
        self._pos_weight = rng_for(config.seed, "salt-pos").uniform(
            0.5, 1.5, size=MAX_SALT_POSITIONS).astype(np.float32)
        self._cache: dict[tuple[int, ...], np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self.config.dim

    def encode_tokens(self, tokens) -> np.ndarray:
        key = tuple(tokens)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        content = [t for t in key if t not in (PAD_ID, BOS_ID, EOS_ID)]
        vec = np.zeros(self.config.dim, dtype=np.float32)
        for pos, wid in enumerate(content):
            lexeme = self._word_lexeme[wid]
            vec += self._word_weight[wid] * self._lexeme_proj[lexeme]
            vec += (self.config.salt_scale
                    * self._pos_weight[pos % MAX_SALT_POSITIONS]
                    * self._salt_proj[wid])
        norm = float(np.linalg.norm(vec))
        if norm > 0:
            vec = vec / norm
        vec.flags.writeable = False
        self._cache[key] = vec
        return vec

    def encode(self, caption) -> np.ndarray:
        if isinstance(caption, Caption):
            return self.encode_tokens(caption.tokens)
        if isinstance(caption, str):
            return self.encode_tokens(self.grammar.vocab.tokenize(caption))
        return self.encode_tokens(caption)

    def encode_all(self, captions) -> np.ndarray:
        return np.stack([self.encode(c) for c in captions])


@dataclass(frozen=True)
class GapConfig:
    """Three-knob modality gap: rotation, fixed offset, per-scene jitter."""

    offset_vector: np.ndarray
    rotation_strength: float = 0.0
    per_sample_jitter_std: float = 0.0
    renormalize: bool = True

    @classmethod
    def create(cls, dim: int, seed: int, offset_linf: float = 0.0,
               rotation_strength: float = 0.0, per_sample_jitter_std: float = 0.0,
               renormalize: bool = True) -> "GapConfig":
        """Draw the offset from a seeded Gaussian and scale it to the target
        max-coordinate magnitude."""
        g = rng_for(seed, "gap-offset").standard_normal(dim).astype(np.float32)
        linf = float(np.abs(g).max())
        if offset_linf == 0.0:
            g = np.zeros(dim, dtype=np.float32)
        else:
            g = g * (offset_linf / linf)
        g.flags.writeable = False
        return cls(offset_vector=g, rotation_strength=rotation_strength,
                   per_sample_jitter_std=per_sample_jitter_std,
                   renormalize=renormalize)

    @classmethod
    def zero(cls, dim: int) -> "GapConfig":
        return cls.create(dim, seed=0)

    def magnitudes(self) -> dict:
        g = np.asarray(self.offset_vector)
        return {"offset_linf": float(np.abs(g).max()) if g.size else 0.0,
                "offset_l2": float(np.linalg.norm(g)) if g.size else 0.0,
                "rotation_strength": float(self.rotation_strength),
                "per_sample_jitter_std": float(self.per_sample_jitter_std)}


def _slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation between unit vectors a and b."""
    if t == 0.0:
        return a
    cos = float(np.clip(np.dot(a, b), -1.0, 1.0))
    omega = np.arccos(cos)
    if omega < 1e-7:
        return a
    s = np.sin(omega)
    return (np.sin((1.0 - t) * omega) / s) * a + (np.sin(t * omega) / s) * b


class ImageEncoder:
    """Scene -> unit vector, displaced from the scene's caption centroid
    by the configured gap. Deterministic per scene content."""

    def __init__(self, text_encoder: TextEncoder, gap: GapConfig):
        self.text = text_encoder
        self.gap = gap
        cfg = text_encoder.config
        u = rng_for(cfg.seed, "gap-direction").standard_normal(cfg.dim)
        self._gap_direction = (u / np.linalg.norm(u)).astype(np.float32)
        self._cache: dict[tuple, np.ndarray] = {}

    def canonical_captions(self, scene: Scene):
        """The fixed caption set that defines the scene's visual content;
        deterministic per scene content, independent of any corpus."""
        cfg = self.text.config
        rng = rng_for(cfg.seed, "canonical-captions", scene.content_key())
        return self.text.grammar.paraphrases(scene, cfg.canonical_captions, rng)

    def caption_centroid(self, scene: Scene) -> np.ndarray:
        """Normalized mean embedding of the scene's canonical captions."""
        centroid = self.text.encode_all(self.canonical_captions(scene)).mean(axis=0)
        return (centroid / np.linalg.norm(centroid)).astype(np.float32)

    def _gap_is_identity(self) -> bool:
        return (self.gap.rotation_strength == 0.0
                and self.gap.per_sample_jitter_std == 0.0
                and not np.any(self.gap.offset_vector))

    def encode(self, scene: Scene) -> np.ndarray:
        key = scene.content_key()
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        cfg = self.text.config
        v = self.caption_centroid(scene)
        if self._gap_is_identity():
            v.flags.writeable = False
            self._cache[key] = v
            return v
        v = _slerp(v, self._gap_direction, self.gap.rotation_strength)
        v = v + np.asarray(self.gap.offset_vector, dtype=np.float32)
        if self.gap.per_sample_jitter_std > 0:
            jit = rng_for(cfg.seed, "gap-jitter", key).standard_normal(cfg.dim)
            v = v + self.gap.per_sample_jitter_std * jit.astype(np.float32)
        if self.gap.renormalize:
            v = v / np.linalg.norm(v)
        v = v.astype(np.float32)
        v.flags.writeable = False
        self._cache[key] = v
        return v

    def encode_all(self, scenes) -> np.ndarray:
        return np.stack([self.encode(s) for s in scenes])


class StoreBackedTextEncoder:
    """Frozen text encoder view over an EmbeddingStore: captions are looked
    up by id (via key_fn) instead of being encoded locally. This is the
    ingestion path for embeddings exported from real encoders."""

    def __init__(self, store: "EmbeddingStore", key_fn=None):
        self.store = store
        self.key_fn = key_fn or (lambda caption: caption.text)

    @property
    def dim(self) -> int:
        return self.store.dim

    def encode(self, caption) -> np.ndarray:
        return self.store.get(self.key_fn(caption))

    def encode_all(self, captions) -> np.ndarray:
        return np.stack([self.encode(c) for c in captions])


# -- GDE1 binary embedding format -------------------------------------------------

GDE1_MAGIC = b"GDE1"


class Gde1Error(ValueError):
    """Base class for embedding-file format violations."""


class Gde1MagicError(Gde1Error):
    pass


class Gde1DimensionError(Gde1Error):
    pass


class Gde1TruncatedError(Gde1Error):
    pass


@dataclass
class EmbeddingStore:
    """id -> vector map backed by one GDE1 file; vectors are read-only."""

    ids: list[str]
    vectors: np.ndarray
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if len(self.ids) != len(self.vectors):
            raise Gde1Error(
                f"{len(self.ids)} ids but {len(self.vectors)} vectors")
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        self.vectors.flags.writeable = False
        self._index = {i: k for k, i in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self):
        return len(self.ids)

    def __contains__(self, key):
        return key in self._index

    def get(self, key: str) -> np.ndarray:
        return self.vectors[self._index[key]]


def save_embedding_store(store: EmbeddingStore, path):
    with open(path, "wb") as f:
        f.write(GDE1_MAGIC)
        f.write(struct.pack("<I", store.dim))
        f.write(struct.pack("<Q", len(store)))
        f.write(np.ascontiguousarray(store.vectors, dtype="<f4").tobytes())
        for sid in store.ids:
            raw = sid.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)


def load_embedding_store(path, expect_dim: int | None = None) -> EmbeddingStore:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != GDE1_MAGIC:
        raise Gde1MagicError(f"bad magic {blob[:4]!r}, expected {GDE1_MAGIC!r}")
    if len(blob) < 16:
        raise Gde1TruncatedError("header truncated")
    d = struct.unpack_from("<I", blob, 4)[0]
    count = struct.unpack_from("<Q", blob, 8)[0]
    if expect_dim is not None and d != expect_dim:
        raise Gde1DimensionError(f"file dimension {d} != expected {expect_dim}")
    payload_bytes = count * d * 4
    offset = 16
    if len(blob) < offset + payload_bytes:
        raise Gde1TruncatedError(
            f"payload holds {(len(blob) - offset) // (d * 4)} rows, header says {count}")
    vectors = np.frombuffer(blob, dtype="<f4", count=count * d, offset=offset)
    vectors = vectors.reshape(count, d).copy()
    offset += payload_bytes
    ids = []
    for _ in range(count):
        if len(blob) < offset + 4:
            raise Gde1TruncatedError("id index truncated")
        n = struct.unpack_from("<I", blob, offset)[0]
        offset += 4
        if len(blob) < offset + n:
            raise Gde1TruncatedError("id string truncated")
        ids.append(blob[offset: offset + n].decode("utf-8"))
        offset += n
    return EmbeddingStore(ids=ids, vectors=vectors)
