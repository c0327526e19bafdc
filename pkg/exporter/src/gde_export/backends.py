"""Embedding backends.

`sentence-transformers:<model>` loads a published frozen vision-language
checkpoint (e.g. clip-ViT-B-32) and is the intended production path.
`hashed-projection-<dim>` is a dependency-free deterministic text/image
featurizer kept for offline pipelines and hermetic tests; it preserves
bag-of-words similarity structure but has no cross-modal alignment.
"""

from __future__ import annotations

import hashlib

import numpy as np

_N_HASH_BUCKETS = 4096


class BackendError(RuntimeError):
    pass


def _l2_normalize(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return (mat / norms).astype(np.float32)


class HashedProjectionBackend:
    """Seeded random projection of hashed word/bigram counts (text) or
    coarse pixel statistics (images). Fully deterministic, no downloads."""

    def __init__(self, dim: int = 512, seed: int = 0):
        self.dim = dim
        rng = np.random.default_rng(seed)
        self._proj = (rng.standard_normal((_N_HASH_BUCKETS, dim))
                      / np.sqrt(dim)).astype(np.float32)

    @staticmethod
    def _bucket(token: str) -> int:
        digest = hashlib.sha256(token.encode("utf-8")).digest()
        return int.from_bytes(digest[:4], "little") % _N_HASH_BUCKETS

    def encode_texts(self, texts) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float32)
        for i, text in enumerate(texts):
            words = text.lower().split()
            feats = np.zeros(_N_HASH_BUCKETS, dtype=np.float32)
            for w in words:
                feats[self._bucket("w:" + w)] += 1.0
            for a, b in zip(words, words[1:]):
                feats[self._bucket(f"b:{a} {b}")] += 0.5
            out[i] = feats @ self._proj
        return _l2_normalize(out)

    def encode_images(self, paths) -> np.ndarray:
        try:
            from PIL import Image
        except ImportError as exc:
            raise BackendError("Pillow is required for image export") from exc
        out = np.zeros((len(paths), self.dim), dtype=np.float32)
        for i, path in enumerate(paths):
            with Image.open(path) as im:
                arr = np.asarray(im.convert("L").resize((32, 32)),
                                 dtype=np.float32) / 255.0
            feats = np.zeros(_N_HASH_BUCKETS, dtype=np.float32)
            flat = arr.reshape(-1)
            feats[: flat.size] = flat[: _N_HASH_BUCKETS]
            out[i] = feats @ self._proj
        return _l2_normalize(out)


class SentenceTransformerBackend:
    """Frozen pretrained vision-language encoder via sentence-transformers."""

    def __init__(self, model_id: str, batch_size: int = 32):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:
            raise BackendError(
                "sentence-transformers is not installed; "
                "install gde-export[clip]") from exc
        try:
            self._model = SentenceTransformer(model_id)
        except Exception as exc:
            raise BackendError(f"cannot load model {model_id!r}: {exc}") from exc
        self.batch_size = batch_size
        self.dim = int(self._model.get_sentence_embedding_dimension() or 512)

    def encode_texts(self, texts) -> np.ndarray:
        emb = self._model.encode(list(texts), batch_size=self.batch_size,
                                 normalize_embeddings=True,
                                 convert_to_numpy=True, show_progress_bar=False)
        return np.asarray(emb, dtype=np.float32)

    def encode_images(self, paths) -> np.ndarray:
        try:
            from PIL import Image
        except ImportError as exc:
            raise BackendError("Pillow is required for image export") from exc
        images = [Image.open(p).convert("RGB") for p in paths]
        try:
            emb = self._model.encode(images, batch_size=self.batch_size,
                                     normalize_embeddings=True,
                                     convert_to_numpy=True,
                                     show_progress_bar=False)
        finally:
            for im in images:
                im.close()
        return np.asarray(emb, dtype=np.float32)


def resolve_backend(model_id: str, batch_size: int = 32):
    """model ids: 'hashed-projection-<dim>[-seed<k>]' or any
    sentence-transformers checkpoint name."""
    if model_id.startswith("hashed-projection-"):
        rest = model_id[len("hashed-projection-"):]
        seed = 0
        if "-seed" in rest:
            rest, _, s = rest.partition("-seed")
            seed = int(s)
        return HashedProjectionBackend(dim=int(rest), seed=seed)
    return SentenceTransformerBackend(model_id, batch_size=batch_size)
