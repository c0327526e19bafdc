"""Export jobs and the GDE1 writer.

GDE1 layout (little-endian): magic "GDE1", u32 dimension, u64 count,
count x dim float32 row-major payload, then count length-prefixed
(u32) UTF-8 id strings. Output files are written atomically.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backends import resolve_backend

GDE1_MAGIC = b"GDE1"


class ExportError(RuntimeError):
    pass


@dataclass
class ExportJob:
    input_path: str  # captions file (id<TAB>text per line) or image directory
    model_id: str
    output_path: str
    batch_size: int = 32


def read_caption_file(path):
    """One caption per line: `id<TAB>text`. Blank lines are skipped."""
    ids, texts = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ExportError(f"{path}:{lineno}: expected `id<TAB>text`")
            cid, _, text = line.partition("\t")
            ids.append(cid)
            texts.append(text)
    if not ids:
        raise ExportError(f"{path}: no captions found")
    return ids, texts


def write_gde1(path, ids, vectors: np.ndarray):
    vectors = np.ascontiguousarray(vectors, dtype="<f4")
    if vectors.ndim != 2 or len(ids) != vectors.shape[0]:
        raise ExportError(
            f"need one id per vector row, got {len(ids)} ids and "
            f"{vectors.shape} vectors")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(GDE1_MAGIC)
        f.write(struct.pack("<I", vectors.shape[1]))
        f.write(struct.pack("<Q", vectors.shape[0]))
        f.write(vectors.tobytes())
        for cid in ids:
            raw = str(cid).encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
    os.replace(tmp, path)
    return path


def export_text_embeddings(job: ExportJob) -> Path:
    """Encode every caption in the job's input file; ids are preserved and
    the embedding dimension is recorded in the file header."""
    ids, texts = read_caption_file(job.input_path)
    backend = resolve_backend(job.model_id, batch_size=job.batch_size)
    chunks = []
    for lo in range(0, len(texts), job.batch_size):
        chunks.append(backend.encode_texts(texts[lo: lo + job.batch_size]))
    vectors = np.concatenate(chunks, axis=0)
    return write_gde1(job.output_path, ids, vectors)


IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp")


def export_image_embeddings(job: ExportJob) -> Path:
    image_dir = Path(job.input_path)
    paths = sorted(p for p in image_dir.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ExportError(f"{image_dir}: no images found")
    backend = resolve_backend(job.model_id, batch_size=job.batch_size)
    chunks = []
    for lo in range(0, len(paths), job.batch_size):
        chunks.append(backend.encode_images(paths[lo: lo + job.batch_size]))
    vectors = np.concatenate(chunks, axis=0)
    ids = [p.stem for p in paths]
    return write_gde1(job.output_path, ids, vectors)
