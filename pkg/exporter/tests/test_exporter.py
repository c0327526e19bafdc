"""Exporter: format conformance against the primary loader, determinism,
similarity structure, CLI."""

import struct

import numpy as np
import pytest

from gde_export.backends import BackendError, HashedProjectionBackend, resolve_backend
from gde_export.cli import main
from gde_export.exporter import (
    ExportError,
    ExportJob,
    export_image_embeddings,
    export_text_embeddings,
    read_caption_file,
    write_gde1,
)

# the primary core is the consumer of exported files; its loader is the
# conformance oracle for the shared binary format
noisecap_encoders = pytest.importorskip("noisecap.encoders")

MODEL = "hashed-projection-512"


def real_model_available() -> bool:
    # cheap offline check: a checkpoint counts as available only if cached
    try:
        from huggingface_hub import scan_cache_dir
        return any("clip" in r.repo_id.lower() for r in scan_cache_dir().repos)
    except Exception:
        return False


def caption_file(tmp_path, rows):
    path = tmp_path / "captions.tsv"
    path.write_text("".join(f"{i}\t{t}\n" for i, t in rows), encoding="utf-8")
    return path


def test_export_text_round_trips_through_primary_loader(tmp_path):
    rows = [("cap-0", "a dog runs on the beach"),
            ("cap-1", "two children play football"),
            ("cap-2", "a red car parked near a tree")]
    src = caption_file(tmp_path, rows)
    out = tmp_path / "text.gde1"
    job = ExportJob(input_path=str(src), model_id=MODEL, output_path=str(out))
    export_text_embeddings(job)
    store = noisecap_encoders.load_embedding_store(out)
    assert store.ids == [r[0] for r in rows]
    assert store.dim == 512
    norms = np.linalg.norm(store.vectors, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-4)


def test_duplicate_captions_identical_vectors(tmp_path):
    rows = [("a", "the same sentence"), ("b", "the same sentence"),
            ("c", "a different sentence")]
    out = tmp_path / "dup.gde1"
    export_text_embeddings(ExportJob(str(caption_file(tmp_path, rows)),
                                     MODEL, str(out)))
    store = noisecap_encoders.load_embedding_store(out)
    np.testing.assert_array_equal(store.get("a"), store.get("b"))
    assert not (store.get("a") == store.get("c")).all()


def test_export_deterministic_bytes(tmp_path):
    rows = [(f"c{i}", f"sentence number {i} about a cat") for i in range(20)]
    src = caption_file(tmp_path, rows)
    a, b = tmp_path / "a.gde1", tmp_path / "b.gde1"
    export_text_embeddings(ExportJob(str(src), MODEL, str(a)))
    export_text_embeddings(ExportJob(str(src), MODEL, str(b)))
    assert a.read_bytes() == b.read_bytes()


PROBE_TRIPLES = [
    # (sentence, paraphrase, unrelated)
    ("a man rides a horse", "a man is riding a horse", "the stock market fell"),
    ("a cat sleeps on the sofa", "a cat is sleeping on a sofa", "rockets launch at dawn"),
    ("children play in the park", "the children are playing in a park", "he repaired the engine"),
    ("a red car on the road", "a red car drives down the road", "snow covers the mountain"),
    ("the dog chases a ball", "a dog is chasing the ball", "she wrote a long letter"),
    ("a boat sails on the lake", "a boat is sailing across the lake", "the oven is very hot"),
    ("birds fly over the trees", "the birds are flying above trees", "a clock hangs on the wall"),
    ("a woman reads a book", "the woman is reading her book", "trains arrive every hour"),
    ("fresh bread on the table", "there is fresh bread on a table", "the game ended in a draw"),
    ("rain falls on the city", "the rain is falling over the city", "he plays the guitar well"),
]


def test_paraphrase_similarity_beats_unrelated(tmp_path):
    # probe threshold frozen after one oracle run of the shipped backend
    backend = resolve_backend(MODEL)
    hits = 0
    total = 0
    for base, para, unrel in PROBE_TRIPLES * 5:
        e = backend.encode_texts([base, para, unrel])
        hits += int(e[0] @ e[1] > e[0] @ e[2])
        total += 1
    assert hits >= 0.9 * total


def test_tab_format_enforced(tmp_path):
    bad = tmp_path / "bad.tsv"
    bad.write_text("no tab here\n", encoding="utf-8")
    with pytest.raises(ExportError, match="id<TAB>text"):
        read_caption_file(bad)


def test_empty_input_rejected(tmp_path):
    empty = tmp_path / "empty.tsv"
    empty.write_text("\n\n", encoding="utf-8")
    with pytest.raises(ExportError, match="no captions"):
        read_caption_file(empty)


def test_unknown_model_fails_cleanly():
    with pytest.raises(BackendError):
        resolve_backend("definitely-not-a-model-anyone-published")


def test_write_gde1_header_bytes(tmp_path):
    vecs = np.arange(6, dtype=np.float32).reshape(2, 3)
    path = write_gde1(tmp_path / "x.gde1", ["u", "v"], vecs)
    blob = path.read_bytes()
    assert blob[:4] == b"GDE1"
    assert struct.unpack_from("<I", blob, 4)[0] == 3
    assert struct.unpack_from("<Q", blob, 8)[0] == 2


def test_image_export_round_trip(tmp_path):
    pil = pytest.importorskip("PIL.Image")
    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    rng = np.random.default_rng(0)
    for name in ("im0", "im1", "im2"):
        arr = (rng.random((16, 16, 3)) * 255).astype(np.uint8)
        pil.fromarray(arr).save(img_dir / f"{name}.png")
    out = tmp_path / "img.gde1"
    export_image_embeddings(ExportJob(str(img_dir), MODEL, str(out)))
    store = noisecap_encoders.load_embedding_store(out)
    assert store.ids == ["im0", "im1", "im2"]
    np.testing.assert_allclose(np.linalg.norm(store.vectors, axis=1), 1.0,
                               atol=1e-4)


def test_cli_export_text(tmp_path, capsys):
    src = caption_file(tmp_path, [("x", "hello world"), ("y", "another line")])
    out = tmp_path / "cli.gde1"
    rc = main(["export-text", "--input", str(src), "--model", MODEL,
               "--out", str(out)])
    assert rc == 0 and out.exists()
    rc = main(["export-text", "--input", str(tmp_path / "missing.tsv"),
               "--model", MODEL, "--out", str(out)])
    assert rc == 2


@pytest.mark.skipif(not real_model_available(),
                    reason="no pretrained vision-language checkpoint available offline")
def test_real_model_cross_modal_alignment(tmp_path):
    backend = resolve_backend("clip-ViT-B-32")
    e = backend.encode_texts(["a photo of a cat", "a photo of a dog"])
    assert e.shape[1] == backend.dim
