"""Run artifacts: hashing, manifests, CSV and JSON emission.

Every command writes a manifest JSON holding the resolved config, the
command name, input/output paths, and sha256 hashes of deterministic
outputs. Manifests are sufficient to re-run a command: the CLI accepts a
manifest wherever it accepts a config file. Files whose bytes depend on
wall-clock timing (the per-step training log) are listed under
"aux_outputs" and excluded from hashing.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_json(path, payload: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def write_csv(path, rows: list[dict], columns: list[str]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in columns})
    os.replace(tmp, path)


def read_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def write_manifest(out_dir, command: str, config_dict: dict, outputs: dict,
                   aux_outputs: dict | None = None, extra: dict | None = None,
                   name: str | None = None) -> Path:
    """outputs: label -> path (hashed); aux_outputs: label -> path (listed only)."""
    out_dir = Path(out_dir)
    manifest = {
        "command": command,
        "config": config_dict,
        "outputs": {label: {"path": str(Path(p).name), "sha256": sha256_file(p)}
                    for label, p in outputs.items()},
        "aux_outputs": {label: str(Path(p).name)
                        for label, p in (aux_outputs or {}).items()},
    }
    if extra:
        manifest.update(extra)
    path = out_dir / (name or f"manifest-{command}.json")
    write_json(path, manifest)
    return path


def run_id_for(config_dict: dict, seed: int) -> str:
    payload = json.dumps({"config": config_dict, "seed": seed}, sort_keys=True)
    return sha256_text(payload)[:12]
