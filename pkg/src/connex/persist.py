"""Checkpoints, reproducibility records and content hashing.

Checkpoints are ``.npz`` archives holding named float arrays plus one JSON
metadata entry (format version, kind, and the dimensions needed to validate
shapes at load time). Every CLI stage also drops a ``run_record.json`` that
captures the resolved options, the seed and SHA-256 hashes of all inputs,
enough to re-run the stage and reproduce its outputs byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import DataError

CHECKPOINT_VERSION = 1
RECORD_VERSION = 1
_META_KEY = "__meta__"


def save_named_tensors(path, named: dict, meta: dict) -> None:
    arrays = {name: np.asarray(value) for name, value in named.items()}
    if _META_KEY in arrays:
        raise DataError(f"checkpoint: tensor name {_META_KEY!r} is reserved")
    payload = dict(meta)
    payload["format_version"] = CHECKPOINT_VERSION
    arrays[_META_KEY] = np.frombuffer(
        json.dumps(payload, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_named_tensors(path) -> tuple[dict, dict]:
    try:
        with np.load(path) as archive:
            arrays = {name: archive[name] for name in archive.files}
    except (OSError, ValueError) as exc:
        raise DataError(f"checkpoint {path}: cannot read ({exc})") from exc
    raw_meta = arrays.pop(_META_KEY, None)
    if raw_meta is None:
        raise DataError(f"checkpoint {path}: missing metadata entry")
    meta = json.loads(raw_meta.tobytes().decode("utf-8"))
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(
            f"checkpoint {path}: format_version {meta.get('format_version')} unsupported"
        )
    return arrays, meta


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_run_record(record_path, subcommand: str, options: dict, seed, inputs, outputs) -> Path:
    """Snapshot one CLI stage: options, seed, input hashes, produced files."""
    record_path = Path(record_path)
    record_path.parent.mkdir(parents=True, exist_ok=True)
    record = {
        "record_version": RECORD_VERSION,
        "subcommand": subcommand,
        "options": options,
        "seed": seed,
        "input_hashes": {str(p): sha256_file(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    record_path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record_path


def read_run_record(path) -> dict:
    with open(path) as fh:
        record = json.load(fh)
    if record.get("record_version") != RECORD_VERSION:
        raise DataError(f"run record {path}: unsupported version")
    return record
