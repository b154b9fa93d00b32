"""
Checkpoint files: a JSON manifest plus a raw blob.

The blob holds little-endian float32 values, row-major, tensors concatenated
in manifest order. Each manifest entry records name, shape, dtype ("f32"),
byte offset and byte length; ``meta`` carries whatever makes the checkpoint
self-describing (base config, adapter layout, ...).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContractError

FORMAT = "lor2c-checkpoint"
VERSION = 1
_F32 = np.dtype("<f4")


def _paths(prefix) -> tuple[Path, Path]:
    prefix = Path(prefix)
    return prefix.with_suffix(".json"), prefix.with_suffix(".bin")


def save_checkpoint(prefix, tensors: Mapping[str, np.ndarray], meta: Mapping | None = None) -> tuple[Path, Path]:
    manifest_path, blob_path = _paths(prefix)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(np.asarray(arr), dtype=_F32).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "dtype": "f32",
                        "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "version": VERSION, "byte_order": "little",
                "blob": blob_path.name, "meta": dict(meta or {}), "tensors": entries}
    blob_path.write_bytes(b"".join(chunks))
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path, blob_path


def load_checkpoint(prefix) -> tuple[dict[str, np.ndarray], dict]:
    manifest_path, blob_path = _paths(prefix)
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("format") != FORMAT:
        raise ContractError(f"{manifest_path} is not a {FORMAT} manifest")
    blob = (manifest_path.parent / manifest.get("blob", blob_path.name)).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        if e["dtype"] != "f32":
            raise ContractError(f"unsupported dtype {e['dtype']!r} for {e['name']}")
        end = e["offset"] + e["length"]
        if end > len(blob):
            raise ContractError(f"tensor {e['name']} runs past the end of the blob")
        arr = np.frombuffer(blob[e["offset"]:end], dtype=_F32).astype(np.float64)
        out[e["name"]] = arr.reshape(e["shape"])
    return out, manifest["meta"]


def read_manifest(prefix) -> dict:
    return json.loads(_paths(prefix)[0].read_text())
