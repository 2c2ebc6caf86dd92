"""Checkpoints: JSON manifest plus little-endian float64 payload in manifest order."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError

FORMAT = "hutformer-checkpoint"
VERSION = 1


def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".bin"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".bin")


def save_checkpoint(path: str | Path, named: Iterable[tuple[str, object]], config: dict,
                    **extra) -> str:
    """Write ``<path>.json`` + ``<path>.bin``; returns the payload sha256."""
    meta_path, bin_path = _paths(path)
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks = [], []
    for name, p in named:
        arr = np.asarray(getattr(p, "data", p), dtype=np.float64)
        entries.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.astype("<f8").tobytes())
    payload = b"".join(chunks)
    digest = hashlib.sha256(payload).hexdigest()
    bin_path.write_bytes(payload)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "config": config,
        "parameters": entries,
        "payload_file": bin_path.name,
        "payload_sha256": digest,
        **extra,
    }
    meta_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return digest


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    meta_path, bin_path = _paths(path)
    try:
        manifest = json.loads(meta_path.read_text(encoding="utf-8"))
        payload = bin_path.read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"missing checkpoint file: {e.filename}") from e
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise DataError(f"{meta_path}: not a version-{VERSION} {FORMAT}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise DataError(f"{bin_path}: payload hash does not match manifest")
    params, offset = {}, 0
    for entry in manifest["parameters"]:
        n = int(np.prod(entry["shape"], dtype=np.int64))
        if offset + 8 * n > len(payload):
            raise DataError(f"{bin_path}: truncated at offset {offset} reading {entry['name']}")
        params[entry["name"]] = (
            np.frombuffer(payload, dtype="<f8", count=n, offset=offset)
            .reshape(entry["shape"]).astype(np.float64))
        offset += 8 * n
    if offset != len(payload):
        raise DataError(f"{bin_path}: {len(payload) - offset} trailing bytes after offset {offset}")
    return manifest, params


def assign(named: Iterable[tuple[str, object]], params: dict[str, np.ndarray], strict: bool = True):
    """Copy checkpoint arrays into matching parameters by name."""
    named = list(named)
    missing = [n for n, _ in named if n not in params]
    if strict and missing:
        raise DataError(f"checkpoint lacks parameters: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    for name, p in named:
        if name not in params:
            continue
        if params[name].shape != p.data.shape:
            raise DataError(f"{name}: checkpoint shape {params[name].shape} != model shape {p.data.shape}")
        p.data = params[name].copy()


def payload_sha256(path: str | Path) -> str:
    return hashlib.sha256(_paths(path)[1].read_bytes()).hexdigest()
