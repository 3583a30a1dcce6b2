"""Checkpoint container: a JSON manifest plus one raw little-endian f64 blob.

A checkpoint directory holds ``manifest.json``, ``params.bin``,
``model.json`` (the model config) and ``hierarchy/``.
"""
from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path

import numpy as np

from .decimation import MeshHierarchy
from .model import Autoencoder, ModelConfig

DTYPE = np.dtype("<f8")


def _atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_params(params: dict[str, np.ndarray], root: str | Path, extra: dict | None = None) -> None:
    """Write ``params`` (name -> array) in sorted-name order."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.asarray(params[name], dtype=DTYPE)  # tobytes() emits C order; keeps 0-d shapes
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.size
    manifest = {"dtype": "float64-le", "count": offset, "params": entries, **(extra or {})}
    _atomic_write(root / "params.bin", b"".join(chunks))
    _atomic_write(root / "manifest.json", json.dumps(manifest, indent=1).encode())


def read_params(root: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    blob = np.frombuffer((root / "params.bin").read_bytes(), dtype=DTYPE)
    if blob.size != manifest["count"]:
        raise ValueError(f"blob holds {blob.size} values, manifest declares {manifest['count']}")
    out = {}
    for e in manifest["params"]:
        size = int(np.prod(e["shape"], dtype=np.int64))
        out[e["name"]] = blob[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(np.float64)
    return out, manifest


def save_checkpoint(model: Autoencoder, root: str | Path, extra: dict | None = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    if not (root / "hierarchy" / "hierarchy.json").exists():
        model.hierarchy.save(root / "hierarchy")
    _atomic_write(root / "model.json", model.config.to_json().encode())
    write_params({k: v.data for k, v in model.named_params().items()}, root, extra)
    return root


def load_checkpoint(root: str | Path) -> Autoencoder:
    root = Path(root)
    config = ModelConfig.load(root / "model.json")
    model = Autoencoder(config, MeshHierarchy.load(root / "hierarchy"))
    stored, _ = read_params(root)
    named = model.named_params()
    if set(stored) != set(named):
        missing = sorted(set(named) ^ set(stored))
        raise ValueError(f"checkpoint parameters do not match the model: {missing[:5]}")
    for name, t in named.items():
        if stored[name].shape != t.shape:
            raise ValueError(f"{name}: stored shape {stored[name].shape}, model {t.shape}")
        t.data[...] = stored[name]
    return model
