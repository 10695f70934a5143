"""Parameter checkpoints: JSON manifest plus a little-endian float64 blob.

``<stem>.json`` lists ``{"name", "shape", "offset", "count"}`` per parameter in
blob order (offset in bytes). ``<stem>.bin`` holds the raw values.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

_LE_F64 = np.dtype("<f8")


def to_bytes(params: Mapping[str, np.ndarray]) -> tuple[list[dict], bytes]:
    entries, chunks, offset = [], [], 0
    for name, arr in params.items():
        a = np.ascontiguousarray(arr, dtype=_LE_F64)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        b = a.tobytes()
        chunks.append(b)
        offset += len(b)
    return entries, b"".join(chunks)


def params_hash(params: Mapping[str, np.ndarray]) -> str:
    entries, blob = to_bytes(params)
    h = hashlib.sha256(json.dumps(entries, sort_keys=True).encode())
    h.update(blob)
    return h.hexdigest()


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, blob = to_bytes(params)
    manifest = {"format": "f64le", "blob": path.with_suffix(".bin").name, "params": entries}
    if meta:
        manifest["meta"] = meta
    path.with_suffix(".bin").write_bytes(blob)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    return path.with_suffix(".json")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    blob = (path.parent / manifest["blob"]).read_bytes()
    out = {}
    for e in manifest["params"]:
        a = np.frombuffer(blob, dtype=_LE_F64, count=e["count"], offset=e["offset"])
        out[e["name"]] = a.reshape(e["shape"]).astype(np.float64)
    return out, manifest.get("meta", {})
