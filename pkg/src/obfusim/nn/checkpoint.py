"""Bit-exact JSON checkpoints for named float64 arrays.

Array bytes are base64-encoded, so a save/load round trip reproduces
every value exactly regardless of decimal formatting.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def _encode(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    return {
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode(entry: dict) -> np.ndarray:
    raw = base64.b64decode(entry["data"])
    arr = np.frombuffer(raw, dtype=np.float64).copy()
    return arr.reshape(entry["shape"])


def arrays_to_payload(arrays: dict[str, np.ndarray]) -> dict:
    return {name: _encode(a) for name, a in arrays.items()}


def payload_to_arrays(payload: dict) -> dict[str, np.ndarray]:
    return {name: _decode(entry) for name, entry in payload.items()}


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray],
                meta: dict | None = None) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "arrays": arrays_to_payload(arrays),
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('format_version')}")
    return payload_to_arrays(doc["arrays"]), doc.get("meta", {})
