"""Run metadata and deterministic file output.

Every artifact file starts with a metadata block (config hash, seed, grid
spec, tool version).  Output bytes are reproducible for a fixed
configuration; the timestamp is the only line exempt from byte comparison.
"""

from __future__ import annotations

import hashlib
import json
import time
from typing import Any

import numpy as np

from . import __version__

TRUNCATION_NOTE = (
    "values are computed on a truncated box; the underlying problem is posed "
    "on the whole space and the truncation error is unquantified"
)


def _canonical(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(_canonical(obj), sort_keys=True, indent=2)


def config_hash(config: dict) -> str:
    payload = json.dumps(_canonical(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def metadata_block(config: dict, **extra: Any) -> dict:
    meta = {
        "tool": "perronlab",
        "version": __version__,
        "config_hash": config_hash(config),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    meta.update(_canonical(extra))
    return meta


def format_float(v: float) -> str:
    """Shortest round-trip decimal form."""
    return repr(float(v))


def write_csv(path, columns: list[str], rows, metadata: dict | None = None) -> None:
    """CSV with '#'-prefixed metadata lines, a header row, and repr-formatted floats."""
    with open(path, "w") as fh:
        if metadata:
            for key in sorted(metadata):
                fh.write(f"# {key}: {json.dumps(_canonical(metadata[key]), sort_keys=True)}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(format_float(v) if isinstance(v, (float, np.floating)) else str(v) for v in row))
            fh.write("\n")


def read_csv(path) -> tuple[list[str], np.ndarray, dict]:
    """Inverse of write_csv: (columns, float matrix, metadata)."""
    meta: dict = {}
    columns: list[str] = []
    data: list[list[float]] = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                body = line[1:].strip()
                if ":" in body:
                    key, _, value = body.partition(":")
                    try:
                        meta[key.strip()] = json.loads(value.strip())
                    except json.JSONDecodeError:
                        meta[key.strip()] = value.strip()
                continue
            if not columns:
                columns = line.split(",")
                continue
            if line:
                data.append([float(v) for v in line.split(",")])
    return columns, np.asarray(data), meta


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        fh.write(canonical_json(payload))
        fh.write("\n")
