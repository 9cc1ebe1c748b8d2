"""Versioned JSON parameter checkpoints.

Floats are stored as their shortest round-trip ``repr`` (what ``json`` emits),
so loading reproduces every value bit for bit.
"""
from __future__ import annotations

import json
import math
from typing import Any, Mapping

import numpy as np

from .io import atomic_write

CHECKPOINT_FORMAT = "smearmoe-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _encode(v: float):
    # json has no literal for non-finite floats
    if math.isfinite(v):
        return v
    return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")


def _decode(v) -> float:
    return float(v)


def dumps(state: Mapping[str, np.ndarray], config: Mapping[str, Any] | None = None) -> str:
    tensors = {}
    for name in sorted(state):
        arr = np.array(state[name], dtype=np.float64, order="C")
        tensors[name] = {"shape": list(arr.shape), "data": [_encode(float(x)) for x in arr.reshape(-1)]}
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
           "config": dict(config) if config is not None else None, "tensors": tensors}
    return json.dumps(doc, sort_keys=True)


def loads(text: str) -> tuple[dict[str, np.ndarray], dict | None]:
    """Return ``(state, config)``."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError("not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    state = {}
    for name, entry in doc["tensors"].items():
        shape = tuple(entry["shape"])
        data = np.array([_decode(v) for v in entry["data"]], dtype=np.float64)
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: {data.size} values do not fill shape {shape}")
        state[name] = data.reshape(shape)
    return state, doc.get("config")


def save(path, state: Mapping[str, np.ndarray], config: Mapping[str, Any] | None = None) -> None:
    atomic_write(path, dumps(state, config))


def load(path) -> tuple[dict[str, np.ndarray], dict | None]:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())
