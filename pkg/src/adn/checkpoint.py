"""Parameter checkpoints: one binary archive, bit-exact reload.

The archive is a standard .npz (zip of raw arrays) holding every named
parameter tensor plus a JSON manifest with the architecture shape, the
calendar, and the location-id to embedding-row mapping.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .data import CalendarSpec
from .errors import DataError
from .model import ModelConfig, ModelParams
from .tensor import Tensor

_MANIFEST_KEY = "__manifest__"


def save_checkpoint(path, params: ModelParams, extra: dict | None = None) -> None:
    manifest = {
        "format": 1,
        "model_config": asdict(params.config),
        "calendar": asdict(params.calendar),
        "locations": params.locations,
        "location_rows": {loc: i + 1 for i, loc in enumerate(params.locations)},
        "tensor_shapes": {n: list(t.shape) for n, t in params.tensors.items()},
        "extra": extra or {},
    }
    blob = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    arrays = {n: t.data for n, t in params.tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, **{_MANIFEST_KEY: blob}, **arrays)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Returns (params, manifest). Tensor buffers are loaded byte-for-byte."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such checkpoint: {path}")
    with np.load(path) as archive:
        if _MANIFEST_KEY not in archive:
            raise DataError(f"{path}: not a parameter checkpoint (missing manifest)")
        manifest = json.loads(archive[_MANIFEST_KEY].tobytes().decode())
        tensors = {
            name: Tensor(np.ascontiguousarray(archive[name]), requires_grad=True)
            for name in archive.files
            if name != _MANIFEST_KEY
        }
    config = ModelConfig(**manifest["model_config"])
    calendar = CalendarSpec(**manifest["calendar"])
    params = ModelParams(tensors, config, calendar, manifest["locations"])
    return params, manifest
