"""Versioned JSON checkpoints.

Floats are written with ``repr`` precision, so a save/load round trip is
bit-exact.  Writes go through a temporary file and an atomic rename.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .clstm import ClstmParams, ModelConfig
from .errors import CheckpointError

FORMAT = "streamwatch-checkpoint"
VERSION = 1


def checkpoint_dict(params: ClstmParams, meta: dict | None = None) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "config": asdict(params.config),
        "arrays": {
            k: {"shape": list(params.arrays[k].shape), "data": params.arrays[k].ravel().tolist()}
            for k in params.config.shapes()
        },
        "meta": meta or {},
    }


def checkpoint_save(params: ClstmParams, path: str | os.PathLike, meta: dict | None = None) -> None:
    path = Path(path)
    text = json.dumps(checkpoint_dict(params, meta), allow_nan=False)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
        with os.fdopen(fd, "w") as fp:
            fp.write(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc


def checkpoint_from_dict(doc: dict) -> tuple[ClstmParams, dict]:
    if not isinstance(doc, dict) or doc.get("format") != FORMAT:
        raise CheckpointError("not a streamwatch checkpoint")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"checkpoint version {doc.get('version')!r} is not supported (expected {VERSION})")
    try:
        known = {f.name for f in fields(ModelConfig)}
        cfg = ModelConfig(**{k: v for k, v in doc["config"].items() if k in known})
        cfg.validate()
        arrays = {}
        for k, shape in cfg.shapes().items():
            entry = doc["arrays"][k]
            a = np.array(entry["data"], dtype=float)
            if tuple(entry["shape"]) != tuple(shape) or a.size != int(np.prod(shape)):
                raise CheckpointError(f"array {k} has shape {entry['shape']}, expected {list(shape)}")
            arrays[k] = a.reshape(shape)
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return ClstmParams(cfg, arrays), dict(doc.get("meta", {}))


def checkpoint_load(path: str | os.PathLike) -> tuple[ClstmParams, dict]:
    """Returns ``(params, meta)``; raises ``CheckpointError`` and never a partial model."""
    try:
        with open(path) as fp:
            doc = json.load(fp)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint {path} is truncated or not JSON: {exc}") from exc
    return checkpoint_from_dict(doc)
