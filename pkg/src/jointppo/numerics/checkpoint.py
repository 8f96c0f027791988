"""Parameter container on disk.

Format (JSON, UTF-8)::

    {
      "format": "jointppo-params",
      "version": 1,
      "meta": {...},                     # free-form, e.g. net config, agent order
      "params": {"<name>": {"shape": [..], "data": [floats, row-major]}, ...}
    }

Floats are written with ``repr`` precision, so a save/load round trip is exact.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FORMAT = "jointppo-params"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_params(path: str | Path, params: Mapping[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(arr.shape), "data": np.asarray(arr, dtype=np.float64).ravel().tolist()}
            for name, arr in params.items()
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, sort_keys=False))
    tmp.replace(path)


def load_params(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported version {doc.get('version')}")
    params = {}
    for name, entry in doc["params"].items():
        data = np.asarray(entry["data"], dtype=np.float64)
        shape = tuple(entry["shape"])
        if int(np.prod(shape)) != data.size:
            raise CheckpointError(f"{path}: parameter {name} has {data.size} values for shape {shape}")
        params[name] = data.reshape(shape)
    return params, doc.get("meta", {})
