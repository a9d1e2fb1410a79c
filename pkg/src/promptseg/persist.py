"""Raw float maps with JSON sidecars (``.sal`` saliency, ``.unc`` uncertainty)."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .attribution import SaliencyMap


def _sidecar(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_float_map(path, values, meta: dict):
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("float maps must be 2-D")
    path = Path(path)
    path.write_bytes(values.astype("<f4").tobytes())
    meta = {"height": int(values.shape[0]), "width": int(values.shape[1]), **meta}
    _sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_float_map(path):
    path = Path(path)
    meta = json.loads(_sidecar(path).read_text())
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    h, w = int(meta["height"]), int(meta["width"])
    if raw.size != h * w:
        raise ValueError(f"{path}: {raw.size} values, sidecar says {h}x{w}")
    return raw.reshape(h, w).astype(np.float32), meta


def write_saliency(path, sal: SaliencyMap):
    write_float_map(path, sal.values, {"prompt_id": sal.prompt_id, "gamma": sal.gamma, "steps": sal.steps,
                                       "seed": sal.seed})


def read_saliency(path) -> SaliencyMap:
    values, meta = read_float_map(path)
    return SaliencyMap(values=values, prompt_id=meta.get("prompt_id", ""), gamma=meta.get("gamma", 0.0),
                       steps=meta.get("steps", 0), seed=meta.get("seed", 0))


def write_uncertainty(path, entropy, class_count: int, **meta):
    write_float_map(path, entropy, {"class_count": int(class_count), **meta})


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
