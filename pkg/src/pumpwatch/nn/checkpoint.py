"""Checkpoint container: config hash, named float64 parameters, epoch and seed.

Stored as an ``.npz`` archive. Parameters live under ``param/<name>``; all
scalar metadata is one JSON document under ``__meta__``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: str
    model_config: dict
    params: dict[str, np.ndarray]
    config_hash: str
    epoch: int
    seed: int
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    meta = {
        "version": FORMAT_VERSION,
        "model": ckpt.model,
        "model_config": ckpt.model_config,
        "config_hash": ckpt.config_hash,
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "param_names": list(ckpt.params),
        "param_shapes": [list(np.shape(v)) for v in ckpt.params.values()],
        "extra": ckpt.extra,
    }
    arrays = {f"param/{k}": np.asarray(v, dtype=np.float64) for k, v in ckpt.params.items()}
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> Checkpoint:
    with np.load(Path(path), allow_pickle=False) as z:
        meta = json.loads(str(z["__meta__"]))
        if meta.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        params = {}
        for name, shape in zip(meta["param_names"], meta["param_shapes"]):
            arr = z[f"param/{name}"]
            if list(arr.shape) != shape:
                raise ValueError(f"checkpoint parameter {name} has shape {arr.shape}, header says {shape}")
            params[name] = arr.astype(np.float64)
    return Checkpoint(
        model=meta["model"],
        model_config=meta["model_config"],
        params=params,
        config_hash=meta["config_hash"],
        epoch=meta["epoch"],
        seed=meta["seed"],
        extra=meta.get("extra", {}),
    )
