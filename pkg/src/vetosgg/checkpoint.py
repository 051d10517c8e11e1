"""JSON checkpoints: configuration, weights, optimizer moments and schedule state."""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .nn import Module

FORMAT = "vetosgg-checkpoint/1"


class CheckpointError(ValueError):
    pass


def _pack(arrays: dict[str, np.ndarray]) -> dict:
    return {k: {"shape": list(v.shape), "data": np.asarray(v, dtype=np.float64).reshape(-1).tolist()}
            for k, v in arrays.items()}


def _unpack(d: dict) -> dict[str, np.ndarray]:
    out = {}
    for k, v in d.items():
        try:
            out[k] = np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
        except (KeyError, ValueError, TypeError) as err:
            raise CheckpointError(f"malformed tensor entry {k!r}: {err}") from None
    return out


def model_state(model: Module) -> dict[str, np.ndarray]:
    return {p.name: p.data for p in model.parameters()}


def load_model_state(model: Module, state: dict[str, np.ndarray]) -> None:
    params = {p.name: p for p in model.parameters()}
    missing = sorted(set(params) - set(state))
    extra = sorted(set(state) - set(params))
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, p in params.items():
        if state[name].shape != p.data.shape:
            raise CheckpointError(f"parameter {name!r} has shape {state[name].shape}, model expects {p.data.shape}")
        p.data = state[name].copy()


def atomic_write(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_checkpoint(path: str | Path, model: Module, config: dict, frequency: list[float], step: int,
                    optimizer: dict | None = None, schedule: dict | None = None) -> None:
    doc = {
        "format": FORMAT,
        "config": config,
        "frequency": [float(f) for f in frequency],
        "step": int(step),
        "parameters": _pack(model_state(model)),
        "optimizer": None if optimizer is None else {
            "t": int(optimizer["t"]), "m": _pack(optimizer["m"]), "v": _pack(optimizer["v"])},
        "schedule": schedule,
    }
    atomic_write(path, json.dumps(doc, sort_keys=True))


def read_checkpoint(path: str | Path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from None
    except json.JSONDecodeError as err:
        raise CheckpointError(f"{path}: parse error at line {err.lineno}, column {err.colno}") from None
    if doc.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint (format {doc.get('format')!r})")
    doc["parameters"] = _unpack(doc["parameters"])
    if doc.get("optimizer"):
        opt = doc["optimizer"]
        doc["optimizer"] = {"t": int(opt["t"]), "m": _unpack(opt["m"]), "v": _unpack(opt["v"])}
    return doc
