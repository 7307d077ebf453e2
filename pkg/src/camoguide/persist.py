"""Save and restore full model state through the checkpoint container."""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .memory import PrototypeMemory
from .model import CamoModel, ModelConfig


def save_model(path: str, model: CamoModel, opt_buffers: dict | None = None) -> None:
    entries: dict[str, np.ndarray] = {}
    for name, p in model.all_tensors().items():
        entries["param." + name] = p.data.astype(np.float32)
    if opt_buffers:
        for name, buf in opt_buffers.items():
            entries["opt." + name] = buf.astype(np.float32)
    if model.memory is not None:
        entries["memory.snapshot"] = np.frombuffer(model.memory.snapshot(), dtype=np.uint8)
    cfg_json = json.dumps(dataclasses.asdict(model.cfg), sort_keys=True)
    entries["config"] = np.frombuffer(cfg_json.encode("utf-8"), dtype=np.uint8)
    save_checkpoint(path, entries)


def load_model(path: str, expect: ModelConfig | None = None) -> CamoModel:
    """Rebuild a model from a checkpoint; optionally validate the config echo."""
    entries = load_checkpoint(path)
    if "config" not in entries:
        raise CheckpointError(f"{path}: missing config echo")
    cfg = ModelConfig(**json.loads(entries["config"].tobytes().decode("utf-8")))
    if expect is not None:
        for fieldname in ("categories", "channels", "input_size"):
            got = getattr(cfg, fieldname)
            want = getattr(expect, fieldname)
            if got != want:
                raise CheckpointError(
                    f"{path}: config echo mismatch: {fieldname}={got}, expected {want}")
    model = CamoModel(cfg, rng=np.random.default_rng(0))
    tensors = model.all_tensors()
    for name, p in tensors.items():
        key = "param." + name
        if key not in entries:
            raise CheckpointError(f"{path}: missing tensor {key!r}")
        arr = entries[key]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{path}: tensor {key!r} has shape {arr.shape}, "
                                  f"expected {p.data.shape}")
        p.data = arr.astype(np.float32)
    if model.memory is not None:
        if "memory.snapshot" not in entries:
            raise CheckpointError(f"{path}: missing prototype memory snapshot")
        model.memory = PrototypeMemory.restore(entries["memory.snapshot"].tobytes())
    return model


def load_memory(path: str) -> PrototypeMemory:
    entries = load_checkpoint(path)
    if "memory.snapshot" not in entries:
        raise CheckpointError(
            f"{path}: no prototype memory in this checkpoint "
            "(baseline checkpoints have none)")
    return PrototypeMemory.restore(entries["memory.snapshot"].tobytes())
