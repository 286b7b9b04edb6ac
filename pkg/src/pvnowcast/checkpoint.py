"""Checkpoint directories: ``manifest.json`` plus ``tensors.bin``.

``tensors.bin`` is the concatenation of serialized tensors (parameters, then
batch-norm buffers) in the model's deterministic naming order; the manifest
records each name with its byte offset and length.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .models import ModelConfig, NowcastModel
from .tensor import read_tensor, tensor_bytes

MANIFEST = "manifest.json"
TENSORS = "tensors.bin"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def state_dict(model: NowcastModel) -> dict:
    """Name -> array copy of every parameter and buffer."""
    state = {f"param/{n}": p.data.copy() for n, p in model.named_parameters()}
    state.update({f"buffer/{n}": b.copy() for n, b in model.named_buffers()})
    return state


def load_state_dict(model: NowcastModel, state: dict) -> None:
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    expected = {f"param/{n}" for n in params} | {f"buffer/{n}" for n in buffers}
    missing, extra = expected - set(state), set(state) - expected
    if missing or extra:
        raise CheckpointError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for name, p in params.items():
        arr = state[f"param/{name}"]
        if arr.shape != p.data.shape:
            raise CheckpointError(f"{name}: shape {arr.shape} != model {p.data.shape}")
        p.data = np.ascontiguousarray(arr, dtype=p.data.dtype)
    for name, b in buffers.items():
        b[...] = state[f"buffer/{name}"]


@dataclass
class Checkpoint:
    kind: str
    model_config: dict
    alpha: Optional[float]
    epoch: int
    val_mae: Optional[float]
    state: dict
    run_config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def manifest(self, entries: list) -> dict:
        return {
            "alpha": self.alpha,
            "epoch": self.epoch,
            "extra": self.extra,
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "model_config": self.model_config,
            "run_config": self.run_config,
            "tensor_file": TENSORS,
            "tensors": entries,
            "val_mae": self.val_mae,
        }


def from_model(model: NowcastModel, alpha: Optional[float], epoch: int = 0, val_mae=None, run_config=None, extra=None, state=None):
    return Checkpoint(
        kind=model.kind.value,
        model_config=model.cfg.to_json(),
        alpha=alpha,
        epoch=epoch,
        val_mae=val_mae,
        state=state if state is not None else state_dict(model),
        run_config=run_config or {},
        extra=extra or {},
    )


def save(ckpt: Checkpoint, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = io.BytesIO()
    entries = []
    for name, arr in ckpt.state.items():
        data = tensor_bytes(arr)
        entries.append({"name": name, "offset": blob.tell(), "nbytes": len(data)})
        blob.write(data)
    (directory / TENSORS).write_bytes(blob.getvalue())
    text = json.dumps(ckpt.manifest(entries), indent=2, sort_keys=True) + "\n"
    (directory / MANIFEST).write_text(text)
    return directory


def load(directory) -> Checkpoint:
    directory = Path(directory)
    try:
        man = json.loads((directory / MANIFEST).read_text())
        raw = (directory / man.get("tensor_file", TENSORS)).read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{directory}: {exc}") from exc
    if man.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{directory}: unsupported format version {man.get('format_version')}")
    state = {}
    for e in man["tensors"]:
        chunk = raw[e["offset"] : e["offset"] + e["nbytes"]]
        state[e["name"]] = read_tensor(io.BytesIO(chunk))
    return Checkpoint(
        kind=man["kind"],
        model_config=man["model_config"],
        alpha=man.get("alpha"),
        epoch=man["epoch"],
        val_mae=man.get("val_mae"),
        state=state,
        run_config=man.get("run_config", {}),
        extra=man.get("extra", {}),
    )


def restore_model(ckpt: Checkpoint) -> NowcastModel:
    """Rebuild the model described by a checkpoint and load its tensors."""
    cfg = ModelConfig.from_json(ckpt.model_config)
    dtype = next(iter(ckpt.state.values())).dtype if ckpt.state else None
    model = NowcastModel(cfg, dtype=dtype)
    load_state_dict(model, ckpt.state)
    return model
