"""Self-describing JSON checkpoints for the model and task bank.

Floats are serialised with Python's shortest-round-trip repr, so a load
followed by a save reproduces every 64-bit value bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .adapter import layer_from_payload, layer_to_payload
from .errors import DataError
from .model import AdapterModel, FrozenBackbone
from .task_bank import TaskBank, bank_from_payload, bank_to_payload

FORMAT = "submoe-checkpoint"
VERSION = 1


def model_to_payload(model: AdapterModel) -> dict:
    return {
        "temperature": model.temperature,
        "learned_tasks": list(model.learned_tasks),
        "phase": {str(k): v for k, v in model.phase.items()},
        "current_task": model.current_task,
        "backbone": {
            "weights": [w.tolist() for w in model.backbone.weights],
            "biases": [b.tolist() for b in model.backbone.biases],
        },
        "adapters": [layer_to_payload(model.adapters[i]) for i in sorted(model.adapters)],
    }


def model_from_payload(payload: dict) -> AdapterModel:
    backbone = FrozenBackbone(
        weights=[np.asarray(w, dtype=np.float64) for w in payload["backbone"]["weights"]],
        biases=[np.asarray(b, dtype=np.float64) for b in payload["backbone"]["biases"]],
    )
    adapters = {}
    for entry in payload["adapters"]:
        layer = layer_from_payload(entry)
        adapters[layer.layer_index] = layer
    return AdapterModel(
        backbone=backbone,
        adapters=adapters,
        temperature=payload["temperature"],
        learned_tasks=list(payload["learned_tasks"]),
        phase={int(k): v for k, v in payload["phase"].items()},
        current_task=payload["current_task"],
    )


def save_checkpoint(path: str | Path, model: AdapterModel,
                    bank: TaskBank | None = None, meta: dict | None = None) -> Path:
    path = Path(path)
    doc = {
        "format": FORMAT,
        "version": VERSION,
        "model": model_to_payload(model),
        "bank": bank_to_payload(bank) if bank is not None else None,
        "meta": meta or {},
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc) + "\n")
    return path


def load_checkpoint(path: str | Path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if doc.get("format") != FORMAT:
        raise DataError(f"{path} is not a checkpoint file")
    if doc.get("version") != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    model = model_from_payload(doc["model"])
    bank = bank_from_payload(doc["bank"]) if doc.get("bank") is not None else None
    return model, bank, doc.get("meta", {})
