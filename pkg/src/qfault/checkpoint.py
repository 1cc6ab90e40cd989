"""Checkpoint persistence: one JSON document per trained model.

Numeric arrays are stored inline as JSON lists; float64 values round-trip
exactly through repr, so a reloaded model evaluates bitwise-identically.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .nn import LayerDescriptor, Model
from .quant import QuantSpec
from .tensor import Tensor

__all__ = ["CHECKPOINT_VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint document."""


def _spec_to_dict(spec: Optional[QuantSpec]):
    return None if spec is None else asdict(spec)


def _spec_from_dict(d) -> Optional[QuantSpec]:
    return None if d is None else QuantSpec(**d)


def save_checkpoint(path, model: Model, train_config: Optional[dict] = None,
                    saq_config: Optional[dict] = None,
                    seed_provenance: Optional[dict] = None) -> None:
    doc: dict[str, Any] = {
        "version": CHECKPOINT_VERSION,
        "arch": model.arch,
        "bits": model.bits,
        "input_shape": list(model.input_shape) if model.input_shape else None,
        "descriptors": [asdict(d) for d in model.descriptors],
        "params": [{"shape": list(p.shape), "data": p.data.reshape(-1).tolist()}
                   for p in model.params],
        "weight_specs": [_spec_to_dict(s) for s in model.weight_specs],
        "act_specs": [_spec_to_dict(s) for s in model.act_specs],
        "train_config": train_config,
        "saq_config": saq_config,
        "seed_provenance": seed_provenance,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_checkpoint(path) -> tuple[Model, dict]:
    """Rebuild the model; returns (model, metadata dict)."""
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    version = doc.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version!r}")
    try:
        descriptors = [LayerDescriptor(**d) for d in doc["descriptors"]]
        params = []
        for p in doc["params"]:
            arr = np.array(p["data"], dtype=np.float64)
            if arr.size != int(np.prod(p["shape"])):
                raise CheckpointError("parameter data does not match its shape")
            params.append(Tensor(arr.reshape(p["shape"]), requires_grad=True))
        model = Model(
            arch=doc["arch"],
            descriptors=descriptors,
            params=params,
            bits=doc["bits"],
            weight_specs=[_spec_from_dict(s) for s in doc["weight_specs"]],
            act_specs=[_spec_from_dict(s) for s in doc["act_specs"]],
            input_shape=tuple(doc["input_shape"]) if doc.get("input_shape") else None,
        )
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"malformed checkpoint {path}: {e}") from e
    meta = {
        "train_config": doc.get("train_config"),
        "saq_config": doc.get("saq_config"),
        "seed_provenance": doc.get("seed_provenance"),
    }
    return model, meta
