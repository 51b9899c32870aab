"""Versioned JSON checkpoints: model config, anchors, and named parameters.

JSON keeps the files diffable and byte-deterministic (shortest round-trip
float repr, sorted keys); every array is stored with an explicit shape.
"""

from __future__ import annotations

import json

import numpy as np

from .detokenizer import AnchorSet
from .errors import ParseError
from .model import Model, ModelConfig

FORMAT_VERSION = 1


def save_checkpoint(path, model: Model, anchors: AnchorSet):
    payload = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "anchors": anchors.to_json_obj(),
        "params": {
            name: {"shape": list(t.data.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in model.parameters().items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path) -> tuple[Model, AnchorSet]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid checkpoint JSON ({exc})") from exc
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version!r}")
    config = ModelConfig.from_dict(payload["model_config"])
    model = Model(config)
    state = {}
    for name, entry in payload["params"].items():
        state[name] = np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])
    model.store.load_state_dict(state)
    anchors = AnchorSet.from_json_obj(payload["anchors"])
    return model, anchors
