"""Checkpoints: named parameter/buffer maps with shapes plus the producing configs."""

from __future__ import annotations

import dataclasses
from pathlib import Path

import torch

from .discriminator import DiscriminatorConfig, build_patchgan
from .generators import GeneratorConfig, build_generator
from .srbaseline import SrcnnConfig, build_srcnn

FORMAT_VERSION = 1

_KINDS = {
    "generator": (GeneratorConfig, build_generator),
    "discriminator": (DiscriminatorConfig, build_patchgan),
    "srcnn": (SrcnnConfig, build_srcnn),
}


def _kind_of(config):
    for kind, (cls, _) in _KINDS.items():
        if isinstance(config, cls):
            return kind
    raise TypeError(f"no checkpoint kind for {type(config).__name__}")


def pack_model(model):
    config = model.config
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    return {
        "kind": _kind_of(config),
        "config": dataclasses.asdict(config),
        "state": state,
        "shapes": {k: list(v.shape) for k, v in state.items()},
    }


def unpack_model(entry):
    cls, builder = _KINDS[entry["kind"]]
    config = cls(**{k: tuple(v) if isinstance(v, list) else v
                    for k, v in entry["config"].items()})
    model = builder(config)
    expected = {k: list(v.shape) for k, v in model.state_dict().items()}
    if expected != entry["shapes"]:
        missing = set(expected) ^ set(entry["shapes"])
        raise ValueError(f"checkpoint does not match {entry['kind']} config "
                         f"(differing keys: {sorted(missing)[:5]})")
    model.load_state_dict(entry["state"])
    model.eval()
    return model


def save_checkpoint(path, models, extra=None):
    """``models`` maps a name (e.g. ``generator``) to a module with ``.config``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT_VERSION,
        "models": {name: pack_model(m) for name, m in models.items()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path):
    """Returns ``(models, extra)`` with every model rebuilt in eval mode."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format in {path}")
    models = {name: unpack_model(e) for name, e in payload["models"].items()}
    return models, payload.get("extra", {})
