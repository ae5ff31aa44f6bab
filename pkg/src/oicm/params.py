"""Parameter digests and the versioned checkpoint container.

Checkpoint layout (documented here, not bit-defined): a torch.save'd dict
    {"format": "oicm-checkpoint", "version": 1,
     "manifest": {<arch config>, "config_hash": <sha256 hex>},
     "modules": {name: state_dict, ...}}
Each top-level entry in "modules" is a namespace (backbone_head, if_module,
codec, ...) so the same container carries every stage's parameters.
"""
from __future__ import annotations

import hashlib
import json
from typing import Iterable, Mapping

import torch
from torch import nn

CHECKPOINT_FORMAT = "oicm-checkpoint"
CHECKPOINT_VERSION = 1


def digest_tensors(named: Iterable[tuple[str, torch.Tensor]]) -> str:
    """SHA-256 over (name, dtype, shape, raw bytes) of each tensor, sorted by name.

    Stable across save/load round trips; changes iff any entry changes.
    """
    h = hashlib.sha256()
    for name, t in sorted(named, key=lambda kv: kv[0]):
        h.update(name.encode())
        data = t.detach().cpu().contiguous()
        h.update(str(data.dtype).encode())
        h.update(str(tuple(data.shape)).encode())
        h.update(data.numpy().tobytes())
    return h.hexdigest()


def digest_params(module: nn.Module, include_buffers: bool = False) -> str:
    """Digest a module's learnable parameters (optionally buffers too).

    Warm-up freeze checks use parameters only, since BatchNorm running stats
    update during any train-mode forward. Stage-2/3 freeze checks pass
    include_buffers=True; the frozen front end runs in eval mode so buffers
    cannot drift either.
    """
    entries = list(module.named_parameters())
    if include_buffers:
        entries += list(module.named_buffers())
    return digest_tensors(entries)


def config_hash(config: Mapping) -> str:
    """Deterministic hash of a JSON-serializable config mapping."""
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(path, modules: Mapping[str, nn.Module], manifest: Mapping | None = None):
    manifest = dict(manifest or {})
    manifest["config_hash"] = config_hash(manifest)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "manifest": manifest,
        "modules": {name: m.state_dict() for name, m in modules.items()},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not an oicm checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def load_module(module: nn.Module, payload: dict, name: str) -> nn.Module:
    module.load_state_dict(payload["modules"][name])
    return module
