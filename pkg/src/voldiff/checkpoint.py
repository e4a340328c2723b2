"""Checkpoint container: a single archive holding named parameter tensors,
config snapshot, training-step counter, stage flag, and arbitrary extras
(codebook usage, latent statistics, RNG states). Content hashes are computed
over the tensor payloads and config so downstream runs can verify provenance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .errors import CheckpointError


@dataclass
class Checkpoint:
    tensors: dict  # name -> torch.Tensor
    config: dict
    step: int = 0
    stage: int | None = None
    extras: dict = field(default_factory=dict)

    @property
    def content_hash(self) -> str:
        return hash_tensors(self.tensors, self.config)


def hash_tensors(tensors: dict, config: dict | None = None) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name]
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    if config is not None:
        h.update(json.dumps(config, sort_keys=True, default=str).encode())
    return h.hexdigest()


def module_param_hash(module: torch.nn.Module) -> str:
    """Hash of a module's parameters only (buffers excluded)."""
    return hash_tensors(dict(module.named_parameters()))


def save_checkpoint(path, ckpt: Checkpoint) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "tensors": {k: v.detach().cpu() for k, v in ckpt.tensors.items()},
        "config": ckpt.config,
        "step": ckpt.step,
        "stage": ckpt.stage,
        "extras": ckpt.extras,
        "content_hash": ckpt.content_hash,
    }
    torch.save(payload, path)
    return payload["content_hash"]


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # noqa: BLE001
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    for key in ("tensors", "config", "step"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} missing field '{key}'")
    ckpt = Checkpoint(
        tensors=payload["tensors"],
        config=payload["config"],
        step=int(payload["step"]),
        stage=payload.get("stage"),
        extras=payload.get("extras", {}),
    )
    stored = payload.get("content_hash")
    if stored is not None and stored != ckpt.content_hash:
        raise CheckpointError(f"checkpoint {path} failed its content-hash check")
    return ckpt
