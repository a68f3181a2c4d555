"""Versioned checkpoint container for denoisers and judges."""

from __future__ import annotations

import hashlib
from pathlib import Path

import torch
import torch.nn as nn

from .schedule import NoiseSchedule
from .unet import RemovalUNet

FORMAT = "eraser-checkpoint-v1"


def parameter_hash(module: nn.Module) -> str:
    """Order-stable sha256 over all parameter and buffer bytes."""
    h = hashlib.sha256()
    state = module.state_dict()
    for key in sorted(state):
        h.update(key.encode())
        h.update(state[key].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(
    path: str | Path,
    net: RemovalUNet,
    sched: NoiseSchedule,
    round_tag: str = "",
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "architecture": net.descriptor(),
        "schedule": sched.hyperparameters(),
        "round_tag": round_tag,
        "state_dict": {k: v.cpu() for k, v in net.state_dict().items()},
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[RemovalUNet, NoiseSchedule, dict]:
    """Returns (net, schedule, metadata) where metadata holds round_tag and extras."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} file")
    net = RemovalUNet.from_descriptor(payload["architecture"])
    net.load_state_dict(payload["state_dict"])
    sched = NoiseSchedule(**payload["schedule"])
    meta = {"round_tag": payload.get("round_tag", ""), **payload.get("extra", {})}
    return net, sched, meta
