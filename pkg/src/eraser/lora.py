"""Additive low-rank adapters on conv / linear kernels.

The wrapped layer computes with ``W + scale * (up @ down)`` reshaped to the
kernel; ``up`` starts at zero so a freshly attached adapter reproduces the
base layer exactly, and disabling adapters short-circuits to the original
weights bitwise.
"""

from __future__ import annotations

import hashlib
import math

import torch
import torch.nn as nn
import torch.nn.functional as F


class LoRAWrapper(nn.Module):
    """Wraps Conv2d, ConvTranspose2d or Linear with an additive low-rank delta."""

    def __init__(self, base: nn.Module, rank: int, scale: float = 1.0, init_seed: int = 0):
        super().__init__()
        if not isinstance(base, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            raise TypeError(f"cannot attach low-rank adapter to {type(base).__name__}")
        if rank < 1:
            raise ValueError("rank must be >= 1")
        self.base = base
        self.rank = rank
        self.scale = scale
        w = base.weight
        fan = w[0].numel()
        gen = torch.Generator().manual_seed(init_seed)
        self.down = nn.Parameter(torch.randn(rank, fan, generator=gen, dtype=w.dtype) / math.sqrt(fan))
        self.up = nn.Parameter(torch.zeros(w.shape[0], rank, dtype=w.dtype))
        self.enabled = True

    def effective_weight(self) -> torch.Tensor:
        w = self.base.weight
        if not self.enabled:
            return w
        return w + self.scale * (self.up @ self.down).view_as(w)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b = self.base
        w = self.effective_weight()
        if isinstance(b, nn.Conv2d):
            return F.conv2d(x, w, b.bias, b.stride, b.padding, b.dilation, b.groups)
        if isinstance(b, nn.ConvTranspose2d):
            return F.conv_transpose2d(
                x, w, b.bias, b.stride, b.padding, b.output_padding, b.groups, b.dilation
            )
        return F.linear(x, w, b.bias)


def attach_adapters(root: nn.Module, rank: int, scale: float = 1.0, init_seed: int = 0) -> list[LoRAWrapper]:
    """Wrap every Conv2d / ConvTranspose2d under ``root`` in place.

    Returns the wrappers; base parameters are frozen as a side effect so an
    optimizer over ``adapter_parameters(root)`` is the only writer.
    """
    wrappers: list[LoRAWrapper] = []
    for module in list(root.modules()):
        if isinstance(module, LoRAWrapper):
            continue
        for name, child in list(module.named_children()):
            if isinstance(child, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)) and not isinstance(child, LoRAWrapper):
                wrapper = LoRAWrapper(child, rank=rank, scale=scale, init_seed=init_seed + len(wrappers))
                setattr(module, name, wrapper)
                wrappers.append(wrapper)
    for name, p in root.named_parameters():
        if not (name.endswith(".down") or name.endswith(".up")):
            p.requires_grad_(False)
    return wrappers


def set_adapters_enabled(root: nn.Module, enabled: bool) -> None:
    for m in root.modules():
        if isinstance(m, LoRAWrapper):
            m.enabled = enabled


def adapter_parameters(root: nn.Module):
    for name, p in root.named_parameters():
        if name.endswith(".down") or name.endswith(".up"):
            yield p


def adapter_state_dict(root: nn.Module) -> dict[str, torch.Tensor]:
    return {
        k: v.detach().clone()
        for k, v in root.state_dict().items()
        if k.endswith(".down") or k.endswith(".up")
    }


def load_adapter_state_dict(root: nn.Module, state: dict[str, torch.Tensor]) -> None:
    missing = [k for k in state if k not in dict(root.named_parameters())]
    if missing:
        raise ValueError(f"adapter state does not match module layout: {missing[:4]}")
    root.load_state_dict(state, strict=False)


def base_parameter_hash(root: nn.Module) -> str:
    """Hash of the non-adapter state, with wrapper path segments normalized.

    Matches ``checkpoints.parameter_hash`` of the unwrapped module, so
    adapter checkpoints can record which frozen base they belong to.
    """
    h = hashlib.sha256()
    state = root.state_dict()
    items = {
        k.replace(".base.", "."): v
        for k, v in state.items()
        if not (k.endswith(".down") or k.endswith(".up"))
    }
    for key in sorted(items):
        h.update(key.encode())
        h.update(items[key].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
