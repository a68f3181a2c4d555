"""Small pixel-space U-Net used as the conditional denoiser.

Input is the 7-channel concatenation [noisy || masked source || mask]; the
output predicts the injected noise (3 channels). Three resolutions with
configurable widths and a sinusoidal timestep embedding. ``nfe_count``
tracks forward evaluations so samplers' step-count claims are checkable.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

IN_CHANNELS = 7
OUT_CHANNELS = 3


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half
    )
    ang = t[:, None].to(freqs) * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


def _groups(channels: int, preferred: int = 8) -> int:
    g = math.gcd(channels, preferred)
    return max(g, 1)


class ConvBlock(nn.Module):
    """conv-norm-silu twice, with the time embedding added between."""

    def __init__(self, cin: int, cout: int, time_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.time = nn.Linear(time_dim, cout)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.norm1(self.conv1(x)))
        h = h + self.time(temb)[:, :, None, None]
        h = F.silu(self.norm2(self.conv2(h)))
        return h + self.skip(x)


class RemovalUNet(nn.Module):
    """Three-resolution conditional epsilon predictor."""

    def __init__(self, channels: tuple[int, int, int] = (32, 64, 128), time_dim: int = 128):
        super().__init__()
        c0, c1, c2 = channels
        self.channels = tuple(channels)
        self.time_dim = time_dim
        self.time_mlp = nn.Sequential(nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.enc0 = ConvBlock(IN_CHANNELS, c0, time_dim)
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = ConvBlock(c1, c1, time_dim)
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.mid = ConvBlock(c2, c2, time_dim)
        self.up1 = nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1)
        self.dec1 = ConvBlock(c1 + c1, c1, time_dim)
        self.up2 = nn.ConvTranspose2d(c1, c0, 4, stride=2, padding=1)
        self.dec0 = ConvBlock(c0 + c0, c0, time_dim)
        self.out = nn.Conv2d(c0, OUT_CHANNELS, 3, padding=1)
        self.nfe_count = 0

    def descriptor(self) -> dict:
        return {"kind": "removal-unet-v1", "channels": list(self.channels), "time_dim": self.time_dim}

    @classmethod
    def from_descriptor(cls, desc: dict) -> "RemovalUNet":
        if desc.get("kind") != "removal-unet-v1":
            raise ValueError(f"unknown architecture descriptor {desc.get('kind')!r}")
        return cls(channels=tuple(desc["channels"]), time_dim=int(desc["time_dim"]))

    def encoder_modules(self) -> nn.ModuleDict:
        """Down + middle stages, reused as the judge backbone."""
        return nn.ModuleDict(
            {"enc0": self.enc0, "down1": self.down1, "enc1": self.enc1, "down2": self.down2, "mid": self.mid}
        )

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != IN_CHANNELS:
            raise ValueError(f"expected {IN_CHANNELS} input channels, got {x.shape[1]}")
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError("spatial dims must be divisible by 4")
        self.nfe_count += 1
        if t.dim() == 0:
            t = t.expand(x.shape[0])
        temb = self.time_mlp(sinusoidal_embedding(t.to(x.dtype), self.time_dim))
        h0 = self.enc0(x, temb)
        h1 = self.enc1(self.down1(h0), temb)
        h2 = self.mid(self.down2(h1), temb)
        u1 = self.dec1(torch.cat([self.up1(h2), h1], dim=1), temb)
        u0 = self.dec0(torch.cat([self.up2(u1), h0], dim=1), temb)
        return self.out(u0)
