"""Supervised fine-tuning of the removal denoiser on triplet datasets.

One round minimizes the noise-prediction loss E || eps - G(x_e^t, xbar_s, m, t) ||^2
with t uniform on [0, T] and unit-Gaussian eps. The loss trajectory is
deterministic under a fixed seed with single-worker batching.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoints import save_checkpoint
from .diffusion import DenoiserInput, add_noise, images_to_batch, masks_to_batch, predict_eps
from .schedule import NoiseSchedule
from .scenes import Triplet
from .unet import RemovalUNet


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    learning_rate: float = 5e-5
    seed: int = 0
    round_tag: str = ""
    ema_decay: float | None = None
    lr_schedule: str = "constant"
    checkpoint_path: str | None = None
    log_every: int = 50

    def validate(self) -> "TrainConfig":
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.ema_decay is not None and not (0.0 < self.ema_decay < 1.0):
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        return self


@dataclass
class TrainReport:
    loss_curve: list[tuple[int, float]]
    final_checkpoint: str
    wall_time: float
    round_tag: str = ""
    steps: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "round_tag": self.round_tag,
                "steps": self.steps,
                "wall_time": self.wall_time,
                "final_checkpoint": self.final_checkpoint,
                "loss_curve": self.loss_curve,
            },
            sort_keys=True,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


@dataclass
class TripletBatchTensors:
    """Dataset converted to tensors once; removal of per-step conversion cost."""

    removed: torch.Tensor
    masked_source: torch.Tensor
    mask: torch.Tensor

    @classmethod
    def from_triplets(cls, triplets: Sequence[Triplet]) -> "TripletBatchTensors":
        source = images_to_batch([t.source for t in triplets])
        mask = masks_to_batch([t.mask for t in triplets])
        removed = images_to_batch([t.removed for t in triplets])
        return cls(removed=removed, masked_source=source * (1.0 - mask), mask=mask)

    def __len__(self) -> int:
        return self.removed.shape[0]


def eq1_loss(
    net: torch.nn.Module,
    x_e: torch.Tensor,
    masked_source: torch.Tensor,
    mask: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """The training objective on one fixed batch (pure in batch and parameters)."""
    x_t = add_noise(x_e, eps, t, sched)
    pred = predict_eps(net, DenoiserInput(noisy=x_t, masked_source=masked_source, mask=mask, t=t))
    return F.mse_loss(pred, eps)


def run_training(
    dataset: Sequence[Triplet],
    net: RemovalUNet,
    cfg: TrainConfig,
    sched: NoiseSchedule | None = None,
) -> TrainReport:
    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    cfg.validate()
    sched = sched or NoiseSchedule()
    data = TripletBatchTensors.from_triplets(dataset)
    n = len(data)

    opt = torch.optim.AdamW(net.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999))
    noise_gen = torch.Generator().manual_seed(cfg.seed)
    idx_rng = np.random.Generator(np.random.PCG64(cfg.seed ^ 0xA5A5A5A5))
    ema = (
        {k: v.detach().clone() for k, v in net.state_dict().items()}
        if cfg.ema_decay is not None
        else None
    )

    curve: list[tuple[int, float]] = []
    start = time.perf_counter()
    net.train()
    for step in range(1, cfg.steps + 1):
        idx = idx_rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size)
        idx_t = torch.as_tensor(idx, dtype=torch.long)
        x_e = data.removed[idx_t]
        xbar = data.masked_source[idx_t]
        m = data.mask[idx_t]
        assert (xbar * m).abs().max().item() == 0.0, "masked source leaked into the mask"

        t = torch.randint(0, sched.T + 1, (cfg.batch_size,), generator=noise_gen)
        eps = torch.randn(x_e.shape, generator=noise_gen)
        loss = eq1_loss(net, x_e, xbar, m, t, eps, sched)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite loss at step {step}")
        if cfg.lr_schedule == "cosine":
            scale = 0.5 * (1.0 + np.cos(np.pi * (step - 1) / cfg.steps))
            for group in opt.param_groups:
                group["lr"] = cfg.learning_rate * max(scale, 0.05)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if ema is not None:
            with torch.no_grad():
                for k, v in net.state_dict().items():
                    if v.dtype.is_floating_point:
                        ema[k].mul_(cfg.ema_decay).add_(v, alpha=1.0 - cfg.ema_decay)
                    else:
                        ema[k].copy_(v)
        curve.append((step, float(loss.detach())))

    if ema is not None:
        net.load_state_dict(ema)
    net.eval()
    wall = time.perf_counter() - start

    ckpt = ""
    if cfg.checkpoint_path:
        save_checkpoint(cfg.checkpoint_path, net, sched, round_tag=cfg.round_tag)
        ckpt = str(cfg.checkpoint_path)
    return TrainReport(
        loss_curve=curve, final_checkpoint=ckpt, wall_time=wall, round_tag=cfg.round_tag, steps=cfg.steps
    )


def train_round(
    dataset: Sequence[Triplet],
    init: RemovalUNet,
    cfg: TrainConfig,
    sched: NoiseSchedule | None = None,
) -> TrainReport:
    """One supervised round over the current triplet dataset."""
    return run_training(dataset, init, cfg, sched)


def finalize_quality_finetune(
    dataset: Sequence[Triplet],
    init: RemovalUNet,
    cfg: TrainConfig,
    sched: NoiseSchedule | None = None,
) -> TrainReport:
    """Final fine-tune on the curated high-quality split; report tagged "final"."""
    if len(dataset) == 0:
        raise ValueError("curated split must be nonempty")
    cfg = TrainConfig(**{**vars(cfg), "round_tag": "final"})
    return run_training(dataset, init, cfg, sched)
