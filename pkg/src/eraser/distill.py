"""Few-step consistency distillation of a trained remover.

Rank-64 low-rank adapters are attached to a frozen copy of the teacher; the
student's clean-image map at (t+k) is pulled toward the teacher's map at t,
where the teacher target comes from one deterministic DDIM hop of k
scheduler steps. Conditioning is the (masked source, mask) pair only; there
is no text pathway and no guidance branch.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoints import parameter_hash
from .diffusion import Conditioning, add_noise, consistency_f, ddim_step, images_to_batch, masks_to_batch
from .lora import (
    adapter_parameters,
    adapter_state_dict,
    attach_adapters,
    base_parameter_hash,
    load_adapter_state_dict,
    set_adapters_enabled,
)
from .schedule import ConsistencyScalings, NoiseSchedule, shifted_grid, timestep_grid
from .scenes import Triplet
from .unet import RemovalUNet


@dataclass
class DistillConfig:
    k: int = 20
    steps: int = 500
    teacher_steps: int = 50
    target_inference_steps: int = 4
    batch_size: int = 8
    learning_rate: float = 1e-3
    max_grad_norm: float = 1.0
    seed: int = 0
    # snapshot selection against a held-out validation slice: the returned
    # adapters are the iterate whose few-step sampler agrees best with the
    # teacher's reference trajectories (the untouched initial state counts
    # as a candidate). "last" returns the final iterate unconditionally.
    selection: str = "best"
    val_scenes: int = 16
    eval_every: int = 100

    def validate(self, T: int) -> "DistillConfig":
        if not (1 <= self.k <= T):
            raise ValueError(f"k must lie in [1, {T}]")
        if self.steps < 1 or self.teacher_steps < 1 or self.target_inference_steps < 1:
            raise ValueError("step counts must be >= 1")
        if self.selection not in ("best", "last"):
            raise ValueError("selection must be 'best' or 'last'")
        return self


class StudentAdapters:
    """A teacher copy with trainable adapters; the base stays frozen.

    With adapters disabled the forward pass is the teacher's, bitwise.
    """

    def __init__(self, teacher: RemovalUNet, rank: int = 64, init_seed: int = 0):
        self.net = copy.deepcopy(teacher)
        self.rank = rank
        self.wrappers = attach_adapters(self.net, rank=rank, init_seed=init_seed)
        self.base_hash = base_parameter_hash(self.net)
        self.teacher_hash = parameter_hash(teacher)

    def enable(self) -> None:
        set_adapters_enabled(self.net, True)

    def disable(self) -> None:
        set_adapters_enabled(self.net, False)

    def parameters(self):
        return adapter_parameters(self.net)

    def state_dict(self) -> dict:
        return adapter_state_dict(self.net)


def _guard(x0_hat: torch.Tensor, cond: Conditioning) -> torch.Tensor:
    """Same clean-estimate guards the deployed sampler applies."""
    x0_hat = x0_hat.clamp(0.0, 1.0)
    return cond.mask * x0_hat + (1.0 - cond.mask) * cond.masked_source


def eq4_loss(
    student: StudentAdapters,
    x_e: torch.Tensor,
    cond: Conditioning,
    eps: torch.Tensor,
    t_plus: int,
    k: int,
    sched: NoiseSchedule,
    scal: ConsistencyScalings,
    guard_targets: bool = True,
) -> torch.Tensor:
    """Distillation objective on one fixed batch.

    The teacher side (DDIM hop and target map) runs with adapters disabled
    and no gradient; only the student map sees the adapters. With
    ``guard_targets`` the teacher's clean estimates get the deployed
    sampler's guards (clamp to [0, 1], anchor the known region), which keeps
    targets bounded; the raw teacher's high-noise estimates are unbounded
    enough to destabilize long adapter training.
    """
    from .diffusion import predict_x0

    t_prev = max(t_plus - k, 0)
    x_noisy = add_noise(x_e, eps, t_plus, sched)
    with torch.no_grad():
        student.disable()
        if not guard_targets:
            x_prev = ddim_step(student.net, x_noisy, cond, t_plus, t_prev, sched) if t_prev < t_plus else x_noisy
            target = consistency_f(student.net, x_prev, cond, t_prev, sched, scal)
        else:
            if t_prev < t_plus:
                x0_hop, eps_hop = predict_x0(student.net, x_noisy, cond, t_plus, sched)
                x0_hop = _guard(x0_hop, cond)
                x_prev = float(sched.alpha[t_prev]) * x0_hop + float(sched.sigma[t_prev]) * eps_hop
            else:
                x_prev = x_noisy
            x0_tgt, _ = predict_x0(student.net, x_prev, cond, t_prev, sched)
            x0_tgt = _guard(x0_tgt, cond)
            c_skip = float(scal.c_skip(t_prev))
            c_out = float(scal.c_out(t_prev))
            target = c_skip * x_prev + c_out * x0_tgt
        student.enable()
    pred = consistency_f(student.net, x_noisy, cond, t_plus, sched, scal)
    return F.mse_loss(pred, target)


def distill(
    teacher: RemovalUNet,
    dataset: Sequence[Triplet],
    cfg: DistillConfig,
    sched: NoiseSchedule | None = None,
    scal: ConsistencyScalings | None = None,
) -> tuple[StudentAdapters, list[tuple[int, float]]]:
    """Train rank-64 adapters toward few-step consistency; returns (student, loss curve).

    With ``cfg.selection == "best"`` the returned adapters are the snapshot
    whose few-step sampling agrees best with the teacher's full trajectories
    on held-out scenes, evaluated every ``eval_every`` iterations with the
    zero-initialized state as the first candidate. At desk scale the
    self-consistency objective can trade away sampler quality, so the
    selection guards the deliverable the same way the judge keeps its
    best-precision checkpoint.
    """
    if len(dataset) == 0:
        raise ValueError("distillation dataset must be nonempty")
    sched = sched or NoiseSchedule()
    scal = scal or ConsistencyScalings.for_schedule(sched)
    cfg.validate(sched.T)

    student = StudentAdapters(teacher, rank=64, init_seed=cfg.seed)
    source = images_to_batch([t.source for t in dataset])
    mask = masks_to_batch([t.mask for t in dataset])
    removed = images_to_batch([t.removed for t in dataset])
    masked_source = source * (1.0 - mask)

    select = cfg.selection == "best" and len(dataset) > 1
    val_n = min(cfg.val_scenes, max(len(dataset) // 4, 1)) if select else 0
    val_src, val_mask, reference = None, None, None
    if select:
        from .diffusion import sample as _sample

        val_src, val_mask = source[:val_n], mask[:val_n]
        reference = _sample(student.net, val_src, val_mask, steps=cfg.teacher_steps, sched=sched, seed=cfg.seed)

    def validation_agreement() -> float:
        out = sample_student(
            student, val_src, val_mask, steps=cfg.target_inference_steps, sched=sched, scal=scal, seed=cfg.seed
        )
        sel = val_mask.expand_as(out) > 0
        return -float(((out - reference)[sel] ** 2).mean())

    best_score = validation_agreement() if select else None
    best_state = adapter_state_dict(student.net) if select else None

    grid = timestep_grid(sched.T, cfg.teacher_steps)
    starts = [int(t) for t in grid if t - cfg.k >= 0 and t > 0]
    if not starts:
        starts = [int(t) for t in grid if t > 0]

    opt = torch.optim.AdamW(student.parameters(), lr=cfg.learning_rate)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.Generator(np.random.PCG64(cfg.seed ^ 0x5F5F5F5F))
    n = removed.shape[0]
    curve: list[tuple[int, float]] = []

    for it in range(1, cfg.steps + 1):
        idx = torch.as_tensor(rng.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size))
        cond = Conditioning(masked_source=masked_source[idx], mask=mask[idx])
        x_e = removed[idx]
        t_plus = starts[int(rng.integers(len(starts)))]
        eps = torch.randn(x_e.shape, generator=gen)
        loss = eq4_loss(student, x_e, cond, eps, t_plus, cfg.k, sched, scal)
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite distillation loss at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        # the clean-image map amplifies gradients by c_out/alpha at high noise;
        # without clipping long runs destabilize
        torch.nn.utils.clip_grad_norm_(list(student.parameters()), cfg.max_grad_norm)
        opt.step()
        curve.append((it, float(loss.detach())))
        if select and (it % cfg.eval_every == 0 or it == cfg.steps):
            score = validation_agreement()
            if score > best_score:
                best_score = score
                best_state = adapter_state_dict(student.net)
    if select and best_state is not None:
        load_adapter_state_dict(student.net, best_state)
    student.enable()
    student.net.eval()
    return student, curve


def sample_student(
    student: StudentAdapters,
    source: torch.Tensor,
    mask: torch.Tensor,
    steps: int = 4,
    sched: NoiseSchedule | None = None,
    scal: ConsistencyScalings | None = None,
    seed: int = 0,
    anchor_known: bool = True,
    clamp_x0: bool = True,
) -> torch.Tensor:
    """Multistep consistency sampling: jump to a clean estimate, re-noise, repeat.

    Runs exactly ``steps`` network evaluations and is deterministic in
    ``seed``. The clean estimate gets the same guards as the teacher
    sampler: clip to [0, 1] and pin the unmasked region to the visible
    source before re-noising.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    sched = sched or NoiseSchedule()
    scal = scal or ConsistencyScalings.for_schedule(sched)
    student.enable()
    cond = Conditioning.from_source(source, mask)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(source.shape, generator=gen, dtype=source.dtype)
    grid = shifted_grid(sched.T, steps)
    x0 = x
    with torch.no_grad():
        for i, t in enumerate(grid[:-1]):
            x0 = consistency_f(student.net, x, cond, int(t), sched, scal)
            if clamp_x0:
                x0 = x0.clamp(0.0, 1.0)
            if anchor_known:
                x0 = cond.mask * x0 + (1.0 - cond.mask) * cond.masked_source
            t_next = int(grid[i + 1])
            if t_next > 0:
                eps = torch.randn(x.shape, generator=gen)
                x = add_noise(x0, eps, t_next, sched)
    return x0.clamp(0.0, 1.0)


def save_student(path: str | Path, student: StudentAdapters, cfg: DistillConfig | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": "eraser-adapters-v1",
            "rank": student.rank,
            "base_hash": student.base_hash,
            "teacher_hash": student.teacher_hash,
            "adapter_state": student.state_dict(),
            "config": vars(cfg) if cfg else {},
        },
        path,
    )
    return path


def load_student(path: str | Path, teacher: RemovalUNet) -> StudentAdapters:
    """Rebuild a student on ``teacher``; refuses a mismatched frozen base."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format") != "eraser-adapters-v1":
        raise ValueError(f"{path} is not an eraser-adapters-v1 file")
    if parameter_hash(teacher) != payload["teacher_hash"]:
        raise ValueError("adapter checkpoint does not belong to this teacher (hash mismatch)")
    student = StudentAdapters(teacher, rank=payload["rank"])
    load_adapter_state_dict(student.net, payload["adapter_state"])
    student.net.eval()
    return student
