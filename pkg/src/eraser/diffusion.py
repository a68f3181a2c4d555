"""Forward noising, conditional denoising, DDIM sampling and the
consistency-function parameterization.

All tensor operations are batched torch; conversion helpers at the bottom
bridge to the (H, W, C) float numpy convention used elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .schedule import ConsistencyScalings, NoiseSchedule, timestep_grid


@dataclass
class Conditioning:
    """The fixed per-image context: masked source and removal mask."""

    masked_source: torch.Tensor
    mask: torch.Tensor

    def validate(self) -> "Conditioning":
        if self.masked_source.shape[-2:] != self.mask.shape[-2:]:
            raise ValueError("masked_source and mask spatial shapes disagree")
        if self.mask.shape[1] != 1 or self.masked_source.shape[1] != 3:
            raise ValueError("expected mask (B,1,H,W) and masked_source (B,3,H,W)")
        inside = self.masked_source * self.mask
        if inside.abs().max() != 0:
            raise ValueError("masked_source must be exactly zero inside the mask")
        return self

    @classmethod
    def from_source(cls, source: torch.Tensor, mask: torch.Tensor) -> "Conditioning":
        return cls(masked_source=source * (1.0 - mask), mask=mask).validate()


@dataclass
class DenoiserInput:
    """One denoiser evaluation: noisy image, conditioning, timestep."""

    noisy: torch.Tensor
    masked_source: torch.Tensor
    mask: torch.Tensor
    t: torch.Tensor

    def validate(self, sched: NoiseSchedule | None = None) -> "DenoiserInput":
        shapes = {self.noisy.shape[-2:], self.masked_source.shape[-2:], self.mask.shape[-2:]}
        if len(shapes) != 1:
            raise ValueError("all spatial shapes must be equal")
        Conditioning(self.masked_source, self.mask).validate()
        if sched is not None:
            sched.check_t(self.t.detach().cpu().numpy())
        return self


def _coef(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Gather schedule coefficients at t, broadcastable over an image batch."""
    table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    t = t if isinstance(t, torch.Tensor) else torch.as_tensor(t, device=like.device)
    c = table[t.long()]
    while c.dim() < like.dim():
        c = c.unsqueeze(-1)
    return c


def add_noise(x_e: torch.Tensor, eps: torch.Tensor, t, sched: NoiseSchedule) -> torch.Tensor:
    """Forward noising: alpha_t * x_e + sigma_t * eps."""
    sched.check_t(np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t))
    if x_e.shape != eps.shape:
        raise ValueError("x_e and eps shapes must match")
    t = t if isinstance(t, torch.Tensor) else torch.as_tensor(t)
    return _coef(sched.alpha, t, x_e) * x_e + _coef(sched.sigma, t, x_e) * eps


def predict_eps(net: nn.Module, inp: DenoiserInput) -> torch.Tensor:
    """Run the denoiser on the channel concatenation [noisy || masked_source || mask]."""
    inp.validate()
    x = torch.cat([inp.noisy, inp.masked_source, inp.mask], dim=1)
    t = inp.t if isinstance(inp.t, torch.Tensor) else torch.as_tensor(inp.t, device=x.device)
    return net(x, t)


def predict_x0(net: nn.Module, x_t: torch.Tensor, cond: Conditioning, t, sched: NoiseSchedule):
    """Epsilon prediction converted to a clean-image estimate; returns (x0_hat, eps_hat)."""
    t_t = t if isinstance(t, torch.Tensor) else torch.as_tensor(t)
    if t_t.dim() == 0:
        t_t = t_t.expand(x_t.shape[0])
    eps_hat = predict_eps(net, DenoiserInput(x_t, cond.masked_source, cond.mask, t_t))
    a = _coef(sched.alpha, t_t, x_t)
    s = _coef(sched.sigma, t_t, x_t)
    return (x_t - s * eps_hat) / a, eps_hat


def ddim_step(
    net: nn.Module,
    x_t: torch.Tensor,
    cond: Conditioning,
    t: int,
    t_prev: int,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """One deterministic DDIM update from t to t_prev (eta = 0)."""
    if not (0 <= t_prev < t <= sched.T):
        raise ValueError(f"need 0 <= t_prev < t <= T, got t={t}, t_prev={t_prev}")
    x0_hat, eps_hat = predict_x0(net, x_t, cond, t, sched)
    a_p = float(sched.alpha[t_prev])
    s_p = float(sched.sigma[t_prev])
    return a_p * x0_hat + s_p * eps_hat


def sample(
    net: nn.Module,
    source: torch.Tensor,
    mask: torch.Tensor,
    steps: int,
    sched: NoiseSchedule,
    seed: int = 0,
    clamp: bool = True,
    anchor_known: bool = True,
    clamp_x0: bool = True,
    renoise: bool = True,
) -> torch.Tensor:
    """Sample edited images from pure noise, conditioned on (masked source, mask).

    Deterministic in ``seed``; the trajectory is clamped to [0, 1] only at
    the end. Each update estimates the clean image via the denoiser, then
    re-noises it to the next node of the uniform timestep grid. Three guards
    steer the estimate, all defaulting on because small pixel-space
    denoisers are too inaccurate at high noise for the unguarded trajectory
    to stay on-distribution:

    - ``clamp_x0``: clip the clean estimate to the valid pixel range;
    - ``anchor_known``: pin its unmasked region to the visible source,
      whose true value the inpainting sampler knows exactly;
    - ``renoise``: re-noise with fresh seed-derived Gaussian noise instead
      of the model's own noise estimate, which keeps every intermediate
      state on the training distribution rather than compounding model
      error through the noise slot.

    With all three off the loop is the textbook composition of ddim_step.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cond = Conditioning.from_source(source, mask)
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(source.shape, generator=gen, dtype=source.dtype)
    grid = timestep_grid(sched.T, steps)
    with torch.no_grad():
        for t, t_prev in zip(grid[:-1], grid[1:]):
            if not (anchor_known or clamp_x0 or renoise):
                x = ddim_step(net, x, cond, int(t), int(t_prev), sched)
                continue
            x0_hat, eps_hat = predict_x0(net, x, cond, int(t), sched)
            if clamp_x0:
                x0_hat = x0_hat.clamp(0.0, 1.0)
            if anchor_known:
                x0_hat = cond.mask * x0_hat + (1.0 - cond.mask) * cond.masked_source
            tp = int(t_prev)
            if renoise:
                if tp > 0:
                    fresh = torch.randn(x.shape, generator=gen, dtype=x.dtype)
                    x = float(sched.alpha[tp]) * x0_hat + float(sched.sigma[tp]) * fresh
                else:
                    x = x0_hat
            else:
                x = float(sched.alpha[tp]) * x0_hat + float(sched.sigma[tp]) * eps_hat
    return x.clamp(0.0, 1.0) if clamp else x


def consistency_f(
    net: nn.Module,
    x_t: torch.Tensor,
    cond: Conditioning,
    t,
    sched: NoiseSchedule,
    scal: ConsistencyScalings,
) -> torch.Tensor:
    """Clean-image map f(x, t) = c_skip(t) * x + c_out(t) * (x - sigma_t * eps_hat) / alpha_t."""
    t_t = t if isinstance(t, torch.Tensor) else torch.as_tensor(t)
    if t_t.dim() == 0:
        t_t = t_t.expand(x_t.shape[0])
    t_np = t_t.detach().cpu().numpy()
    sched.check_t(t_np)
    x0_hat, _ = predict_x0(net, x_t, cond, t_t, sched)
    view = (-1,) + (1,) * (x_t.dim() - 1)
    c_skip = torch.as_tensor(scal.c_skip(t_np), dtype=x_t.dtype, device=x_t.device).view(view)
    c_out = torch.as_tensor(scal.c_out(t_np), dtype=x_t.dtype, device=x_t.device).view(view)
    return c_skip * x_t + c_out * x0_hat


class OracleDenoiser(nn.Module):
    """Denoiser that returns a stored noise field regardless of input.

    Closes the add_noise/ddim loop analytically, which makes exact sampler
    checks possible.
    """

    def __init__(self, eps: torch.Tensor):
        super().__init__()
        self.eps = eps
        self.nfe_count = 0

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        self.nfe_count += 1
        return self.eps.expand(x.shape[0], *self.eps.shape[-3:]).to(x.dtype)


def images_to_batch(images, device: str = "cpu") -> torch.Tensor:
    """Stack (H, W, 3) float images into a (B, 3, H, W) tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(device)


def masks_to_batch(masks, device: str = "cpu") -> torch.Tensor:
    """Stack (H, W) masks into a (B, 1, H, W) tensor."""
    arr = np.stack([np.asarray(m, dtype=np.float32) for m in masks])
    return torch.from_numpy(arr).unsqueeze(1).contiguous().to(device)


def batch_to_images(batch: torch.Tensor) -> list[np.ndarray]:
    """Inverse of images_to_batch."""
    return [x for x in batch.detach().cpu().permute(0, 2, 3, 1).numpy()]
