import dataclasses

import numpy as np
import pytest
import torch

from eraser import (
    Conditioning,
    DenoiserInput,
    OracleDenoiser,
    RemovalUNet,
    add_noise,
    consistency_f,
    ddim_step,
    predict_eps,
    sample,
)
from eraser.diffusion import batch_to_images, images_to_batch, masks_to_batch
from eraser.schedule import NoiseSchedule


def _cond(b=2, n=16, dtype=torch.float64):
    gen = torch.Generator().manual_seed(5)
    src = torch.rand(b, 3, n, n, generator=gen, dtype=dtype)
    msk = torch.zeros(b, 1, n, n, dtype=dtype)
    msk[:, :, 4:9, 5:10] = 1.0
    return Conditioning.from_source(src, msk)


def test_add_noise_identity_at_t0(sched):
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    eps = torch.randn(2, 3, 8, 8, dtype=torch.float64)
    assert torch.equal(add_noise(x, eps, 0, sched), x)


def test_add_noise_constant_example():
    # alpha = 0.8, sigma = 0.6 on a patched grid point: 0.8*0.5 + 0.6*1.0 = 1.0
    sched = NoiseSchedule(T=10)
    alpha = sched.alpha.copy()
    sigma = sched.sigma.copy()
    alpha[5], sigma[5] = 0.8, 0.6
    object.__setattr__(sched, "alpha", alpha)
    object.__setattr__(sched, "sigma", sigma)
    x = torch.full((1, 3, 4, 4), 0.5, dtype=torch.float64)
    eps = torch.ones(1, 3, 4, 4, dtype=torch.float64)
    out = add_noise(x, eps, 5, sched)
    assert torch.allclose(out, torch.ones_like(out))


def test_add_noise_t_out_of_range(sched):
    x = torch.rand(1, 3, 4, 4)
    with pytest.raises(ValueError):
        add_noise(x, x, sched.T + 1, sched)


def test_add_noise_shape_mismatch(sched):
    with pytest.raises(ValueError):
        add_noise(torch.rand(1, 3, 4, 4), torch.rand(1, 3, 8, 8), 5, sched)


def test_add_noise_monte_carlo_mean(sched):
    # E[x_t] = alpha_t * x_e; the sample mean over 10^4 draws stays within
    # 4 sigma_t / sqrt(10^4) of it per pixel
    t = 600
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(1, 3, 4, 4, generator=gen, dtype=torch.float64)
    n = 10_000
    eps = torch.randn(n, 3, 4, 4, generator=gen, dtype=torch.float64)
    noisy = add_noise(x.expand(n, -1, -1, -1), eps, torch.full((n,), t), sched)
    mean = noisy.mean(dim=0)
    band = 4.0 * float(sched.sigma[t]) / np.sqrt(n)
    assert (mean - float(sched.alpha[t]) * x[0]).abs().max() <= band


def test_predict_eps_contract(sched, tiny_net):
    cond = _cond(dtype=torch.float32)
    x = torch.randn(2, 3, 16, 16)
    inp = DenoiserInput(noisy=x, masked_source=cond.masked_source, mask=cond.mask, t=torch.tensor([3, 500]))
    out1 = predict_eps(tiny_net, inp)
    out2 = predict_eps(tiny_net, inp)
    assert out1.shape == x.shape
    assert torch.equal(out1, out2)


def test_predict_eps_fresh_net_finite_on_zero_input():
    torch.manual_seed(1)
    net = RemovalUNet(channels=(8, 16, 32), time_dim=32)
    zeros = torch.zeros(1, 3, 16, 16)
    inp = DenoiserInput(noisy=zeros, masked_source=zeros, mask=torch.zeros(1, 1, 16, 16), t=torch.tensor([0]))
    out = predict_eps(net, inp)
    assert torch.isfinite(out).all()


def test_denoiser_input_rejects_leaky_masked_source():
    src = torch.rand(1, 3, 8, 8)
    msk = torch.zeros(1, 1, 8, 8)
    msk[:, :, 2:4, 2:4] = 1.0
    with pytest.raises(ValueError):
        DenoiserInput(noisy=src, masked_source=src, mask=msk, t=torch.tensor([1])).validate()


def test_unet_rejects_wrong_channels():
    net = RemovalUNet(channels=(8, 16, 32), time_dim=32)
    with pytest.raises(ValueError):
        net(torch.rand(1, 3, 16, 16), torch.tensor([1]))


def test_ddim_step_oracle_closed_form(sched):
    gen = torch.Generator().manual_seed(2)
    x_e = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    oracle = OracleDenoiser(eps)
    cond = _cond()
    for t, t_prev in ((1000, 750), (800, 300), (123, 0)):
        x_t = add_noise(x_e, eps, t, sched)
        stepped = ddim_step(oracle, x_t, cond, t, t_prev, sched)
        target = add_noise(x_e, eps, t_prev, sched)
        rel = (stepped - target).abs().max() / target.abs().max()
        assert rel < 1e-6


def test_ddim_step_tprev0_returns_x0(sched):
    gen = torch.Generator().manual_seed(3)
    eps = torch.randn(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    oracle = OracleDenoiser(eps)
    cond = _cond(b=1)
    x_t = torch.randn(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    out = ddim_step(oracle, x_t, cond, 700, 0, sched)
    x0 = (x_t - float(sched.sigma[700]) * eps) / float(sched.alpha[700])
    assert torch.allclose(out, x0, atol=1e-12)


def test_ddim_chaining_equals_direct(sched):
    gen = torch.Generator().manual_seed(4)
    x_e = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    eps = torch.randn(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    oracle = OracleDenoiser(eps)
    cond = _cond(b=1)
    x_t = add_noise(x_e, eps, 900, sched)
    direct = ddim_step(oracle, x_t, cond, 900, 300, sched)
    mid = ddim_step(oracle, x_t, cond, 900, 600, sched)
    chained = ddim_step(oracle, mid, cond, 600, 300, sched)
    assert (chained - direct).abs().max() < 1e-12


def test_ddim_step_order_validation(sched, tiny_net):
    cond = _cond(dtype=torch.float32)
    x = torch.randn(2, 3, 16, 16)
    with pytest.raises(ValueError):
        ddim_step(tiny_net, x, cond, 100, 100, sched)
    with pytest.raises(ValueError):
        ddim_step(tiny_net, x, cond, 100, 200, sched)


def test_sample_deterministic(sched, tiny_net):
    cond = _cond(dtype=torch.float32)
    a = sample(tiny_net, cond.masked_source, cond.mask, steps=4, sched=sched, seed=7)
    b = sample(tiny_net, cond.masked_source, cond.mask, steps=4, sched=sched, seed=7)
    assert torch.equal(a, b)
    c = sample(tiny_net, cond.masked_source, cond.mask, steps=4, sched=sched, seed=8)
    assert not torch.equal(a, c)


def test_sample_single_step_is_x0(sched):
    gen = torch.Generator().manual_seed(6)
    eps = torch.randn(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    oracle = OracleDenoiser(eps)
    src = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    msk = torch.zeros(1, 1, 16, 16, dtype=torch.float64)
    msk[:, :, 4:8, 4:8] = 1.0
    out = sample(oracle, src, msk, steps=1, sched=sched, seed=11, anchor_known=False, clamp_x0=False, renoise=False)
    start = torch.randn(src.shape, generator=torch.Generator().manual_seed(11), dtype=src.dtype)
    x0 = (start - float(sched.sigma[sched.T]) * eps) / float(sched.alpha[sched.T])
    assert torch.equal(out, x0.clamp(0.0, 1.0))


def test_unguarded_sample_equals_ddim_composition(sched, tiny_net):
    from eraser.schedule import timestep_grid

    cond = _cond(dtype=torch.float32)
    out = sample(tiny_net, cond.masked_source, cond.mask, steps=3, sched=sched, seed=5,
                 anchor_known=False, clamp_x0=False, renoise=False, clamp=False)
    x = torch.randn(cond.masked_source.shape, generator=torch.Generator().manual_seed(5))
    grid = timestep_grid(sched.T, 3)
    with torch.no_grad():
        for t, tp in zip(grid[:-1], grid[1:]):
            x = ddim_step(tiny_net, x, cond, int(t), int(tp), sched)
    assert torch.equal(out, x)


def test_anchored_sample_pins_unmasked_region(sched, tiny_net):
    cond = _cond(dtype=torch.float32)
    out = sample(tiny_net, cond.masked_source, cond.mask, steps=3, sched=sched, seed=5)
    off = cond.mask == 0
    expanded = off.expand_as(out)
    assert torch.equal(out[expanded], cond.masked_source[expanded])


def test_sample_output_clamped(sched, tiny_net):
    cond = _cond(dtype=torch.float32)
    out = sample(tiny_net, cond.masked_source, cond.mask, steps=2, sched=sched, seed=0)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_sample_nfe_equals_steps(sched, tiny_net):
    cond = _cond(dtype=torch.float32)
    tiny_net.nfe_count = 0
    sample(tiny_net, cond.masked_source, cond.mask, steps=6, sched=sched, seed=0)
    assert tiny_net.nfe_count == 6


def test_consistency_identity_at_t0(sched, scal, tiny_net):
    cond = _cond(dtype=torch.float32)
    x = torch.randn(2, 3, 16, 16)
    out = consistency_f(tiny_net, x, cond, 0, sched, scal)
    assert torch.equal(out, x)


def test_consistency_oracle_form(sched, scal):
    gen = torch.Generator().manual_seed(8)
    x_e = torch.rand(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    eps = torch.randn(2, 3, 16, 16, generator=gen, dtype=torch.float64)
    oracle = OracleDenoiser(eps)
    cond = _cond()
    for t in (100, 640, 1000):
        x_t = add_noise(x_e, eps, t, sched)
        f = consistency_f(oracle, x_t, cond, t, sched, scal)
        expected = scal.c_skip(t) * x_t + scal.c_out(t) * x_e
        assert (f - expected).abs().max() < 1e-10


def test_batch_conversion_roundtrip():
    imgs = [np.random.default_rng(i).random((8, 8, 3)).astype(np.float32) for i in range(3)]
    back = batch_to_images(images_to_batch(imgs))
    for a, b in zip(imgs, back):
        assert np.array_equal(a, b)
    masks = [(np.random.default_rng(9).random((8, 8)) > 0.5).astype(np.float32)]
    m = masks_to_batch(masks)
    assert m.shape == (1, 1, 8, 8)


def test_conditioning_from_source_zeroes_mask_region():
    src = torch.rand(1, 3, 8, 8)
    msk = torch.zeros(1, 1, 8, 8)
    msk[:, :, :4] = 1.0
    cond = Conditioning.from_source(src, msk)
    assert (cond.masked_source * msk).abs().max() == 0.0
