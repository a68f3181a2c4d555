import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eraser import Triplet, composite_over_source, forge_random_triplet, oracle_success, psnr
from eraser.metrics import PSNR_CAP_DB


def _img(seed=0, n=16):
    return np.random.default_rng(seed).random((n, n, 3)).astype(np.float32)


def test_psnr_identical_capped():
    a = _img()
    assert psnr(a, a) == PSNR_CAP_DB


def test_psnr_constant_offset():
    # both images on the 8-bit grid, differing by 16/255 everywhere:
    # oracle value 20*log10(255/16) = 24.0484 dB
    a = np.full((8, 8, 3), 32 / 255, dtype=np.float32)
    b = np.full((8, 8, 3), 48 / 255, dtype=np.float32)
    expected = 20.0 * math.log10(255.0 / 16.0)
    assert psnr(a, b) == pytest.approx(expected, abs=1e-6)
    assert expected == pytest.approx(24.0484, abs=5e-4)


def test_psnr_symmetry():
    a, b = _img(1), _img(2)
    assert psnr(a, b) == pytest.approx(psnr(b, a), rel=1e-12)


def test_psnr_region_offmask_capped():
    t = forge_random_triplet(3, image_size=32)
    region = 1.0 - t.mask
    assert psnr(t.source, t.removed, region=region) == PSNR_CAP_DB


def test_psnr_empty_region_rejected():
    a = _img()
    with pytest.raises(ValueError):
        psnr(a, a, region=np.zeros((16, 16), dtype=np.float32))


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(_img(0, 16), _img(0, 8))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), amp1=st.floats(0.01, 0.05), amp2=st.floats(0.06, 0.2))
def test_psnr_decreases_with_noise(seed, amp1, amp2):
    rng = np.random.default_rng(seed)
    a = np.clip(rng.random((12, 12, 3)), 0.25, 0.75).astype(np.float32)
    n = rng.standard_normal((12, 12, 3))
    b1 = np.clip(a + amp1 * n, 0, 1).astype(np.float32)
    b2 = np.clip(a + amp2 * n, 0, 1).astype(np.float32)
    assert psnr(a, b1) > psnr(a, b2)


def test_psnr_matches_direct_formula():
    a, b = _img(5), _img(6)
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    assert psnr(a, b) == pytest.approx(10 * math.log10(1.0 / mse), rel=1e-9)


def test_oracle_success_perfect_edit():
    t = forge_random_triplet(11, image_size=32)
    assert oracle_success(t.removed, t, tau_mask=99.0, tau_keep=99.0)


def test_oracle_success_nochange_fails():
    # the unedited source keeps the object; enforced color contrast puts the
    # masked-region PSNR far below the 20 dB bar
    for seed in (1, 12, 23):
        t = forge_random_triplet(seed, image_size=32)
        inside = psnr(t.source, t.removed, region=t.mask)
        assert inside < 20.0
        assert not oracle_success(t.source, t, tau_mask=20.0, tau_keep=30.0)


def test_oracle_success_vacuous_thresholds():
    t = forge_random_triplet(13, image_size=32)
    assert oracle_success(t.source, t, tau_mask=0.0, tau_keep=0.0)


def test_composite_restores_unmasked_region():
    t = forge_random_triplet(17, image_size=32)
    garbage = np.clip(t.removed + 0.3, 0, 1).astype(np.float32)
    comp = composite_over_source(garbage, t.source, t.mask)
    off = t.mask == 0
    assert np.array_equal(comp[off], t.source[off])
    # compositing never lowers the unmasked-region fidelity
    assert psnr(comp, t.source, region=1 - t.mask) >= psnr(garbage, t.source, region=1 - t.mask)
