import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repdistill.metrics import IDENTICAL, MetricConfig, psnr, results_csv, rgb_to_y, ssim, ssim_map
from repdistill.tensor import DimensionError


def rgb(r, g, b):
    return np.array([r, g, b], float).reshape(3, 1, 1)


def test_luma_reference_values():
    assert rgb_to_y(rgb(0, 0, 0))[0, 0] == 16
    np.testing.assert_allclose(rgb_to_y(rgb(1, 1, 1))[0, 0], 235.0)
    np.testing.assert_allclose(rgb_to_y(rgb(0, 1, 0))[0, 0], 144.553)
    assert rgb_to_y(np.zeros((1, 3, 4, 5))).shape == (4, 5)


def test_psnr_reference_values():
    a = np.random.default_rng(0).uniform(0, 255, (8, 8))
    assert psnr(a, a) == IDENTICAL == math.inf
    assert psnr(np.zeros((1, 1)), np.full((1, 1), 255.0)) == 0.0
    assert abs(psnr(a, a + 1) - 48.1308) < 1e-3


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


@given(st.floats(0.1, 50), st.floats(0.1, 50))
@settings(max_examples=30, deadline=None)
def test_psnr_decreases_with_error(e1, e2):
    a = np.full((6, 6), 100.0)
    lo, hi = sorted((e1, e2))
    if hi - lo < 1e-6:
        return
    assert psnr(a, a + lo) > psnr(a, a + hi)


def test_symmetry(rng):
    a, b = rng.uniform(0, 255, (2, 20, 20))
    assert psnr(a, b) == psnr(b, a)
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-15


def test_ssim_identical_is_one(rng):
    a = rng.uniform(0, 255, (16, 16))
    assert ssim(a, a) == 1.0


def ssim_direct(a, b, cfg=MetricConfig()):
    """Per-pixel SSIM formula with an explicit Gaussian window loop."""
    k = cfg.window
    r = np.arange(k) - (k - 1) / 2
    g = np.exp(-r ** 2 / (2 * cfg.sigma ** 2))
    win = np.outer(g, g) / np.outer(g, g).sum()
    c1, c2 = (cfg.k1 * 255) ** 2, (cfg.k2 * 255) ** 2
    vals = []
    for i in range(a.shape[0] - k + 1):
        for j in range(a.shape[1] - k + 1):
            pa, pb = a[i:i + k, j:j + k], b[i:i + k, j:j + k]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_matches_direct_formula(rng):
    for _ in range(3):
        a = rng.uniform(0, 255, (16, 16))
        b = np.clip(a + rng.normal(0, 20, a.shape), 0, 255)
        assert abs(ssim(a, b) - ssim_direct(a, b)) <= 1e-6


def test_ssim_negative_for_inverted_pattern():
    checker = (np.indices((16, 16)).sum(axis=0) % 2) * 200.0 + 27.5
    inverted = 255.0 - checker
    val = ssim(checker, inverted)
    assert val < 0
    assert abs(val - ssim_direct(checker, inverted)) <= 1e-6


def test_ssim_constant_images_closed_form():
    mu1, mu2 = 80.0, 95.0
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    want = (2 * mu1 * mu2 + c1) * c2 / ((mu1 ** 2 + mu2 ** 2 + c1) * c2)
    assert abs(ssim(np.full((12, 12), mu1), np.full((12, 12), mu2)) - want) < 1e-12


def test_ssim_undersized():
    with pytest.raises(DimensionError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))
    with pytest.raises(DimensionError):
        ssim(np.zeros((14, 14)), np.zeros((14, 14)), MetricConfig(shave=2))


def test_shave_hides_border_corruption(rng):
    a = rng.uniform(0, 255, (24, 24))
    b = a + rng.normal(0, 3, a.shape)
    c = b.copy()
    c[:2] = 0
    c[:, -1] = 255
    cfg = MetricConfig(shave=2)
    assert psnr(a, b, cfg) == psnr(a, c, cfg)
    assert ssim(a, b, cfg) == ssim(a, c, cfg)
    with pytest.raises(DimensionError):
        psnr(a, b, MetricConfig(shave=12))


def test_ssim_map_shape(rng):
    a = rng.uniform(0, 255, (20, 17))
    assert ssim_map(a, a).shape == (10, 7)


def test_results_csv_sorted():
    text = results_csv([("b.png", 30.0, 0.9), ("a.png", IDENTICAL, 1.0)])
    assert text.splitlines() == ["file,psnr_db,ssim", "a.png,inf,1.000000", "b.png,30.0000,0.900000"]
