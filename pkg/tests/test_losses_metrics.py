import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geosplat.losses_metrics import (LossReport, albedo_scale, gaussian_window, l1, light_regularizer, mask_mse,
                                     normal_mae, photometric_loss, psnr, ssim)

from conftest import random_dirs


def img(seed, shape=(24, 20, 3)):
    return np.random.default_rng(seed).random(shape)


def test_identity_components():
    a = img(0)
    m = (img(1, (24, 20, 1)) > 0.5).astype(float)
    c = photometric_loss(a, m, a, m)
    assert c["l1"] == 0 and c["ssim_term"] == 0 and c["mask"] == 0 and c["total"] == 0
    assert ssim(a, a) == 1.0


def test_constant_offset_l1():
    a = img(2)
    assert l1(a + 0.1, a) == pytest.approx(0.1, rel=1e-12)


def test_mask_component_one():
    assert mask_mse(np.ones((4, 4, 1)), np.zeros((4, 4, 1))) == 1.0


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        l1(np.zeros((3, 3, 3)), np.zeros((3, 4, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((12, 12, 3)), np.zeros((12, 13, 3)))


def test_light_regularizer_cases():
    g = np.full((3, 3, 3), 0.5)
    assert light_regularizer(g / 2, g / 2, g) == 0.0
    red = np.zeros((1, 1, 3))
    red[..., 0] = 1
    assert light_regularizer(red, 0 * red, red) == pytest.approx(2 / 3, rel=1e-15)
    z = np.zeros((2, 2, 3))
    assert light_regularizer(z, z, z) == 0.0


def test_light_regularizer_gradient():
    Ld, Ls, I = img(3, (5, 5, 3)), img(4, (5, 5, 3)), img(5, (5, 5, 3))
    v, g = light_regularizer(Ld, Ls, I, with_grad=True)
    eps = 1e-7
    for idx in [(0, 0, 0), (2, 3, 1), (4, 4, 2)]:
        d = np.zeros_like(Ld)
        d[idx] = eps
        fd = (light_regularizer(Ld + d, Ls, I) - light_regularizer(Ld - d, Ls, I)) / (2 * eps)
        assert fd == pytest.approx(g[idx], rel=1e-6)


def test_psnr_identity_and_value():
    a = img(6)
    assert psnr(a, a) == float("inf")
    b = np.clip(a, 0.2, 0.8)
    assert psnr(b + 0.1, b) == pytest.approx(20.0, rel=1e-12)


def test_normal_mae():
    n = random_dirs(100, 0).reshape(10, 10, 3)
    assert normal_mae(n, n) == pytest.approx(0.0, abs=1e-6)
    z = np.zeros((4, 4, 3))
    z[..., 2] = 1
    x = np.zeros((4, 4, 3))
    x[..., 0] = 1
    assert normal_mae(x, z) == pytest.approx(90.0)


def test_normal_mae_rotation_invariant():
    from scipy.spatial.transform import Rotation

    a = random_dirs(64, 1).reshape(8, 8, 3)
    b = random_dirs(64, 2).reshape(8, 8, 3)
    R = Rotation.from_euler("zyx", [0.3, 1.2, -0.4]).as_matrix()
    assert normal_mae(a @ R.T, b @ R.T) == pytest.approx(normal_mae(a, b), rel=1e-9)


def test_ssim_matches_reference_formula():
    # brute-force windowed SSIM, one window at a time
    a, b = img(7, (14, 13, 1)), img(8, (14, 13, 1))
    g = gaussian_window()
    w = np.outer(g, g)
    vals = []
    for i in range(14 - 10):
        for j in range(13 - 10):
            pa, pb = a[i:i + 11, j:j + 11, 0], b[i:i + 11, j:j + 11, 0]
            ma, mb = np.sum(w * pa), np.sum(w * pb)
            va, vb = np.sum(w * pa * pa) - ma ** 2, np.sum(w * pb * pb) - mb ** 2
            cov = np.sum(w * pa * pb) - ma * mb
            C1, C2 = 0.01 ** 2, 0.03 ** 2
            vals.append((2 * ma * mb + C1) * (2 * cov + C2) / ((ma ** 2 + mb ** 2 + C1) * (va + vb + C2)))
    assert ssim(a, b) == pytest.approx(np.mean(vals), rel=1e-12)
    assert g.sum() == pytest.approx(1.0) and len(g) == 11


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_ssim_symmetric_and_bounded(seed):
    a, b = img(seed, (16, 16, 3)), img(seed + 1, (16, 16, 3))
    s = ssim(a, b)
    assert s == pytest.approx(ssim(b, a), abs=1e-9)
    assert -1 <= s <= 1


def test_ssim_gradient_fd():
    a, b = img(9, (15, 15, 2)), img(10, (15, 15, 2))
    _, g = ssim(a, b, with_grad=True)
    eps = 1e-6
    for idx in [(0, 0, 0), (7, 7, 1), (14, 3, 0), (5, 12, 1)]:
        d = np.zeros_like(a)
        d[idx] = eps
        fd = (ssim(a + d, b) - ssim(a - d, b)) / (2 * eps)
        assert fd == pytest.approx(g[idx], rel=1e-5, abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_losses_nonnegative_and_total_exact(seed):
    g = np.random.default_rng(seed)
    r = LossReport(*g.random(6), weights={"ssim": 0.2, "mask": 5.0, "sdf": 0.1, "smooth": 0.03, "light": 0.15})
    expected = r.l1 + 0.2 * r.ssim_term + 5.0 * r.mask + 0.1 * r.entropy + 0.03 * r.smoothness + 0.15 * r.light_reg
    assert abs(r.total - expected) <= 1e-12
    a, b = img(seed, (12, 12, 3)), img(seed + 1, (12, 12, 3))
    c = photometric_loss(a, a[..., :1], b, b[..., :1])
    assert all(c[k] >= 0 for k in ("l1", "ssim_term", "mask"))


def test_albedo_scale_recovers_factor():
    gt = img(11, (8, 8, 3))
    s = albedo_scale(gt / np.array([2.0, 4.0, 0.5]), gt)
    assert np.allclose(s, [2.0, 4.0, 0.5])
