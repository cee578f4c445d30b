import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.spatial.transform import Rotation

from geosplat.lighting import (EnvironmentLight, IndirectLight, compose_incident, dir_to_uv, lut_lookup,
                               precompute_splitsum, sh_basis, shade_splitsum, texel_directions,
                               texel_solid_angles)
from geosplat.scenes import sky
from geosplat.transport import estimate_radiance

from conftest import random_dirs, unit


def const_env(c=(0.3, 0.5, 0.7), h=16):
    return precompute_splitsum(EnvironmentLight(np.broadcast_to(c, (h, 2 * h, 3)).copy()), mips=6, lut_n=32)


def test_texel_solid_angles_cover_sphere():
    assert texel_solid_angles(16, 32).sum() == pytest.approx(4 * np.pi, rel=1e-12)


def test_constant_env_tables():
    c = np.array([0.3, 0.5, 0.7])
    env = const_env(c)
    for level in env.prefiltered:
        assert np.allclose(level, c, rtol=1e-12)
    assert np.allclose(env.irradiance, c, rtol=1e-12)
    assert env.prefiltered[0] is env.radiance or np.array_equal(env.prefiltered[0], env.radiance)


def test_lut_near_mirror_against_quadrature():
    env = const_env()
    rho, nv = 0.05, 1.0
    a = rho ** 2
    k = a / 2
    D = lambda c: a * a / (np.pi * (c * c * (a * a - 1) + 1) ** 2)
    G1 = lambda x: x / (x * (1 - k) + k)
    # view along n: wi = 2c h - n, n.l = 2c^2 - 1, and the Jacobian cancels to D G c
    val, _ = integrate.quad(lambda c: 2 * np.pi * D(c) * G1(2 * c * c - 1) * G1(1.0) * c, 1 / np.sqrt(2), 1,
                            points=[1 - 1e-4, 1 - 1e-3], limit=200)
    assert val == pytest.approx(1.0, abs=0.02)
    ab = lut_lookup(env.brdf_lut, nv, rho)
    assert ab.sum() == pytest.approx(val, abs=0.02)


def test_lut_channels_in_range():
    lut = const_env().brdf_lut
    assert lut.min() >= 0 and lut.max() <= 1.05


def test_constant_env_diffuse_equals_c():
    c = np.array([0.3, 0.5, 0.7])
    env = const_env(c)
    n = random_dirs(50, 1)
    d, _ = shade_splitsum(np.ones((50, 3)), np.ones(50), np.zeros(50), n, n, env, split=True)
    assert np.allclose(d, c, rtol=1e-12)


def test_hot_texel_mirror():
    h = 16
    rad = np.full((h, 2 * h, 3), 0.01)
    i, j = 7, 11
    rad[i, j] = 10.0
    env = precompute_splitsum(EnvironmentLight(rad), mips=6, lut_n=64)
    r = texel_directions(h, 2 * h)[i, j]
    n = unit(np.array([0.2, 0.9, -0.3]))
    wo = 2 * (r @ n) * n - r          # so that reflect(-wo, n) = r
    assert np.allclose(2 * (wo @ n) * n - wo, r)
    _, s = shade_splitsum(np.ones(3), 0.0, 1.0, n, wo, env, split=True)
    assert np.allclose(s, 10.0, rtol=0.05)


def test_zero_albedo_dielectric():
    env = const_env((1.0, 1.0, 1.0))
    n = random_dirs(20, 2)
    wo = unit(n + 0.3 * random_dirs(20, 3))
    wo = np.where((np.sum(wo * n, 1) > 0.05)[:, None], wo, n)
    d, s = shade_splitsum(np.zeros((20, 3)), np.full(20, 0.5), np.zeros(20), n, wo, env, split=True)
    assert np.all(d == 0)
    nv = np.sum(n * wo, axis=1)
    ab = lut_lookup(env.brdf_lut, nv, np.full(20, 0.5))
    assert np.allclose(s, (0.04 * ab[:, :1] + ab[:, 1:]) * 1.0, rtol=1e-9)


def test_mip_max_monotone():
    d = texel_directions(32, 64)
    env = precompute_splitsum(EnvironmentLight(sky(np.stack([d[..., 0], -d[..., 2], d[..., 1]], -1))), mips=6)
    top = env.prefiltered[0].max()
    assert all(level.max() <= top + 1e-12 for level in env.prefiltered)


def test_compose_branches():
    env = EnvironmentLight(np.random.default_rng(0).random((8, 16, 3)))
    ind = IndirectLight(np.random.default_rng(1).normal(size=(9, 3)))
    d = random_dirs(30, 4)
    assert np.array_equal(compose_incident(env, ind, np.zeros(30), d), env(d))
    assert np.array_equal(compose_incident(env, ind, np.ones(30), d), ind(d))
    half = compose_incident(env, ind, np.full(30, 0.5), d)
    assert np.allclose(half, 0.5 * env(d) + 0.5 * ind(d))


def test_sh_y00_value():
    assert sh_basis(np.array([0.0, 0, 1]), 0)[0] == pytest.approx(0.282095, abs=1e-6)
    ind = IndirectLight(np.array([[2.0, 3.0, 4.0]]), degree=0)
    assert np.allclose(ind(random_dirs(5)), np.array([2, 3, 4]) * 0.282095, atol=1e-5)
    assert np.allclose(IndirectLight.constant([0.1, 0.2, 0.3])(random_dirs(5)), [0.1, 0.2, 0.3])


def test_sh_orthonormal():
    h, w = 64, 128
    d = texel_directions(h, w)
    dw = texel_solid_angles(h, w)
    Y = sh_basis(d, 2)
    gram = np.einsum("hwi,hwj,hw->ij", Y, Y, dw)
    assert np.allclose(gram, np.eye(9), atol=2e-3)


def test_sh_clamped_and_validated():
    c = np.zeros((4, 3))
    c[0] = -1
    assert np.all(IndirectLight(c)(random_dirs(10)) == 0)
    with pytest.raises(ValueError):
        IndirectLight(np.zeros((5, 3)), degree=1)


def test_table_cache(tmp_path):
    rad = np.random.default_rng(0).random((16, 32, 3))
    a = precompute_splitsum(EnvironmentLight(rad), mips=4, lut_n=16, cache_dir=tmp_path)
    assert len(list(tmp_path.iterdir())) == 1
    b = precompute_splitsum(EnvironmentLight(rad), mips=4, lut_n=16, cache_dir=tmp_path)
    for x, y in zip(a.prefiltered, b.prefiltered):
        assert np.array_equal(x, y)
    assert np.array_equal(a.irradiance, b.irradiance) and np.array_equal(a.brdf_lut, b.brdf_lut)


def test_rotation_equivariance():
    R = Rotation.from_euler("xyz", [0.4, -0.7, 1.1]).as_matrix()
    sky_fn = lambda d: sky(d)
    d = texel_directions(32, 64)
    env = EnvironmentLight(sky_fn(d))
    env_r = EnvironmentLight(sky_fn(d @ R))          # L'(d) = L(R^T d)
    P = 300
    n = random_dirs(P, 7)
    wo = unit(n + 0.5 * random_dirs(P, 8))
    wo = np.where((np.sum(wo * n, 1) > 0.1)[:, None], wo, n)
    a = np.tile([0.7, 0.5, 0.3], (P, 1))
    ind = IndirectLight.constant(0.0)
    args = (a, np.full(P, 0.6), np.zeros(P))
    x = np.zeros((P, 3))
    base = estimate_radiance(x, n, wo, *args, env, ind, None, 1024, 0)
    rot = estimate_radiance(x, n @ R.T, wo @ R.T, *args, env_r, ind, None, 1024, 0)
    rmse = np.sqrt(np.mean((rot - base) ** 2)) / np.sqrt(np.mean(base ** 2))
    assert rmse < 0.02
