import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geosplat import geometry
from geosplat.adapter import GaussianSet, adapt, empty_set
from geosplat.scene_io import View
from geosplat.splat import rasterize, render_depth_normal, splat_weights

CAM = View(9, 9, 9.0, 9.0, 4.5, 4.5, np.eye(4))   # at origin, looking down -z


def disks(centres, scale=0.3, colors=None):
    """Flat Gaussians facing the camera (normal +z) at the given camera-space centres."""
    c = np.asarray(centres, dtype=np.float64).reshape(-1, 3)
    n = len(c)
    gs = GaussianSet(c, np.tile([scale, scale, 1e-4], (n, 1)), np.tile(np.eye(3), (n, 1, 1)),
                     np.tile([0, 0, 1.0], (n, 1)), np.ones(n), np.arange(n), np.tile([1, 0, 0.0], (n, 1)))
    return gs if colors is None else gs.with_colors(colors)


def test_empty_set_black():
    r = rasterize(empty_set().with_colors(np.zeros((0, 3))), CAM)
    assert np.all(r.image == 0) and np.all(r.alpha == 0)


def test_single_opaque_gaussian_centre():
    r = rasterize(disks([[0, 0, -2]], colors=[[1, 0, 0]]), CAM)
    assert np.allclose(r.image[4, 4], [0.99, 0, 0], atol=1e-12)


def test_two_gaussians_transmittance():
    r = rasterize(disks([[0, 0, -2], [0, 0, -3]], colors=[[1, 0, 0], [0, 1, 0]]), CAM)
    assert np.allclose(r.image[4, 4], [0.99, 0.0099, 0], atol=1e-12)
    assert r.alpha[4, 4, 0] == pytest.approx(1 - 0.01 * 0.01)


def test_footprint_truncated_beyond_3_sigma():
    # tiny splat: neighbours lie beyond 3 sigma, so they receive nothing
    r = rasterize(disks([[0, 0, -2]], scale=0.01, colors=[[1, 1, 1]]), CAM)
    assert r.alpha[4, 4, 0] > 0.9
    assert np.count_nonzero(r.alpha) == 1


def test_depth_and_normal_of_disk():
    depth, normal, alpha = render_depth_normal(disks([[0, 0, -2]]), CAM)
    assert depth[4, 4] == pytest.approx(2.0, abs=1e-3)
    assert np.allclose(normal[4, 4], [0, 0, 1])
    far = render_depth_normal(disks([[0, 0, -2]], scale=0.01), CAM)
    assert far[0][0, 0] == np.inf and np.all(far[1][0, 0] == 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_order_invariance(seed):
    g = np.random.default_rng(seed)
    c = np.column_stack([g.uniform(-0.5, 0.5, (12, 2)), g.uniform(-4, -1.5, 12)])
    col = g.random((12, 3))
    perm = g.permutation(12)
    a = rasterize(disks(c, colors=col), CAM)
    b = rasterize(disks(c[perm], colors=col[perm]), CAM)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.alpha, b.alpha)


def test_order_invariance_with_depth_ties():
    c = np.array([[0, 0, -2], [0.05, 0, -2], [0, 0.05, -2.0]])
    col = np.eye(3)
    for perm in ([0, 1, 2], [2, 0, 1], [1, 2, 0]):
        r = rasterize(disks(c[perm], colors=col[perm]), CAM)
        if perm == [0, 1, 2]:
            ref = r.image
        assert np.array_equal(r.image, ref)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_energy_bound_equal_luminance(seed):
    g = np.random.default_rng(seed)
    c = np.column_stack([g.uniform(-0.5, 0.5, (10, 2)), g.uniform(-4, -1.5, 10)])
    col = np.full((10, 3), g.uniform(0.1, 5.0))
    r = rasterize(disks(c, colors=col), CAM)
    assert r.image.max() <= col.max() * (1 + 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_alpha_monotone_when_adding(seed):
    g = np.random.default_rng(seed)
    c = np.column_stack([g.uniform(-0.5, 0.5, (8, 2)), g.uniform(-4, -1.5, 8)])
    a = rasterize(disks(c[:7], colors=np.ones((7, 3))), CAM).alpha
    b = rasterize(disks(c, colors=np.ones((8, 3))), CAM).alpha
    assert np.all(b >= a - 1e-15)


def test_weights_matrix_reproduces_image():
    gs = adapt(geometry.icosphere(1))
    gs = gs.with_colors(np.random.default_rng(0).random((len(gs), 3)))
    v = View.look_at([0, -3, 1], [0, 0, 0], width=24, height=24)
    sw = splat_weights(gs, v)
    r = rasterize(gs, v, weights=sw)
    img = (sw.matrix() @ gs.colors).reshape(24, 24, 3)
    assert np.allclose(img, r.image, atol=1e-12)
    assert np.all((r.alpha >= 0) & (r.alpha <= 1))


def test_gbuffer_normalised():
    gs = adapt(geometry.icosphere(2))
    P = len(gs)
    gs = gs.with_attributes(np.full((P, 3), 0.3), np.full(P, 0.6), np.zeros(P))
    v = View.look_at([0, -3, 1], [0, 0, 0], width=32, height=32)
    gb = rasterize(gs, v)
    m = gb.alpha[..., 0] > 0.5
    assert np.allclose(np.linalg.norm(gb.normal[m], axis=-1), 1)
    assert np.allclose(gb.albedo[m], 0.3) and np.allclose(gb.roughness[m], 0.6)


def test_degenerate_covariance_skipped():
    gs = disks([[0, 0, -2], [0.2, 0, -2]], colors=[[1, 0, 0], [0, 1, 0]])
    gs.scales[1] = 0.0
    r = rasterize(gs, CAM)
    assert r.degenerate == 1
    assert np.all(np.isfinite(r.image))
