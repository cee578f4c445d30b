import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geosplat import geometry
from geosplat.geometry import Mesh, ScalarGrid, area_weighted_normals, entropy_loss, extract_isosurface


def bce(p, y):
    return -(y * np.log(p) + (1 - y) * np.log(1 - p))


def sigmoid(x):
    return 1 / (1 + np.exp(-x))


@pytest.fixture(scope="module")
def sphere_mesh():
    g = ScalarGrid.from_function(lambda p: np.linalg.norm(p, axis=-1) - 1.0, 32, [-2] * 3, [2] * 3)
    return extract_isosurface(g, 0.0)


def test_sphere_isosurface_close_to_unit(sphere_mesh):
    assert not sphere_mesh.info["empty"]
    assert np.max(np.abs(np.linalg.norm(sphere_mesh.vertices, axis=1) - 1)) < 0.02


def test_sphere_isosurface_watertight_and_valid(sphere_mesh):
    _, counts = sphere_mesh.edge_face_counts()
    assert np.all(counts == 2)
    assert sphere_mesh.faces.max() < len(sphere_mesh.vertices) and sphere_mesh.faces.min() >= 0
    assert np.all(sphere_mesh.face_areas > 0)


def test_sphere_isosurface_outward(sphere_mesh):
    c = sphere_mesh.triangles.mean(axis=1)
    assert np.all(np.sum(sphere_mesh.face_normals * c, axis=1) > 0)


def test_uniform_sign_gives_empty_flag():
    g = ScalarGrid(np.ones((4, 4, 4)), [0] * 3, [1] * 3)
    m = extract_isosurface(g)
    assert m.info["empty"] and m.n_faces == 0


def test_linear_field_gives_plane():
    g = ScalarGrid.from_function(lambda p: p[..., 0] - 0.1, (5, 4, 4), [-1] * 3, [1] * 3)
    m = extract_isosurface(g, 0.0)
    assert np.allclose(m.vertices[:, 0], 0.1)
    assert np.allclose(np.abs(m.vertex_normals[:, 0]), 1.0, atol=1e-6)


def test_grid_validation():
    with pytest.raises(ValueError):
        ScalarGrid(np.zeros((1, 4, 4)), [0] * 3, [1] * 3)
    with pytest.raises(ValueError):
        ScalarGrid(np.full((2, 2, 2), np.nan), [0] * 3, [1] * 3)


def test_grid_save_load(tmp_path):
    g = ScalarGrid(np.random.default_rng(0).normal(size=(3, 4, 5)), [0, 1, 2], [1, 2, 4])
    g.save(tmp_path / "g.bin")
    h = ScalarGrid.load(tmp_path / "g.bin")
    assert np.array_equal(h.values, g.values) and np.array_equal(h.lo, g.lo) and np.array_equal(h.hi, g.hi)


def test_entropy_all_positive_zero():
    assert entropy_loss(ScalarGrid(np.ones((3, 3, 3)), [0] * 3, [1] * 3)) == 0.0




def test_entropy_single_edge_hand_value():
    v = np.array([1.0, -1.0]).reshape(2, 1, 1)
    v = np.broadcast_to(v, (2, 2, 2)).copy()
    g = ScalarGrid(v, [0] * 3, [1] * 3)
    # four x-edges cross, each contributes H(s(1), 0) + H(s(-1), 1)
    per_edge = bce(sigmoid(1.0), 0.0) + bce(sigmoid(-1.0), 1.0)
    assert per_edge == pytest.approx(2 * bce(sigmoid(1.0), 0.0))
    assert entropy_loss(g) == pytest.approx(4 * per_edge, rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_entropy_sign_flip_symmetric_and_nonnegative(seed):
    v = np.random.default_rng(seed).normal(size=(4, 4, 4))
    v[v == 0] = 0.1
    a, b = ScalarGrid(v, [0] * 3, [1] * 3), ScalarGrid(-v, [0] * 3, [1] * 3)
    assert entropy_loss(a) >= 0
    assert entropy_loss(a) == pytest.approx(entropy_loss(b), rel=1e-12)


def test_entropy_monotone_in_separation():
    # with the other endpoint's sign as target, a sharper crossing costs more
    vals = []
    for t in (0.1, 0.5, 1.0, 2.0, 4.0):
        v = np.broadcast_to(np.array([t, -t]).reshape(2, 1, 1), (2, 2, 2)).copy()
        vals.append(entropy_loss(ScalarGrid(v, [0] * 3, [1] * 3)))
    assert np.all(np.diff(vals) > 0)


def test_flat_fan_normals():
    ang = np.linspace(0, 2 * np.pi, 7)[:-1]
    verts = np.vstack([[0, 0, 0], np.column_stack([np.cos(ang), np.sin(ang), np.zeros(6)])])
    faces = np.array([[0, 1 + i, 1 + (i + 1) % 6] for i in range(6)])
    m = Mesh(verts, faces)
    assert np.allclose(area_weighted_normals(m), [0, 0, 1])


def test_octahedron_vertex_normals_axis_aligned():
    v = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1.0]])
    f = np.array([[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]])
    n = area_weighted_normals(Mesh(v, f))
    assert np.allclose(n, v, atol=1e-12)


def test_icosphere_normals_near_radial():
    m = geometry.icosphere(3)
    radial = m.vertices / np.linalg.norm(m.vertices, axis=1, keepdims=True)
    ang = np.degrees(np.arccos(np.clip(np.sum(m.vertex_normals * radial, axis=1), -1, 1)))
    assert ang.max() < 2.0
    assert m.n_faces == 1280


def test_mesh_invariants():
    m = geometry.icosphere(2)
    assert len(m.vertex_normals) == len(m.vertices)
    assert np.allclose(np.linalg.norm(m.vertex_normals, axis=1), 1, atol=1e-6)
    p = m.vertices[m.faces]
    areas = 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)
    assert np.allclose(m.face_areas, areas, rtol=1e-9)


def test_isolated_vertex_gets_plus_z(caplog):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 5, 5.0]])
    n = area_weighted_normals(Mesh(v, np.array([[0, 1, 2]])))
    assert np.allclose(n[3], [0, 0, 1])
