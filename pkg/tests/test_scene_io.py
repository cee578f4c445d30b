import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from geosplat import geometry
from geosplat.lighting import EnvironmentLight, dir_to_uv, uv_to_dir
from geosplat.scene_io import (RunConfig, View, load_config, load_envmap, load_mesh, load_scene, read_image,
                               save_mesh, srgb_encode, write_float_image, write_image)

ICOSAHEDRON_OBJ = """\
v 0 1 1.618
v 0 -1 1.618
v 0 1 -1.618
v 0 -1 -1.618
v 1 1.618 0
v -1 1.618 0
v 1 -1.618 0
v -1 -1.618 0
v 1.618 0 1
v -1.618 0 1
v 1.618 0 -1
v -1.618 0 -1
"""
ICO_FACES = [(1, 2, 9), (1, 10, 2), (1, 9, 5), (1, 5, 6), (1, 6, 10), (2, 10, 8), (2, 8, 7), (2, 7, 9),
             (3, 5, 11), (3, 6, 5), (3, 12, 6), (3, 11, 4), (3, 4, 12), (4, 11, 7), (4, 7, 8), (4, 8, 12),
             (5, 9, 11), (6, 12, 10), (7, 11, 9), (8, 10, 12)]


@pytest.fixture
def ico_obj(tmp_path):
    p = tmp_path / "ico.obj"
    p.write_text(ICOSAHEDRON_OBJ + "".join(f"f {a} {b} {c}\n" for a, b, c in ICO_FACES))
    return p


def test_icosahedron_obj_loads_with_unit_normals(ico_obj):
    m = load_mesh(ico_obj)
    assert m.n_faces == 20 and len(m.vertices) == 12
    assert np.allclose(np.linalg.norm(m.vertex_normals, axis=1), 1.0, atol=1e-6)


def test_missing_normals_are_area_weighted(ico_obj):
    m = load_mesh(ico_obj)
    # independent accumulation, one face at a time
    acc = np.zeros_like(m.vertices)
    for f in m.faces:
        p = m.vertices[f]
        cr = np.cross(p[1] - p[0], p[2] - p[0])  # |cr| = 2 * area, direction = face normal
        for i in f:
            acc[i] += cr
    acc /= np.linalg.norm(acc, axis=1, keepdims=True)
    assert np.allclose(m.vertex_normals, acc, atol=1e-12)


def test_quad_face_rejected(tmp_path):
    p = tmp_path / "quad.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(ValueError, match="non-triangular face"):
        load_mesh(p)


def test_degenerate_faces_dropped_and_counted(tmp_path):
    p = tmp_path / "deg.obj"
    p.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nv 2 0 0\nf 1 2 3\nf 1 2 4\n")
    m = load_mesh(p)
    assert m.n_faces == 1
    assert m.info["dropped_degenerate_faces"] == 1


def test_load_mesh_deterministic(ico_obj):
    a, b = load_mesh(ico_obj), load_mesh(ico_obj)
    assert np.array_equal(a.vertices, b.vertices) and np.array_equal(a.faces, b.faces)


def test_save_mesh_roundtrip(tmp_path):
    m = geometry.icosphere(2)
    save_mesh(m, tmp_path / "s.obj")
    back = load_mesh(tmp_path / "s.obj")
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.faces, m.faces)


def test_constant_envmap(tmp_path):
    write_float_image(np.full((32, 64, 3), 0.5, np.float32), tmp_path / "c.hdr")
    env = load_envmap(tmp_path / "c.hdr")
    d = np.random.default_rng(0).normal(size=(100, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    assert np.allclose(env(d), 0.5)


def test_hot_texel_lookup(tmp_path):
    img = np.zeros((32, 64, 3), np.float32)
    img[9, 41] = 7.0
    write_float_image(img, tmp_path / "hot.pfm")
    env = load_envmap(tmp_path / "hot.pfm")
    # texel centre in (u, v) then back to a direction with the inverse lat-long map
    d = uv_to_dir((41 + 0.5) / 64, (9 + 0.5) / 32)
    assert np.allclose(env(np.asarray(d)[None]), 7.0)


def test_envmap_aspect_rejected(tmp_path):
    write_float_image(np.ones((64, 64, 3), np.float32), tmp_path / "sq.pfm")
    with pytest.raises(ValueError, match="aspect ratio"):
        load_envmap(tmp_path / "sq.pfm")


def test_envmap_negative_rejected():
    with pytest.raises(ValueError):
        EnvironmentLight(-np.ones((4, 8, 3)))
    bad = np.ones((4, 8, 3))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        EnvironmentLight(bad)


def test_png_black_and_endpoints(tmp_path):
    from PIL import Image

    write_image(np.zeros((4, 4, 3)), tmp_path / "z.png")
    assert np.all(np.asarray(Image.open(tmp_path / "z.png")) == 0)
    write_image(np.ones((2, 2, 3)), tmp_path / "o.png")
    assert np.all(np.asarray(Image.open(tmp_path / "o.png")) == 255)


def test_png_half_is_188(tmp_path):
    from PIL import Image

    expected = round((1.055 * 0.5 ** (1 / 2.4) - 0.055) * 255)
    assert expected == 188
    write_image(np.full((2, 2, 3), 0.5), tmp_path / "h.png")
    assert np.all(np.asarray(Image.open(tmp_path / "h.png")) == 188)


def test_exr_roundtrip_bit_exact(tmp_path):
    buf = np.random.default_rng(3).random((7, 9, 3)).astype(np.float32) * 10
    write_image(buf, tmp_path / "b.exr")
    back = read_image(tmp_path / "b.exr")
    assert np.array_equal(back.astype(np.float32), buf)


def test_non_finite_image_rejected(tmp_path):
    with pytest.raises(ValueError):
        write_image(np.full((2, 2, 3), np.inf), tmp_path / "x.png")


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 1), st.floats(0, 2 * np.pi))
def test_latlong_roundtrip(z, phi):
    s = np.sqrt(max(1 - z * z, 0.0))
    if s < 1e-3:  # away from the poles
        return
    d = np.array([s * np.cos(phi), s * np.sin(phi), z])
    back = np.asarray(uv_to_dir(*dir_to_uv(d)))
    assert np.arccos(np.clip(back @ d, -1, 1)) < 1e-6


def test_view_rejects_non_orthonormal():
    M = np.eye(4)
    M[0, 0] = 1.1
    with pytest.raises(ValueError):
        View(8, 8, 8.0, 8.0, 4.0, 4.0, M)


def test_view_target_size_checked():
    with pytest.raises(ValueError):
        View(8, 8, 8.0, 8.0, 4.0, 4.0, np.eye(4), target_image=np.zeros((4, 4, 3)))


def test_mask_luminance_reduced():
    v = View(2, 2, 2.0, 2.0, 1.0, 1.0, np.eye(4), target_mask=np.ones((2, 2, 3)) * [0.0, 0.5, 1.0])
    assert v.target_mask.shape == (2, 2, 1) and np.allclose(v.target_mask, 0.5)


def test_centre_ray_looks_down_minus_z():
    v = View(3, 3, 3.0, 3.0, 1.5, 1.5, np.eye(4))
    assert np.allclose(v.camera_rays()[1, 1], [0, 0, -1])
    assert v.camera_rays()[0, 1, 1] > 0  # top row points up


def test_config_validation():
    with pytest.raises(ValueError):
        RunConfig(mc_samples=0)
    with pytest.raises(ValueError):
        RunConfig(lambda_ssim=-1)
    with pytest.raises(ValueError):
        RunConfig(sh_degree=3)
    with pytest.raises(ValueError):
        RunConfig.from_dict({"bogus": 1})
    c = RunConfig()
    assert c.lambda_ssim == 0.2 and c.lambda_mask == 5.0 and c.lambda_sdf == 0.2
    assert RunConfig.from_dict(c.to_dict()) == c


def test_config_file_and_scene(tmp_path, ico_obj):
    (tmp_path / "c.json").write_text(json.dumps({"mc_samples": 8}))
    assert load_config(tmp_path / "c.json").mc_samples == 8
    v = View.look_at([0, -3, 0], [0, 0, 0], width=8, height=8)
    doc = {"mesh": ico_obj.name, "envmap": [0.2, 0.3, 0.4], "cameras": [v.to_dict()], "config": {"mc_samples": 4}}
    (tmp_path / "s.json").write_text(json.dumps(doc))
    sc = load_scene(tmp_path / "s.json")
    assert sc.mesh.n_faces == 20 and sc.config.mc_samples == 4
    assert np.allclose(sc.views[0].world_to_camera, v.world_to_camera)
    assert np.allclose(sc.env(np.array([[0, 0, 1.0]])), [0.2, 0.3, 0.4])


def test_srgb_monotone():
    x = np.linspace(0, 1, 1001)
    assert np.all(np.diff(srgb_encode(x)) > 0)
