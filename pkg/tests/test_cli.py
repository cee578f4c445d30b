import json

import numpy as np
import pytest

from geosplat import geometry
from geosplat.cli import main
from geosplat.scene_io import read_image, save_mesh, write_image
from geosplat.scenes import orbit_views, sky_env


def camera(v):
    return {"name": v.name, "width": v.width, "height": v.height, "focal_x": v.focal_x, "focal_y": v.focal_y,
            "principal_x": v.principal_x, "principal_y": v.principal_y,
            "world_to_camera": v.world_to_camera.tolist()}


@pytest.fixture
def scene(tmp_path):
    mesh = geometry.icosphere(1)
    save_mesh(mesh, tmp_path / "ico.obj")
    write_image(sky_env(8).radiance, tmp_path / "env.hdr")
    views = orbit_views(2, 3.2, (20.0,), 24, 24)
    doc = {"mesh": "ico.obj", "envmap": "env.hdr", "cameras": [camera(v) for v in views],
           "config": {"mc_samples_render": 8, "mips": 4, "lut_size": 32},
           "material": {"albedo": [0.6, 0.4, 0.3], "roughness": 0.5, "metalness": 0.0}}
    (tmp_path / "scene.json").write_text(json.dumps(doc))
    return tmp_path, mesh


def test_render_writes_images_and_manifest(scene):
    d, _ = scene
    assert main(["render", "--scene", str(d / "scene.json"), "--out", str(d / "r")]) == 0
    man = json.loads((d / "r" / "manifest.json").read_text())
    paths = {o["path"] for o in man["outputs"]}
    assert {"view00.png", "view00.exr", "view01_alpha.png"} <= paths
    assert all(len(o["sha256"]) == 64 for o in man["outputs"])
    img = read_image(d / "r" / "view00.exr")
    assert img.shape == (24, 24, 3) and img.max() > 0
    assert (d / "r" / "log.jsonl").exists()


def test_render_is_reproducible(scene):
    d, _ = scene
    for name in ("a", "b"):
        assert main(["render", "--scene", str(d / "scene.json"), "--out", str(d / name), "--mode", "mc"]) == 0
    ha = json.loads((d / "a" / "manifest.json").read_text())["outputs"]
    hb = json.loads((d / "b" / "manifest.json").read_text())["outputs"]
    assert ha == hb


def test_adapter_gaussian_count(scene):
    from geosplat.adapter import GaussianSet

    d, mesh = scene
    assert main(["adapter", "--mesh", str(d / "ico.obj"), "--out", str(d / "g" / "g.bin")]) == 0
    assert len(GaussianSet.load(d / "g" / "g.bin")) == 6 * mesh.n_faces
    assert main(["adapter", "--mesh", str(d / "ico.obj"), "--out", str(d / "v.bin"),
                 "--adapter-mode", "vertex"]) == 0
    assert len(GaussianSet.load(d / "v.bin")) == len(mesh.vertices)


def test_user_errors_exit_one(scene, capsys):
    d, _ = scene
    assert main(["render", "--scene", str(d / "missing.json")]) == 1
    assert main(["render", "--bogus"]) == 1
    assert main([]) == 1
    assert main(["adapter", "--mesh", str(d / "nope.obj"), "--out", str(d / "x.bin")]) == 1
    (d / "quad.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    assert main(["adapter", "--mesh", str(d / "quad.obj"), "--out", str(d / "x.bin")]) == 1
    assert main(["selftest", "--only", "99"]) == 1
    err = [json.loads(l) for l in capsys.readouterr().err.splitlines() if l.startswith("{")]
    errors = [e for e in err if e["event"] == "error"]
    assert len(errors) == 6 and all(e["kind"] == "user" for e in errors)


def test_metrics_identity(scene, capsys):
    d, _ = scene
    img = np.random.default_rng(0).random((16, 16, 3))
    write_image(img, d / "p.exr")
    assert main(["metrics", "--pred", str(d / "p.exr"), "--gt", str(d / "p.exr")]) == 0
    rep = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert rep["psnr"] == "inf" and rep["ssim"] == 1.0
    write_image(img[:8], d / "q.exr")
    assert main(["metrics", "--pred", str(d / "q.exr"), "--gt", str(d / "p.exr")]) == 1


def test_precompute_env(scene):
    d, _ = scene
    assert main(["precompute-env", "--env", str(d / "env.hdr"), "--out", str(d / "pe"), "--mips", "3",
                 "--lut-size", "16"]) == 0
    assert list((d / "pe").glob("splitsum_*.bin"))


def test_trace_occlusion_verify(scene, capsys):
    d, _ = scene
    assert main(["trace-occlusion", "--mesh", str(d / "ico.obj"), "--points", "50", "--rays", "8",
                 "--verify"]) == 0


def test_fit_smoke(scene):
    d, _ = scene
    assert main(["render", "--scene", str(d / "scene.json"), "--out", str(d / "r")]) == 0
    doc = json.loads((d / "scene.json").read_text())
    for c in doc["cameras"]:
        c["target_image"] = f"r/{c['name']}.exr"
    doc["config"].update(field_resolutions=[4, 8], learn_env=False, lambda_light=0.0, mc_samples_fit=4,
                         env_resolution=[8, 16])
    (d / "fit.json").write_text(json.dumps(doc))
    assert main(["fit", "--scene", str(d / "fit.json"), "--out", str(d / "f"), "--iterations", "6",
                 "--render-views", "1"]) == 0
    rows = (d / "f" / "loss.csv").read_text().splitlines()
    assert len(rows) == 7 and rows[0].startswith("iteration")
    assert (d / "f" / "view00_albedo.png").exists()
    assert main(["fit", "--scene", str(d / "scene.json"), "--out", str(d / "f2")]) == 1


def test_selftest_subset(capsys):
    assert main(["selftest", "--only", "10,1"]) == 0
    out = capsys.readouterr().out
    assert "2/2 criteria passed" in out
