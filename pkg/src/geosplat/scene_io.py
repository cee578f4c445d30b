"""Loading and writing scene assets: meshes, environment maps, cameras, images, configs."""

from __future__ import annotations

import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Mesh, area_weighted_normals, drop_degenerate_faces, validation_report

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# cameras

@dataclass
class View:
    """Pinhole camera plus optional fitting targets.

    Camera space is right-handed, looking down -z with +y up. Pixel (0, 0) is
    the top-left pixel and rays pass through pixel centres.
    """

    width: int
    height: int
    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float
    world_to_camera: np.ndarray
    target_image: np.ndarray | None = None
    target_mask: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.width < 1 or self.height < 1:
            raise ValueError("view dimensions must be >= 1")
        R = self.rotation
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-5:
            raise ValueError("world_to_camera rotation block is not orthonormal")
        if self.target_image is not None:
            self.target_image = np.asarray(self.target_image, dtype=np.float64)
            if self.target_image.shape != (self.height, self.width, 3):
                raise ValueError("target image does not match view size")
        if self.target_mask is not None:
            m = np.asarray(self.target_mask, dtype=np.float64)
            if m.ndim == 3 and m.shape[2] == 3:
                m = m.mean(axis=2, keepdims=True)
            elif m.ndim == 2:
                m = m[..., None]
            if m.shape != (self.height, self.width, 1):
                raise ValueError("target mask does not match view size")
            self.target_mask = np.clip(m, 0.0, 1.0)

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def translation(self):
        return self.world_to_camera[:3, 3]

    @property
    def position(self):
        """Camera centre in world space."""
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), width=128, height=128, fov_y_deg=40.0, **kw):
        eye, target, up = (np.asarray(x, dtype=np.float64) for x in (eye, target, up))
        fwd = target - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, [1.0, 0.0, 0.0] if abs(fwd[0]) < 0.9 else [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        cam_up = np.cross(right, fwd)
        R = np.stack([right, cam_up, -fwd])
        M = np.eye(4)
        M[:3, :3] = R
        M[:3, 3] = -R @ eye
        f = 0.5 * height / np.tan(np.radians(fov_y_deg) / 2)
        return cls(width, height, f, f, width / 2.0, height / 2.0, M, **kw)

    def world_to_cam_points(self, p):
        return p @ self.rotation.T + self.translation

    def pixel_rays(self):
        """Unit world-space ray directions through every pixel centre, (H, W, 3)."""
        d = self.camera_rays()
        return d @ self.rotation

    def camera_rays(self):
        """Unit camera-space ray directions, (H, W, 3)."""
        xs = (np.arange(self.width) + 0.5 - self.principal_x) / self.focal_x
        ys = -(np.arange(self.height) + 0.5 - self.principal_y) / self.focal_y
        X, Y = np.meshgrid(xs, ys, indexing="xy")
        d = np.stack([X, Y, -np.ones_like(X)], axis=-1)
        return d / np.linalg.norm(d, axis=-1, keepdims=True)

    def to_dict(self):
        return {
            "name": self.name, "width": self.width, "height": self.height,
            "focal_x": self.focal_x, "focal_y": self.focal_y,
            "principal_x": self.principal_x, "principal_y": self.principal_y,
            "world_to_camera": self.world_to_camera.tolist(),
        }

    def with_targets(self, image=None, mask=None):
        return dataclasses.replace(self, target_image=image, target_mask=mask)


def view_from_dict(d, base_dir=None):
    d = dict(d)
    image = d.pop("target_image", None)
    mask = d.pop("target_mask", None)
    known = {f.name for f in dataclasses.fields(View)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown camera fields: {sorted(unknown)}")
    if isinstance(image, str):
        image = read_image(_resolve(image, base_dir))
    if isinstance(mask, str):
        mask = read_image(_resolve(mask, base_dir), linear_png=True)
    return View(target_image=image, target_mask=mask, **d)


def _resolve(p, base_dir):
    p = Path(p)
    return p if p.is_absolute() or base_dir is None else Path(base_dir) / p


# ---------------------------------------------------------------------------
# run configuration

@dataclass
class RunConfig:
    """Run-wide settings; every field has a working default."""

    samples_per_pixel: int = 1
    mc_samples: int = 64
    adapter_u: float = 0.07
    adapter_v: float = 0.22
    adapter_alpha_inner: float = 0.80
    adapter_alpha_outer: float = 2.08
    adapter_beta_inner: float = 15.0
    adapter_beta_outer: float = 13.0
    adapter_delta: float = 4.5e-5
    vertex_k: float = 1.0
    lambda_ssim: float = 0.2
    lambda_mask: float = 5.0
    lambda_sdf: float = 0.2
    lambda_sdf_final: float = 0.01
    lambda_smooth: float = 0.03
    lambda_light: float = 0.15
    smooth_sigma: float = 0.01
    sh_degree: int = 2
    rng_seed: int = 0
    shading_mode: str = "forward"
    lighting_mode: str = "split_sum"
    # fitting
    iterations: int = 600
    warmup_fraction: float = 0.5
    lr_material: float = 5e-3
    lr_light: float = 1e-2
    mc_samples_fit: int = 32
    mc_samples_render: int = 256
    field_resolutions: tuple = (16, 32, 64)
    env_resolution: tuple = (16, 32)
    learn_env: bool = True
    learn_indirect: bool = True
    occlusion: bool = True
    indirect: bool = True
    mips: int = 6
    lut_size: int = 64
    mc_resample_every: int = 10
    views_per_step: int = 0
    blur: float = 0.0

    def __post_init__(self):
        self.field_resolutions = tuple(int(r) for r in self.field_resolutions)
        self.env_resolution = tuple(int(r) for r in self.env_resolution)
        for name in ("samples_per_pixel", "mc_samples", "mc_samples_fit", "mc_samples_render", "mips", "lut_size",
                     "mc_resample_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.views_per_step < 0 or self.blur < 0:
            raise ValueError("views_per_step and blur must be >= 0")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        for name in ("lambda_ssim", "lambda_mask", "lambda_sdf", "lambda_sdf_final", "lambda_smooth", "lambda_light"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.sh_degree not in (0, 1, 2):
            raise ValueError("sh_degree must be 0, 1 or 2")
        if self.shading_mode not in ("forward", "deferred"):
            raise ValueError("shading_mode must be 'forward' or 'deferred'")
        if self.lighting_mode not in ("split_sum", "monte_carlo"):
            raise ValueError("lighting_mode must be 'split_sum' or 'monte_carlo'")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ValueError("warmup_fraction must lie in [0, 1]")
        if not 0 < self.adapter_u < self.adapter_v < 0.5:
            raise ValueError("adapter constants need 0 < u < v < 1/2")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["field_resolutions"] = list(self.field_resolutions)
        d["env_resolution"] = list(self.env_resolution)
        return d

    def adapter_constants(self):
        from .adapter import AdapterConstants

        return AdapterConstants(u=self.adapter_u, v=self.adapter_v,
                                alpha_inner=self.adapter_alpha_inner, alpha_outer=self.adapter_alpha_outer,
                                beta_inner=self.adapter_beta_inner, beta_outer=self.adapter_beta_outer,
                                delta=self.adapter_delta)


def load_config(path) -> RunConfig:
    with open(path) as f:
        return RunConfig.from_dict(json.load(f))


# ---------------------------------------------------------------------------
# meshes

def load_mesh(path) -> Mesh:
    """Read a triangle OBJ (``v``, ``vn``, ``f`` records; everything else ignored).

    Vertex order is preserved. Normals come from ``vn`` records when every
    face corner references one, else they are area-weighted face averages.
    Zero-area faces are dropped and counted in ``mesh.info``.
    """
    verts, normals, faces, face_normals = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            tag = parts[0]
            try:
                if tag == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif tag == "vn":
                    normals.append([float(x) for x in parts[1:4]])
                elif tag == "f":
                    corners = parts[1:]
                    if len(corners) != 3:
                        raise ValueError(f"{path}:{lineno}: non-triangular face ({len(corners)} vertices)")
                    vi, ni = [], []
                    for c in corners:
                        fields = c.split("/")
                        vi.append(_obj_index(fields[0], len(verts)))
                        ni.append(_obj_index(fields[2], len(normals)) if len(fields) > 2 and fields[2] else -1)
                    faces.append(vi)
                    face_normals.append(ni)
            except (IndexError, ValueError) as exc:
                if "non-triangular" in str(exc):
                    raise
                raise ValueError(f"{path}:{lineno}: cannot parse OBJ record: {line.strip()!r}") from exc
    if not verts:
        raise ValueError(f"{path}: no vertices")
    V = np.array(verts, dtype=np.float64)
    F = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if F.size and (F.min() < 0 or F.max() >= len(V)):
        raise ValueError(f"{path}: face references an out-of-range vertex")
    mesh = Mesh(V, F, np.zeros_like(V))
    FN = np.array(face_normals, dtype=np.int64).reshape(-1, 3)
    if normals and FN.size and FN.min() >= 0:
        N = np.array(normals, dtype=np.float64)
        acc = np.zeros_like(V)
        np.add.at(acc, F.ravel(), N[FN.ravel()])
        length = np.linalg.norm(acc, axis=1, keepdims=True)
        computed = area_weighted_normals(mesh)
        mesh.vertex_normals = np.where(length > 0, acc / np.where(length > 0, length, 1.0), computed)
    else:
        mesh.vertex_normals = area_weighted_normals(mesh)
    mesh = drop_degenerate_faces(mesh)
    mesh.info.update(validation_report(mesh))
    if mesh.info["non_manifold_edges"]:
        log.warning("%s: %d non-manifold edges", path, mesh.info["non_manifold_edges"])
    return mesh


def _obj_index(token, count):
    i = int(token)
    return i - 1 if i > 0 else count + i


def save_mesh(mesh: Mesh, path):
    with open(path, "w") as f:
        # repr of a Python float round-trips exactly
        for v in mesh.vertices.tolist():
            f.write("v %r %r %r\n" % tuple(v))
        for n in mesh.vertex_normals.tolist():
            f.write("vn %r %r %r\n" % tuple(n))
        for a, b, c in mesh.faces + 1:
            f.write(f"f {a}//{a} {b}//{b} {c}//{c}\n")


# ---------------------------------------------------------------------------
# images

def srgb_encode(x):
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_decode(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y <= 0.04045, y / 12.92, np.power((y + 0.055) / 1.055, 2.4))


def write_image(buffer, path, encoding=None):
    """Write an (H, W, 3) or (H, W, 1) linear buffer.

    ``png_srgb`` applies the sRGB transfer curve and clamps to [0, 1];
    ``exr_linear`` stores float32 so float32 input round-trips bit-exactly.
    The encoding defaults from the file extension.
    """
    buf = np.asarray(buffer)
    if not np.all(np.isfinite(buf)):
        raise ValueError("image buffer must be finite")
    if buf.ndim == 2:
        buf = buf[..., None]
    if encoding is None:
        encoding = "exr_linear" if str(path).lower().endswith(".exr") else "png_srgb"
    if encoding == "png_srgb":
        from PIL import Image

        if buf.shape[2] == 1:
            buf = np.repeat(buf, 3, axis=2)
        b = np.rint(srgb_encode(buf) * 255.0).astype(np.uint8)
        Image.fromarray(b, mode="RGB").save(path, format="PNG")
    elif encoding == "exr_linear":
        import OpenEXR

        data = np.ascontiguousarray(buf.astype(np.float32))
        chans = {"RGB": data} if data.shape[2] == 3 else {"Y": data[..., 0]}
        header = {"compression": OpenEXR.ZIP_COMPRESSION, "type": OpenEXR.scanlineimage}
        with OpenEXR.File(header, chans) as f:
            f.write(str(path))
    else:
        raise ValueError(f"unknown encoding {encoding!r}")


def read_image(path, linear_png=False):
    """Read an image as float64 linear values.

    PNG/JPEG are treated as sRGB-encoded unless ``linear_png`` (masks).
    """
    path = str(path)
    ext = os.path.splitext(path)[1].lower()
    if ext == ".exr":
        import OpenEXR

        with OpenEXR.File(path) as f:
            ch = f.channels()
            if "RGB" in ch:
                return ch["RGB"].pixels.astype(np.float64)
            if "Y" in ch:
                return ch["Y"].pixels.astype(np.float64)[..., None]
            return np.stack([ch[c].pixels for c in ("R", "G", "B")], -1).astype(np.float64)
    if ext in (".hdr", ".pfm"):
        return _read_float_image(path)
    from PIL import Image

    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return img if linear_png else srgb_decode(img)


def _read_float_image(path):
    import cv2

    img = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ValueError(f"{path}: cannot decode image")
    img = img.astype(np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    return img[..., ::-1].copy()  # BGR -> RGB


def write_float_image(img, path):
    """Write a Radiance HDR or PFM file (used for environment maps)."""
    import cv2

    img = np.asarray(img, dtype=np.float32)
    if not cv2.imwrite(str(path), np.ascontiguousarray(img[..., ::-1])):
        raise OSError(f"cannot write {path}")


def load_envmap(path):
    """Read an equirectangular HDR/PFM map into an EnvironmentLight (raw map only)."""
    from .lighting import EnvironmentLight

    img = _read_float_image(str(path))
    return EnvironmentLight(img)


# ---------------------------------------------------------------------------
# scenes

@dataclass
class Scene:
    mesh: Mesh
    env: object
    views: list
    config: RunConfig
    material: dict = field(default_factory=dict)
    source: str = ""


def load_scene(path) -> Scene:
    """Scene JSON: ``mesh``, ``envmap`` (path or constant RGB), ``cameras``, ``config``, ``material``."""
    from .lighting import EnvironmentLight

    path = Path(path)
    with open(path) as f:
        doc = json.load(f)
    unknown = set(doc) - {"mesh", "envmap", "cameras", "config", "material"}
    if unknown:
        raise ValueError(f"unknown scene fields: {sorted(unknown)}")
    base = path.parent
    mesh = load_mesh(_resolve(doc["mesh"], base))
    env_spec = doc.get("envmap", [1.0, 1.0, 1.0])
    if isinstance(env_spec, str):
        env = load_envmap(_resolve(env_spec, base))
    else:
        env = EnvironmentLight(np.broadcast_to(np.asarray(env_spec, float), (16, 32, 3)).copy())
    config = RunConfig.from_dict(doc.get("config", {}))
    views = [view_from_dict(c, base) for c in doc.get("cameras", [])]
    return Scene(mesh, env, views, config, doc.get("material", {}), str(path))
