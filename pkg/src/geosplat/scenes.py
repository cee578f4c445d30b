"""Small synthetic scenes with known materials and lighting.

World space is z-up; the environment maps are filled by evaluating a sky
model on the texel directions, so the lat-long axis convention does not
matter to the scenes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .adapter import GaussianSet, adapt
from .geometry import Mesh
from .lighting import EnvironmentLight, IndirectLight, texel_directions
from .scene_io import RunConfig, View
from .transport import build_bvh

SUN_DIR = np.array([0.45, -0.35, 0.82])
SUN_DIR = SUN_DIR / np.linalg.norm(SUN_DIR)


def sky(d, sun=SUN_DIR, sun_strength=2.5, sun_width=0.08):
    """Smooth sky: bright zenith, darker ground, a soft sun blob."""
    z = d[..., 2:3]
    zenith = np.array([0.55, 0.65, 0.85])
    horizon = np.array([0.9, 0.85, 0.75])
    ground = np.array([0.25, 0.22, 0.2])
    up = np.clip(z, 0, 1)
    col = np.where(z >= 0, horizon * (1 - up) + zenith * up, ground + (horizon - ground) * np.exp(4 * z))
    cos_s = np.sum(d * sun, axis=-1, keepdims=True)
    col = col + sun_strength * np.exp((cos_s - 1) / sun_width) * np.array([1.0, 0.95, 0.85])
    return col


def sky_env(h=32, **kw) -> EnvironmentLight:
    return EnvironmentLight(sky(texel_directions(h, 2 * h), **kw))


def orbit_views(n, radius, height_angles, width=128, height=128, fov=40.0, offset=0.0, target=(0, 0, 0)):
    views = []
    for i in range(n):
        az = offset + 2 * np.pi * i / n
        el = np.radians(height_angles[i % len(height_angles)])
        eye = np.asarray(target, float) + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az),
                                                             np.sin(el)])
        views.append(View.look_at(eye, target, width=width, height=height, fov_y_deg=fov, name=f"view{i:02d}"))
    return views


@dataclass
class SyntheticScene:
    name: str
    mesh: Mesh
    gaussians: GaussianSet          # carries the ground-truth attributes
    env: EnvironmentLight
    indirect: IndirectLight
    views: list
    material_fn: object

    @property
    def bvh(self):
        if not hasattr(self, "_bvh"):
            self._bvh = build_bvh(self.mesh)
        return self._bvh

    def with_targets(self, spp=256, seed=0, lighting="monte_carlo", occlusion=True):
        """Render ground-truth images and masks for every view."""
        from .fit import render_view

        out = []
        for v in self.views:
            img, alpha = render_view(self.gaussians, v, self.env, self.indirect, self.bvh, lighting, "forward",
                                     spp, seed, occlusion)
            out.append(v.with_targets(img, (alpha > 0.5).astype(np.float64)))
        self.views = out
        return self


MAT_A = (np.array([0.8, 0.3, 0.2]), 0.3, 0.0)
MAT_B = (np.array([0.2, 0.5, 0.8]), 0.7, 0.0)


def two_material(p):
    top = p[:, 2] > 0.0
    albedo = np.where(top[:, None], MAT_A[0], MAT_B[0])
    rho = np.where(top, MAT_A[1], MAT_B[1])
    metal = np.where(top, MAT_A[2], MAT_B[2])
    return albedo, rho, metal


def two_material_sphere(n_views=8, size=128, subdivisions=3, env_res=32, held_out=False) -> SyntheticScene:
    """Unit icosphere, red-ish glossy upper half and blue rough lower half."""
    mesh = geometry.icosphere(subdivisions)
    gs = adapt(mesh, "face")
    a, r, m = two_material(gs.positions)
    gs = gs.with_attributes(a, r, m)
    offset = np.pi / n_views if held_out else 0.0
    views = orbit_views(n_views, 3.2, (15.0, 40.0, -10.0), size, size, offset=offset)
    return SyntheticScene("two_material_sphere", mesh, gs, sky_env(env_res), IndirectLight.constant(0.0),
                          views, two_material)


def constant_sphere(albedo=(0.6, 0.4, 0.3), roughness=0.5, n_views=2, size=64, subdivisions=2):
    mesh = geometry.icosphere(subdivisions)
    gs = adapt(mesh, "face")
    P = len(gs)
    fn = lambda p: (np.tile(np.asarray(albedo, float), (len(p), 1)), np.full(len(p), roughness),
                    np.zeros(len(p)))
    gs = gs.with_attributes(*fn(gs.positions))
    views = orbit_views(n_views, 3.2, (20.0,), size, size)
    return SyntheticScene("constant_sphere", mesh, gs, sky_env(16), IndirectLight.constant(0.0), views, fn)


PLANE_ALBEDO = np.array([0.7, 0.6, 0.5])
BLOCKER_ALBEDO = np.array([0.3, 0.6, 0.3])


def plane_blocker_material(p):
    on_plane = p[:, 2] < 1e-6
    albedo = np.where(on_plane[:, None], PLANE_ALBEDO, BLOCKER_ALBEDO)
    return albedo, np.full(len(p), 0.8), np.zeros(len(p))


def plane_blocker(n_views=8, size=128, env_res=32) -> SyntheticScene:
    """Diffuse ground plane with a floating box above it; most sky light is blocked underneath."""
    plane = geometry.grid_plane(size=4.0, n=24)
    blocker = geometry.box((-0.7, -0.7, 0.35), (0.7, 0.7, 0.75), n=4)
    mesh = geometry.merge(plane, blocker)
    gs = adapt(mesh, "face")
    gs = gs.with_attributes(*plane_blocker_material(gs.positions))
    env = sky_env(env_res, sun_strength=1.5, sun_width=0.15)
    views = orbit_views(n_views, 4.5, (55.0, 70.0), size, size, fov=45.0)
    return SyntheticScene("plane_blocker", mesh, gs, env, IndirectLight.constant(0.15), views,
                          plane_blocker_material)


def acceptance_config(**kw) -> RunConfig:
    """Settings used by the desk-scale recovery checks (known lighting)."""
    base = dict(iterations=600, warmup_fraction=0.5, learn_env=False, learn_indirect=False, lambda_light=0.0)
    base.update(kw)
    return RunConfig(**base)
