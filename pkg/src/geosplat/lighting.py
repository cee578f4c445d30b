"""Environment lighting.

Lat-long convention: +y is up. A direction ``d`` maps to longitude
``phi = atan2(d_x, -d_z)`` and colatitude ``theta = acos(d_y)``; texel
``(i, j)`` covers ``theta in [i, i+1) * pi / H`` and
``phi in [j, j+1) * 2 pi / W - pi``. Lookups are bilinear, wrapping in
longitude and clamping in latitude.

The split-sum tables (diffuse irradiance and GGX-prefiltered mips) are linear
in the radiance map, so they are built as fixed sparse/dense operators that
depend only on the map resolution. That keeps a learnable environment cheap:
the same operators map any texel values to shading inputs, and their
transposes carry gradients back.
"""

from __future__ import annotations

import functools
import hashlib
import logging
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import binfmt
from .brdf import alpha_of, base_reflectance, reflect, smith_g1

log = logging.getLogger(__name__)

SH_C0 = 0.282094791773878
SH_C1 = 0.488602511902920
SH_C2 = (1.092548430592079, 0.315391565252520, 0.546274215296039)

TABLE_RES = 32  # latitude rows of the prefiltered / irradiance maps


# ---------------------------------------------------------------------------
# lat-long mapping

def dir_to_uv(d):
    d = np.asarray(d, dtype=np.float64)
    phi = np.arctan2(d[..., 0], -d[..., 2])
    theta = np.arccos(np.clip(d[..., 1], -1.0, 1.0))
    return (phi + np.pi) / (2 * np.pi), theta / np.pi


def uv_to_dir(u, v):
    phi = 2 * np.pi * np.asarray(u) - np.pi
    theta = np.pi * np.asarray(v)
    st = np.sin(theta)
    return np.stack([st * np.sin(phi), np.cos(theta), -st * np.cos(phi)], axis=-1)


def texel_directions(h, w):
    v = (np.arange(h) + 0.5) / h
    u = (np.arange(w) + 0.5) / w
    U, V = np.meshgrid(u, v)
    return uv_to_dir(U, V)


def texel_solid_angles(h, w):
    """Exact solid angle of each texel, (h, w)."""
    edges = np.cos(np.arange(h + 1) * np.pi / h)
    return np.repeat(((edges[:-1] - edges[1:]) * 2 * np.pi / w)[:, None], w, axis=1)


def bilinear_taps(d, h, w):
    """Flat texel indices and weights, both (..., 4), for bilinear lookup of directions d."""
    u, v = dir_to_uv(d)
    x = u * w - 0.5
    y = np.clip(v * h - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x)
    fx = x - x0
    x0 = x0.astype(np.int64) % w
    x1 = (x0 + 1) % w
    y0 = np.floor(y).astype(np.int64)
    fy = y - y0
    y1 = np.minimum(y0 + 1, h - 1)
    idx = np.stack([y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1], axis=-1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=-1)
    return idx, wts


def tap_matrix(d, h, w):
    """Sparse (n, h*w) bilinear lookup matrix for a flat list of directions."""
    idx, wts = bilinear_taps(np.asarray(d).reshape(-1, 3), h, w)
    n = idx.shape[0]
    rows = np.repeat(np.arange(n), 4)
    return sp.csr_matrix((wts.ravel(), (rows, idx.ravel())), shape=(n, h * w))


def lookup(table, d):
    """Bilinear lookup in an (h, w, C) lat-long table."""
    h, w = table.shape[:2]
    idx, wts = bilinear_taps(d, h, w)
    flat = table.reshape(h * w, -1)
    return np.einsum("...k,...kc->...c", wts, flat[idx])


def hammersley(n):
    i = np.arange(n, dtype=np.uint64)
    bits = i.copy()
    bits = ((bits << np.uint64(16)) | (bits >> np.uint64(16))) & np.uint64(0xFFFFFFFF)
    for shift, mask in ((1, 0x55555555), (2, 0x33333333), (4, 0x0F0F0F0F), (8, 0x00FF00FF)):
        m = np.uint64(mask)
        s = np.uint64(shift)
        bits = ((bits & m) << s) | ((bits >> s) & m)
    return (i.astype(np.float64) + 0.5) / n, bits.astype(np.float64) / 4294967296.0


# ---------------------------------------------------------------------------
# environment map

class EnvironmentLight:
    """Lat-long radiance map with optional split-sum tables."""

    def __init__(self, radiance):
        r = np.asarray(radiance, dtype=np.float64)
        if r.ndim != 3 or r.shape[2] != 3:
            raise ValueError("environment map must be H x W x 3")
        if r.shape[1] != 2 * r.shape[0]:
            raise ValueError(f"environment map aspect ratio must be 2:1, got {r.shape[1]}x{r.shape[0]}")
        if not np.all(np.isfinite(r)):
            raise ValueError("environment map has non-finite texels")
        if np.any(r < 0):
            raise ValueError("environment map has negative texels")
        self.radiance = r
        self.prefiltered = None
        self.irradiance = None
        self.brdf_lut = None

    @property
    def shape(self):
        return self.radiance.shape[:2]

    def __call__(self, d):
        return lookup(self.radiance, d)

    def content_hash(self):
        return hashlib.sha256(np.ascontiguousarray(self.radiance).tobytes() + str(self.shape).encode()).hexdigest()[:16]

    def prefiltered_lookup(self, d, rho):
        """Trilinear lookup: bilinear in each mip, linear across the two mips bracketing rho."""
        if self.prefiltered is None:
            raise RuntimeError("split-sum tables not precomputed")
        mips = len(self.prefiltered)
        lo, hi, t = mip_weights(rho, mips)
        out = np.zeros(np.shape(d)[:-1] + (3,))
        for level in range(mips):
            wl = np.where(lo == level, 1 - t, 0.0) + np.where(hi == level, t, 0.0)
            if np.any(wl > 0):
                out += wl[..., None] * lookup(self.prefiltered[level], d)
        return out

    def irradiance_lookup(self, n):
        if self.irradiance is None:
            raise RuntimeError("split-sum tables not precomputed")
        return lookup(self.irradiance, n)


def mip_weights(rho, mips):
    x = np.clip(np.asarray(rho, dtype=np.float64), 0.0, 1.0) * (mips - 1)
    lo = np.minimum(np.floor(x).astype(np.int64), mips - 2) if mips > 1 else np.zeros_like(x, dtype=np.int64)
    hi = np.minimum(lo + 1, mips - 1)
    return lo, hi, x - lo if mips > 1 else np.zeros_like(x)


def downsample(radiance, h):
    """Area-average a lat-long map to h rows (no-op when already that small)."""
    if radiance.shape[0] <= h:
        return radiance
    import cv2

    return cv2.resize(radiance, (2 * h, h), interpolation=cv2.INTER_AREA).astype(np.float64)


# ---------------------------------------------------------------------------
# split-sum operators

@functools.lru_cache(maxsize=8)
def irradiance_operator(h, w):
    """Dense (h*w, h*w) matrix: normalized cosine-weighted average over the sphere."""
    d = texel_directions(h, w).reshape(-1, 3)
    dw = texel_solid_angles(h, w).ravel()
    K = np.maximum(d @ d.T, 0.0) * dw[None, :]
    return K / K.sum(axis=1, keepdims=True)


@functools.lru_cache(maxsize=16)
def prefilter_operator(h, w, rho, samples=512):
    """Sparse (h*w, h*w) GGX prefilter at roughness rho under the n = v = r assumption."""
    n = texel_directions(h, w).reshape(-1, 3)
    from .brdf import sample_ggx_half

    u1, u2 = hammersley(samples)
    N = np.repeat(n[:, None, :], samples, axis=1)
    H = sample_ggx_half(N, rho, u1[None, :], u2[None, :])
    vh = np.sum(N * H, axis=-1)
    L = 2 * vh[..., None] * H - N
    nl = np.sum(N * L, axis=-1)
    wgt = np.where(nl > 0, nl, 0.0)
    idx, tw = bilinear_taps(L, h, w)
    rows = np.broadcast_to(np.arange(len(n))[:, None, None], idx.shape)
    vals = wgt[..., None] * tw
    M = sp.csr_matrix((vals.ravel(), (rows.ravel(), idx.ravel())), shape=(len(n), h * w))
    norm = np.asarray(M.sum(axis=1)).ravel()
    return sp.diags(1.0 / norm) @ M


@functools.lru_cache(maxsize=4)
def brdf_lut(n=64, samples=1024):
    """(n, n, 2) table of (scale, bias) over (n.v, rho) at texel centres.

    The specular integral factors as F0 * scale + bias with Schlick Fresnel.
    """
    nv = (np.arange(n) + 0.5) / n
    rho = (np.arange(n) + 0.5) / n
    u1, u2 = hammersley(samples)
    NV, R = np.meshgrid(nv, rho, indexing="ij")
    alpha = alpha_of(R)[..., None]
    a2 = alpha ** 2
    cos_t = np.sqrt((1 - u1) / (1 + (a2 - 1) * u1))
    sin_t = np.sqrt(np.maximum(1 - cos_t ** 2, 0))
    phi = 2 * np.pi * u2
    hx, hy, hz = sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t
    vx = np.sqrt(1 - NV ** 2)[..., None]
    vz = NV[..., None]
    vh = vx * hx + vz * hz
    lz = 2 * vh * hz - vz
    k = alpha / 2
    ok = (lz > 0) & (vh > 0)
    lz_ = np.where(ok, lz, 1.0)
    G = smith_g1(lz_, k) * smith_g1(vz, k)
    gvis = np.where(ok, G * vh / (hz * vz), 0.0)
    fc = (1 - np.clip(vh, 0, 1)) ** 5
    A = np.mean((1 - fc) * gvis, axis=-1)
    B = np.mean(fc * gvis, axis=-1)
    return np.stack([A, B], axis=-1)


def lut_lookup(lut, nv, rho, with_grad=False):
    """Bilinear (clamped) lookup; optionally also d/d rho of both channels."""
    n = lut.shape[0]
    x = np.clip(np.asarray(nv) * n - 0.5, 0, n - 1)
    y = np.clip(np.asarray(rho) * n - 0.5, 0, n - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), n - 2)
    y0 = np.minimum(np.floor(y).astype(np.int64), n - 2)
    fx, fy = (x - x0)[..., None], (y - y0)[..., None]
    c00, c01 = lut[x0, y0], lut[x0, y0 + 1]
    c10, c11 = lut[x0 + 1, y0], lut[x0 + 1, y0 + 1]
    val = (1 - fx) * ((1 - fy) * c00 + fy * c01) + fx * ((1 - fy) * c10 + fy * c11)
    if not with_grad:
        return val
    inside = ((np.asarray(rho) * n - 0.5 > 0) & (np.asarray(rho) * n - 0.5 < n - 1))[..., None]
    d = ((1 - fx) * (c01 - c00) + fx * (c11 - c10)) * n
    return val, np.where(inside, d, 0.0)


def precompute_splitsum(env: EnvironmentLight, mips=6, lut_n=64, lut_samples=1024, cache_dir=None):
    """Fill ``env.prefiltered``, ``env.irradiance`` and ``env.brdf_lut``.

    With ``cache_dir`` the tables are stored there, keyed by the radiance
    content hash and the table settings.
    """
    if mips < 1:
        raise ValueError("mips must be >= 1")
    key = f"{env.content_hash()}_m{mips}_l{lut_n}_{lut_samples}"
    path = Path(cache_dir) / f"splitsum_{key}.bin" if cache_dir else None
    if path is not None and path.exists():
        header, arrays = binfmt.read(path)
        env.prefiltered = [arrays[f"mip{i}"] for i in range(header["mips"])]
        env.irradiance = arrays["irradiance"]
        env.brdf_lut = arrays["lut"]
        return env
    h = min(env.shape[0], TABLE_RES)
    small = downsample(env.radiance, h)
    flat = small.reshape(-1, 3)
    pyramid = [env.radiance]
    for level in range(1, mips):
        rho = level / (mips - 1)
        pyramid.append((prefilter_operator(h, 2 * h, rho) @ flat).reshape(h, 2 * h, 3))
    env.prefiltered = pyramid
    env.irradiance = (irradiance_operator(h, 2 * h) @ flat).reshape(h, 2 * h, 3)
    env.brdf_lut = brdf_lut(lut_n, lut_samples)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {f"mip{i}": m for i, m in enumerate(pyramid)}
        arrays.update(irradiance=env.irradiance, lut=env.brdf_lut)
        binfmt.write(path, {"kind": "splitsum_tables", "mips": mips, "source_hash": env.content_hash()}, arrays)
    return env


def shade_splitsum(albedo, roughness, metalness, n, wo, env: EnvironmentLight, split=False):
    """Split-sum shading; returns RGB (or (diffuse, specular) with ``split``)."""
    albedo = np.asarray(albedo, dtype=np.float64)
    rho = np.asarray(roughness, dtype=np.float64)
    m = np.asarray(metalness, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    nv = np.clip(np.sum(n * wo, axis=-1), 0.0, 1.0)
    r = reflect(-wo, n)
    diffuse = (1 - m)[..., None] * albedo * env.irradiance_lookup(n)
    AB = lut_lookup(env.brdf_lut, nv, rho)
    F0 = base_reflectance(albedo, m)
    specular = env.prefiltered_lookup(r, rho) * (F0 * AB[..., 0:1] + AB[..., 1:2])
    return (diffuse, specular) if split else diffuse + specular


# ---------------------------------------------------------------------------
# spherical harmonics indirect light

def sh_basis(d, degree=2):
    """Real SH basis values, (..., (degree+1)^2)."""
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = [np.full(x.shape, SH_C0)]
    if degree >= 1:
        out += [SH_C1 * y, SH_C1 * z, SH_C1 * x]
    if degree >= 2:
        out += [SH_C2[0] * x * y, SH_C2[0] * y * z, SH_C2[1] * (3 * z * z - 1),
                SH_C2[0] * x * z, SH_C2[2] * (x * x - y * y)]
    return np.stack(out, axis=-1)


class IndirectLight:
    """Global SH radiance L_ind(w) = max(sum_k c_k Y_k(w), 0)."""

    def __init__(self, coeffs, degree=None):
        c = np.asarray(coeffs, dtype=np.float64)
        if c.ndim == 1:
            c = c.reshape(-1, 3)
        if degree is None:
            degree = int(round(np.sqrt(c.shape[0]))) - 1
        if c.shape != ((degree + 1) ** 2, 3):
            raise ValueError(f"degree {degree} needs {(degree + 1) ** 2} RGB coefficients, got {c.shape[0]}")
        if not np.all(np.isfinite(c)):
            raise ValueError("SH coefficients must be finite")
        self.coeffs = c
        self.degree = degree

    @classmethod
    def constant(cls, value, degree=2):
        c = np.zeros(((degree + 1) ** 2, 3))
        c[0] = np.asarray(value, dtype=np.float64) / SH_C0
        return cls(c, degree)

    def __call__(self, d):
        return np.maximum(sh_basis(d, self.degree) @ self.coeffs, 0.0)


def compose_incident(env, indirect, O, d):
    """Incident radiance (1 - O) L_dir(d) + O L_ind(d)."""
    O = np.asarray(O, dtype=np.float64)
    if O.ndim:
        O = O[..., None]
    return (1 - O) * env(d) + O * indirect(d)
