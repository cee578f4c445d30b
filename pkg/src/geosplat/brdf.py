"""GGX microfacet BRDF and importance sampling.

All functions are vectorized: directions are ``(..., 3)`` arrays of unit
vectors and material channels broadcast against them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = 1e-7
ALPHA_MIN = 1e-4
F0_DIELECTRIC = 0.04


@dataclass(frozen=True)
class MaterialSample:
    albedo: np.ndarray
    roughness: float
    metalness: float

    def __post_init__(self):
        a = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        object.__setattr__(self, "albedo", a)
        if np.any(a < 0) or np.any(a > 1) or not np.all(np.isfinite(a)):
            raise ValueError("albedo must lie in [0, 1]^3")
        if not 0.0 <= self.roughness <= 1.0:
            raise ValueError("roughness must lie in [0, 1]")
        if not 0.0 <= self.metalness <= 1.0:
            raise ValueError("metalness must lie in [0, 1]")


def _dot(a, b):
    return np.sum(a * b, axis=-1)


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def alpha_of(rho):
    """GGX alpha from perceptual roughness (alpha = rho^2, floored)."""
    return np.maximum(np.asarray(rho, dtype=np.float64) ** 2, ALPHA_MIN)


def ggx_d(nh, alpha):
    a2 = alpha * alpha
    t = nh * nh * (a2 - 1.0) + 1.0
    return a2 / np.maximum(np.pi * t * t, EPS)


def smith_g1(x, k):
    return x / np.maximum(x * (1.0 - k) + k, EPS)


def fresnel_weight(vh):
    """Schlick weight (1 - v.h)^5; F = F0 + (1 - F0) * weight."""
    return np.clip(1.0 - vh, 0.0, 1.0) ** 5


def base_reflectance(albedo, metalness):
    m = np.asarray(metalness)[..., None]
    return F0_DIELECTRIC * (1.0 - m) + np.asarray(albedo) * m


def specular_lobe(nl, nv, nh, rho, with_grad=False):
    """Scalar part D*G / (4 n.l n.v) of the specular term (Fresnel excluded).

    With ``with_grad`` also returns the derivative with respect to rho.
    """
    rho = np.asarray(rho, dtype=np.float64)
    alpha = alpha_of(rho)
    k = alpha / 2.0
    D = ggx_d(nh, alpha)
    g1l, g1v = smith_g1(nl, k), smith_g1(nv, k)
    denom = np.maximum(4.0 * nl * nv, EPS)
    s = D * g1l * g1v / denom
    if not with_grad:
        return s
    a2 = alpha * alpha
    t = nh * nh * (a2 - 1.0) + 1.0
    dD = 2.0 * alpha / np.maximum(np.pi * t * t, EPS) * (1.0 - 2.0 * a2 * nh * nh / t)
    dg = lambda x: -x * (1.0 - x) / np.maximum(x * (1.0 - k) + k, EPS) ** 2
    dG = 0.5 * (dg(nl) * g1v + g1l * dg(nv))
    dalpha = np.where(rho * rho > ALPHA_MIN, 2.0 * rho, 0.0)
    ds = (dD * g1l * g1v + D * dG) / denom * dalpha
    return s, ds


def eval_brdf_parts(albedo, roughness, metalness, n, wi, wo):
    """Diffuse and specular parts of f_r, each (..., 3); zero below either horizon."""
    albedo = np.asarray(albedo, dtype=np.float64)
    m = np.asarray(metalness, dtype=np.float64)
    nl, nv = _dot(n, wi), _dot(n, wo)
    ok = (nl > 0) & (nv > 0)
    h = wi + wo
    hl = np.linalg.norm(h, axis=-1, keepdims=True)
    h = h / np.where(hl > 0, hl, 1.0)
    nh = np.clip(_dot(n, h), 0.0, 1.0)
    vh = np.clip(_dot(wo, h), 0.0, 1.0)
    s = specular_lobe(np.maximum(nl, 0), np.maximum(nv, 0), nh, roughness)
    F0 = base_reflectance(albedo, m)
    fw = fresnel_weight(vh)[..., None]
    F = F0 + (1.0 - F0) * fw
    diffuse = (1.0 - m)[..., None] * albedo / np.pi
    spec = s[..., None] * F
    mask = ok[..., None]
    return np.where(mask, diffuse, 0.0) * np.ones_like(spec), np.where(mask, spec, 0.0)


def eval_brdf(mat, n, wi, wo):
    """f_r(wi, wo) for a MaterialSample (or an (albedo, roughness, metalness) tuple)."""
    if isinstance(mat, MaterialSample):
        a, r, m = mat.albedo, mat.roughness, mat.metalness
    else:
        a, r, m = mat
    d, s = eval_brdf_parts(a, r, m, np.asarray(n, float), np.asarray(wi, float), np.asarray(wo, float))
    return d + s


def tangent_frame(n):
    """Branchless orthonormal basis (t, b) around unit n."""
    sign = np.where(n[..., 2] >= 0, 1.0, -1.0)
    a = -1.0 / (sign + n[..., 2])
    b = n[..., 0] * n[..., 1] * a
    t = np.stack([1.0 + sign * n[..., 0] ** 2 * a, sign * b, -sign * n[..., 0]], axis=-1)
    bt = np.stack([b, sign + n[..., 1] ** 2 * a, -n[..., 1]], axis=-1)
    return t, bt


def _to_world(local, n):
    t, b = tangent_frame(n)
    return local[..., 0:1] * t + local[..., 1:2] * b + local[..., 2:3] * n


def sample_cosine(n, u1, u2):
    """Cosine-weighted hemisphere sample about n; returns (wi, pdf)."""
    n = np.asarray(n, dtype=np.float64)
    r = np.sqrt(u1)
    phi = 2.0 * np.pi * u2
    z = np.sqrt(np.maximum(1.0 - u1, 0.0))
    local = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=-1)
    wi = _to_world(local, n)
    return wi, np.maximum(_dot(n, wi), 0.0) / np.pi


def sample_ggx_half(n, rho, u1, u2):
    """Half vector distributed as D(h) |n.h|."""
    a2 = alpha_of(rho) ** 2
    cos_t = np.sqrt((1.0 - u1) / (1.0 + (a2 - 1.0) * u1))
    sin_t = np.sqrt(np.maximum(1.0 - cos_t * cos_t, 0.0))
    phi = 2.0 * np.pi * u2
    local = np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], axis=-1)
    return _to_world(local, np.asarray(n, dtype=np.float64))


def ggx_pdf(n, wo, wi, rho):
    """Solid-angle density of reflect(-wo, h) with h ~ D(h)|n.h|."""
    h = _unit(wi + wo)
    nh = np.clip(_dot(n, h), 0.0, 1.0)
    vh = np.abs(_dot(wo, h))
    return ggx_d(nh, alpha_of(rho)) * nh / np.maximum(4.0 * vh, EPS)


def sample_ggx(n, wo, rho, u1, u2):
    """GGX importance sample; returns (wi, pdf, valid).

    ``valid`` is False where the reflected direction falls below the surface;
    those samples carry pdf 0 and are left to the caller to reject.
    """
    n = np.asarray(n, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    h = sample_ggx_half(n, rho, u1, u2)
    vh = _dot(wo, h)
    wi = 2.0 * vh[..., None] * h - wo
    nh = np.clip(_dot(n, h), 0.0, 1.0)
    pdf = ggx_d(nh, alpha_of(rho)) * nh / np.maximum(4.0 * np.abs(vh), EPS)
    valid = (_dot(n, wi) > 0) & (vh > 0)
    return wi, np.where(valid, pdf, 0.0), valid


def sample_ggx_retry(n, wo, rho, uniforms, attempts=8):
    """Rejection variant: retry below-horizon draws, then fall back to a cosine sample.

    ``uniforms(k)`` returns the (u1, u2) pair for attempt k. The returned pdf
    is the density of the branch that produced the direction.
    """
    wi, pdf, valid = sample_ggx(n, wo, rho, *uniforms(0))
    for k in range(1, attempts):
        if np.all(valid):
            break
        w2, p2, v2 = sample_ggx(n, wo, rho, *uniforms(k))
        take = ~valid & v2
        wi = np.where(take[..., None], w2, wi)
        pdf = np.where(take, p2, pdf)
        valid = valid | v2
    if not np.all(valid):
        wc, pc = sample_cosine(n, *uniforms(attempts))
        wi = np.where(valid[..., None], wi, wc)
        pdf = np.where(valid, pdf, pc)
    return wi, pdf


def reflect(d, n):
    """Mirror direction of incoming direction d about n (d points toward the surface)."""
    return d - 2.0 * _dot(d, n)[..., None] * n
