"""Mesh ray tracing and Monte Carlo shading.

The BVH is a flat array tree (median split on the longest centroid axis,
leaves of at most four triangles) traversed by numba kernels. Occlusion rays
use any-hit traversal; camera rays use closest-hit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numba
import numpy as np

from . import rng
from .brdf import base_reflectance, eval_brdf_parts, fresnel_weight, sample_cosine, sample_ggx, specular_lobe
from .geometry import Mesh
from .lighting import hammersley

log = logging.getLogger(__name__)

LEAF_SIZE = 4
MAX_DEPTH = 64
DET_EPS = 1e-20


@dataclass
class Bvh:
    lo: np.ndarray        # (M, 3) node boxes
    hi: np.ndarray
    left: np.ndarray      # child index, -1 for leaves
    right: np.ndarray
    start: np.ndarray     # leaf range into ``order``
    count: np.ndarray
    order: np.ndarray     # triangle ids in leaf order
    v0: np.ndarray        # per-triangle data in original index order
    e1: np.ndarray
    e2: np.ndarray
    mesh: Mesh
    depth: int

    @property
    def diagonal(self):
        return self.mesh.bbox_diagonal()

    def leaf_ranges(self):
        leaves = np.nonzero(self.left < 0)[0]
        return [(int(self.start[i]), int(self.count[i])) for i in leaves]


def build_bvh(mesh: Mesh) -> Bvh:
    if mesh.n_faces == 0:
        raise ValueError("cannot build a BVH over an empty mesh")
    tri = mesh.triangles
    tlo, thi = tri.min(axis=1), tri.max(axis=1)
    cent = tri.mean(axis=1)
    lo, hi, left, right, start, count = [], [], [], [], [], []
    order = np.arange(mesh.n_faces)
    depth = 0
    # explicit stack: (node id, begin, end, depth)
    stack = [(0, 0, mesh.n_faces, 1)]
    lo.append(None); hi.append(None); left.append(-1); right.append(-1); start.append(0); count.append(0)
    while stack:
        node, b, e, d = stack.pop()
        depth = max(depth, d)
        ids = order[b:e]
        lo[node] = tlo[ids].min(axis=0)
        hi[node] = thi[ids].max(axis=0)
        if e - b <= LEAF_SIZE:
            start[node], count[node] = b, e - b
            continue
        c = cent[ids]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        order[b:e] = ids[np.argsort(c[:, axis], kind="stable")]
        mid = (b + e) // 2
        for child_b, child_e, slot in ((b, mid, left), (mid, e, right)):
            cid = len(lo)
            lo.append(None); hi.append(None); left.append(-1); right.append(-1); start.append(0); count.append(0)
            slot[node] = cid
            stack.append((cid, child_b, child_e, d + 1))
    if depth > MAX_DEPTH:
        raise RuntimeError("BVH depth limit exceeded")
    V = mesh.vertices[mesh.faces]
    return Bvh(np.array(lo), np.array(hi), np.array(left, np.int64), np.array(right, np.int64),
               np.array(start, np.int64), np.array(count, np.int64), order.astype(np.int64),
               np.ascontiguousarray(V[:, 0]), np.ascontiguousarray(V[:, 1] - V[:, 0]),
               np.ascontiguousarray(V[:, 2] - V[:, 0]), mesh, depth)


@numba.njit(cache=True)
def _tri_hit(ox, oy, oz, dx, dy, dz, v0, e1, e2, k, tmin, tmax):
    """Moller-Trumbore; returns (t, u, v) with t = inf on a miss."""
    e1x, e1y, e1z = e1[k, 0], e1[k, 1], e1[k, 2]
    e2x, e2y, e2z = e2[k, 0], e2[k, 1], e2[k, 2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < DET_EPS:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    tx, ty, tz = ox - v0[k, 0], oy - v0[k, 1], oz - v0[k, 2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf, 0.0, 0.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    if t <= tmin or t > tmax:
        return np.inf, 0.0, 0.0
    return t, u, v


@numba.njit(cache=True)
def _box_hit(lo, hi, node, ox, oy, oz, ix, iy, iz, tmin, tmax):
    pad = 1e-9 * (abs(hi[node, 0] - lo[node, 0]) + abs(hi[node, 1] - lo[node, 1]) + abs(hi[node, 2] - lo[node, 2])) + 1e-12
    t0, t1 = tmin, tmax
    for a in range(3):
        o = ox if a == 0 else (oy if a == 1 else oz)
        inv = ix if a == 0 else (iy if a == 1 else iz)
        ta = (lo[node, a] - pad - o) * inv
        tb = (hi[node, a] + pad - o) * inv
        if ta > tb:
            ta, tb = tb, ta
        if ta > t0:
            t0 = ta
        if tb < t1:
            t1 = tb
        if t0 > t1:
            return False
    return True


@numba.njit(cache=True)
def _safe_inv(d):
    if abs(d) < 1e-30:
        return 1e30 if d >= 0 else -1e30
    return 1.0 / d


@numba.njit(cache=True)
def _closest(lo, hi, left, right, start, count, order, v0, e1, e2, origins, dirs, tmin, tmax):
    n = origins.shape[0]
    t_out = np.full(n, np.inf)
    tri_out = np.full(n, -1, np.int64)
    u_out = np.zeros(n)
    v_out = np.zeros(n)
    stack = np.empty(2 * MAX_DEPTH + 2, np.int64)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix, iy, iz = _safe_inv(dx), _safe_inv(dy), _safe_inv(dz)
        best, best_k, bu, bv = tmax[r], -1, 0.0, 0.0
        sp_ = 0
        stack[sp_] = 0
        sp_ += 1
        while sp_ > 0:
            sp_ -= 1
            node = stack[sp_]
            if not _box_hit(lo, hi, node, ox, oy, oz, ix, iy, iz, tmin[r], best):
                continue
            if left[node] < 0:
                for j in range(start[node], start[node] + count[node]):
                    k = order[j]
                    t, u, v = _tri_hit(ox, oy, oz, dx, dy, dz, v0, e1, e2, k, tmin[r], tmax[r])
                    if t < best or (t == best and best_k >= 0 and k < best_k):
                        best, best_k, bu, bv = t, k, u, v
            else:
                stack[sp_] = left[node]
                stack[sp_ + 1] = right[node]
                sp_ += 2
        if best_k >= 0:
            t_out[r], tri_out[r], u_out[r], v_out[r] = best, best_k, bu, bv
    return t_out, tri_out, u_out, v_out


@numba.njit(cache=True)
def _any(lo, hi, left, right, start, count, order, v0, e1, e2, origins, dirs, tmin, tmax):
    n = origins.shape[0]
    out = np.zeros(n, np.bool_)
    stack = np.empty(2 * MAX_DEPTH + 2, np.int64)
    for r in range(n):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix, iy, iz = _safe_inv(dx), _safe_inv(dy), _safe_inv(dz)
        sp_ = 0
        stack[sp_] = 0
        sp_ += 1
        hit = False
        while sp_ > 0 and not hit:
            sp_ -= 1
            node = stack[sp_]
            if not _box_hit(lo, hi, node, ox, oy, oz, ix, iy, iz, tmin[r], tmax[r]):
                continue
            if left[node] < 0:
                for j in range(start[node], start[node] + count[node]):
                    t, u, v = _tri_hit(ox, oy, oz, dx, dy, dz, v0, e1, e2, order[j], tmin[r], tmax[r])
                    if t < np.inf:
                        hit = True
                        break
            else:
                stack[sp_] = left[node]
                stack[sp_ + 1] = right[node]
                sp_ += 2
        out[r] = hit
    return out


def _ray_args(origins, dirs, tmin, tmax):
    origins = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    dirs = np.ascontiguousarray(np.asarray(dirs, dtype=np.float64).reshape(-1, 3))
    n = len(origins)
    tmin = np.ascontiguousarray(np.broadcast_to(np.asarray(tmin, dtype=np.float64), (n,)))
    tmax = np.ascontiguousarray(np.broadcast_to(np.asarray(tmax, dtype=np.float64), (n,)))
    return origins, dirs, tmin, tmax


def closest_hit(bvh: Bvh, origins, dirs, tmin=0.0, tmax=np.inf):
    """Nearest intersection per ray: (t, triangle, u, v); misses give t=inf, triangle=-1."""
    o, d, t0, t1 = _ray_args(origins, dirs, tmin, tmax)
    return _closest(bvh.lo, bvh.hi, bvh.left, bvh.right, bvh.start, bvh.count, bvh.order,
                    bvh.v0, bvh.e1, bvh.e2, o, d, t0, t1)


def any_hit(bvh: Bvh, origins, dirs, tmin=0.0, tmax=np.inf):
    o, d, t0, t1 = _ray_args(origins, dirs, tmin, tmax)
    return _any(bvh.lo, bvh.hi, bvh.left, bvh.right, bvh.start, bvh.count, bvh.order,
                bvh.v0, bvh.e1, bvh.e2, o, d, t0, t1)


def brute_force_hits(mesh: Mesh, origins, dirs, tmin=0.0, tmax=np.inf):
    """Reference intersection of every ray against every triangle (numpy, no acceleration).

    Returns (t, triangle, any) with the lowest triangle index winning exact ties.
    """
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 1, 3)
    V = mesh.vertices[mesh.faces]
    v0, e1, e2 = V[None, :, 0], V[None, :, 1] - V[None, :, 0], V[None, :, 2] - V[None, :, 0]
    tmin = np.broadcast_to(np.asarray(tmin, float), (o.shape[0],))[:, None]
    tmax = np.broadcast_to(np.asarray(tmax, float), (o.shape[0],))[:, None]
    p = np.stack([d[..., 1] * e2[..., 2] - d[..., 2] * e2[..., 1],
                  d[..., 2] * e2[..., 0] - d[..., 0] * e2[..., 2],
                  d[..., 0] * e2[..., 1] - d[..., 1] * e2[..., 0]], axis=-1)
    det = e1[..., 0] * p[..., 0] + e1[..., 1] * p[..., 1] + e1[..., 2] * p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        tv = o - v0
        u = (tv[..., 0] * p[..., 0] + tv[..., 1] * p[..., 1] + tv[..., 2] * p[..., 2]) * inv
        q = np.stack([tv[..., 1] * e1[..., 2] - tv[..., 2] * e1[..., 1],
                      tv[..., 2] * e1[..., 0] - tv[..., 0] * e1[..., 2],
                      tv[..., 0] * e1[..., 1] - tv[..., 1] * e1[..., 0]], axis=-1)
        v = (d[..., 0] * q[..., 0] + d[..., 1] * q[..., 1] + d[..., 2] * q[..., 2]) * inv
        t = (e2[..., 0] * q[..., 0] + e2[..., 1] * q[..., 1] + e2[..., 2] * q[..., 2]) * inv
        ok = (np.abs(det) >= DET_EPS) & (u >= 0) & (u <= 1) & (v >= 0) & (u + v <= 1) & (t > tmin) & (t <= tmax)
    t = np.where(ok, t, np.inf)
    tri = np.argmin(t, axis=1)
    tbest = t[np.arange(len(t)), tri]
    tri = np.where(np.isfinite(tbest), tri, -1)
    return tbest, tri, ok.any(axis=1)


def occlusion(bvh: Bvh, x, wi, bias=None, normal=None):
    """Binary occlusion O in {0, 1} for rays leaving x along wi.

    Origins are offset by ``bias`` along wi (default 1e-4 of the scene diagonal)
    and by 1e-5 of the diagonal along ``normal`` when given. Rays stop at four
    scene diagonals.
    """
    diag = bvh.diagonal
    if bias is None:
        bias = 1e-4 * diag
    x = np.asarray(x, dtype=np.float64)
    wi = np.asarray(wi, dtype=np.float64)
    o = x + bias * wi
    if normal is not None:
        o = o + 1e-5 * diag * np.asarray(normal, dtype=np.float64)
    shape = np.broadcast_shapes(o.shape, wi.shape)[:-1]
    o = np.broadcast_to(o, shape + (3,))
    wi = np.broadcast_to(wi, shape + (3,))
    return any_hit(bvh, o, wi, 0.0, 4.0 * diag).reshape(shape).astype(np.float64)


@dataclass
class Hits:
    hit: np.ndarray       # (H, W) bool
    position: np.ndarray  # (H, W, 3), nan on misses
    normal: np.ndarray    # (H, W, 3) world space, 0 on misses
    depth: np.ndarray     # (H, W) camera z-depth, inf on misses
    distance: np.ndarray  # (H, W) ray length, inf on misses
    triangle: np.ndarray  # (H, W), -1 on misses


def raycast_view(bvh: Bvh, view) -> Hits:
    """Closest hit through every pixel centre with interpolated vertex normals."""
    d = view.pixel_rays()
    H, W = d.shape[:2]
    o = np.broadcast_to(view.position, d.shape)
    t, tri, u, v = closest_hit(bvh, o, d)
    hit = tri >= 0
    mesh = bvh.mesh
    f = mesh.faces[np.where(hit, tri, 0)]
    N = mesh.vertex_normals
    n = (1 - u - v)[:, None] * N[f[:, 0]] + u[:, None] * N[f[:, 1]] + v[:, None] * N[f[:, 2]]
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    n[~hit] = 0.0
    dflat = d.reshape(-1, 3)
    pos = np.where(hit[:, None], view.position + np.where(hit, t, 0.0)[:, None] * dflat, np.nan)
    zdir = -(dflat @ view.rotation.T)[:, 2]
    depth = np.where(hit, t * zdir, np.inf)
    return Hits(hit.reshape(H, W), pos.reshape(H, W, 3), n.reshape(H, W, 3), depth.reshape(H, W),
                np.where(hit, t, np.inf).reshape(H, W), tri.reshape(H, W))


# ---------------------------------------------------------------------------
# Monte Carlo estimator

def sample_uniforms(seed, point_ids, count, stream):
    """Randomly shifted Hammersley points, (P, count) each; unbiased and well stratified."""
    a, b = hammersley(count)
    ids = np.asarray(point_ids, dtype=np.int64)[:, None]
    s1 = rng.uniform(seed, ids, stream, 1)
    s2 = rng.uniform(seed, ids, stream, 2)
    return np.mod(a[None, :] + s1, 1.0), np.mod(b[None, :] + s2, 1.0)


@dataclass
class SampleBundle:
    """Frozen incident directions with their estimator weights.

    ``weight`` already folds in 1/pdf, the per-branch sample count and the
    branch average, so an estimate is ``sum_s weight * f_r * L_i * n.l``.
    Invalid (below-horizon) samples carry weight 0.
    """

    wi: np.ndarray        # (P, S, 3)
    weight: np.ndarray    # (P, S)
    nl: np.ndarray        # (P, S)
    occluded: np.ndarray  # (P, S) in {0, 1}
    n: np.ndarray         # (P, 3)
    wo: np.ndarray        # (P, 3)

    def incident(self, env, indirect):
        return (1 - self.occluded)[..., None] * env(self.wi) + self.occluded[..., None] * indirect(self.wi)


def draw_samples(x, n, wo, rho, count, seed=0, point_ids=None, bvh=None, occlusion_enabled=True, stream=0):
    """Half cosine, half GGX samples per point (the GGX branch gets the odd sample)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    n = np.asarray(n, dtype=np.float64).reshape(-1, 3)
    wo = np.asarray(wo, dtype=np.float64).reshape(-1, 3)
    rho = np.broadcast_to(np.asarray(rho, dtype=np.float64), (len(x),))
    P = len(x)
    ids = np.arange(P) if point_ids is None else np.asarray(point_ids)
    nc = count // 2
    ng = count - nc
    branches = (nc > 0) + (ng > 0)
    wis, wts = [], []
    if nc:
        u1, u2 = sample_uniforms(seed, ids, nc, 2 * stream)
        wi, pdf = sample_cosine(np.repeat(n[:, None], nc, 1), u1, u2)
        ok = pdf > 0
        wis.append(wi)
        wts.append(np.where(ok, 1.0 / np.where(ok, pdf, 1.0), 0.0) / (nc * branches))
    if ng:
        u1, u2 = sample_uniforms(seed, ids, ng, 2 * stream + 1)
        wi, pdf, ok = sample_ggx(np.repeat(n[:, None], ng, 1), np.repeat(wo[:, None], ng, 1), rho[:, None], u1, u2)
        wis.append(wi)
        wts.append(np.where(ok, 1.0 / np.where(ok, pdf, 1.0), 0.0) / (ng * branches))
    wi = np.concatenate(wis, axis=1)
    weight = np.concatenate(wts, axis=1)
    nl = np.sum(wi * n[:, None], axis=-1)
    weight = np.where(nl > 0, weight, 0.0)
    if bvh is not None and occlusion_enabled:
        occ = occlusion(bvh, x[:, None, :], wi, normal=n[:, None, :])
    else:
        occ = np.zeros(wi.shape[:2])
    return SampleBundle(wi, weight, np.maximum(nl, 0.0), occ, n, wo)


def bundle_geometry(bundle: SampleBundle):
    """Per-sample (n.v, n.h, Schlick weight) of a bundle; cached since directions are frozen."""
    g = getattr(bundle, "_geom", None)
    if g is None:
        n, wo, wi = bundle.n[:, None], bundle.wo[:, None], bundle.wi
        h = wi + wo
        h /= np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-300)
        nv = np.maximum(np.sum(bundle.n * bundle.wo, axis=-1), 0.0)
        nh = np.clip(np.sum(n * h, axis=-1), 0.0, 1.0)
        vh = np.clip(np.sum(wo * h, axis=-1), 0.0, 1.0)
        k = bundle.weight * bundle.nl * (nv > 0)[:, None]
        g = (np.ascontiguousarray(nv), np.ascontiguousarray(nh), np.ascontiguousarray(fresnel_weight(vh)),
             np.ascontiguousarray(k))
        bundle._geom = g
    return g


@numba.njit(cache=True)
def _bundle_sums(k, nl, nv, nh, fw, Li, rho, with_grad):
    P, S = k.shape
    irr = np.zeros((P, 3))
    sb = np.zeros((P, 3))
    sfb = np.zeros((P, 3))
    dsb = np.zeros((P, 3))
    dsfb = np.zeros((P, 3))
    s_all = np.zeros((P, S))
    for p in range(P):
        r = rho[p]
        alpha = max(r * r, 1e-4)
        a2 = alpha * alpha
        kk = alpha / 2.0
        dalpha = 2.0 * r if r * r > 1e-4 else 0.0
        x2 = nv[p]
        g1v = x2 / max(x2 * (1.0 - kk) + kk, 1e-7)
        dg1v = -x2 * (1.0 - x2) / max(x2 * (1.0 - kk) + kk, 1e-7) ** 2
        for s in range(S):
            w = k[p, s]
            if w == 0.0:
                continue
            x1 = nl[p, s]
            h = nh[p, s]
            t = h * h * (a2 - 1.0) + 1.0
            pt2 = max(np.pi * t * t, 1e-7)
            D = a2 / pt2
            g1l = x1 / max(x1 * (1.0 - kk) + kk, 1e-7)
            denom = max(4.0 * x1 * x2, 1e-7)
            sv = D * g1l * g1v / denom
            s_all[p, s] = sv
            f = fw[p, s]
            for c in range(3):
                b = w * Li[p, s, c]
                irr[p, c] += b
                sb[p, c] += b * sv
                sfb[p, c] += b * sv * f
            if with_grad:
                dD = 2.0 * alpha / pt2 * (1.0 - 2.0 * a2 * h * h / t)
                dg1l = -x1 * (1.0 - x1) / max(x1 * (1.0 - kk) + kk, 1e-7) ** 2
                dG = 0.5 * (dg1l * g1v + g1l * dg1v)
                ds = (dD * g1l * g1v + D * dG) / denom * dalpha
                for c in range(3):
                    b = w * Li[p, s, c]
                    dsb[p, c] += b * ds
                    dsfb[p, c] += b * ds * f
    return irr, sb, sfb, dsb, dsfb, s_all


def shade_bundle(bundle: SampleBundle, Li, albedo, rho, metal, with_grad=False):
    """Estimate diffuse and specular outgoing radiance from frozen samples.

    ``Li`` is the (P, S, 3) incident radiance. With ``with_grad`` also returns
    the per-point derivatives needed for backpropagation.
    """
    albedo = np.asarray(albedo, dtype=np.float64).reshape(-1, 3)
    rho = np.ascontiguousarray(np.asarray(rho, dtype=np.float64).reshape(-1))
    metal = np.asarray(metal, dtype=np.float64).reshape(-1)
    nv, nh, fw, k = bundle_geometry(bundle)
    irr, spec_b, spec_fb, dspec_b, dspec_fb, s = _bundle_sums(
        k, np.ascontiguousarray(bundle.nl), nv, nh, fw, np.ascontiguousarray(Li, dtype=np.float64), rho,
        with_grad)
    F0 = base_reflectance(albedo, metal)
    diffuse = (1 - metal)[:, None] * albedo / np.pi * irr
    specular = F0 * (spec_b - spec_fb) + spec_fb
    if not with_grad:
        return diffuse, specular
    grads = {
        "d_albedo": (1 - metal)[:, None] / np.pi * irr + metal[:, None] * (spec_b - spec_fb),
        "d_metal": -albedo / np.pi * irr + (albedo - 0.04) * (spec_b - spec_fb),
        "d_rho": F0 * (dspec_b - dspec_fb) + dspec_fb,
        "irradiance": irr / np.pi,
        "spec_b": spec_b, "d_spec_b": dspec_b,
        # per-sample pieces: d color / d Li = k * ((1 - m) a / pi + s (F0 (1 - fw) + fw))
        "k": k, "s": s, "fw": fw,
    }
    return diffuse, specular, grads


def estimate_radiance(x, n, wo, albedo, roughness, metalness, env, indirect, bvh=None, count=64, seed=0,
                      point_ids=None, occlusion_enabled=True, split=False):
    """Monte Carlo outgoing radiance with incident light (1 - O) L_dir + O L_ind.

    Points are rows of ``x``; returns (P, 3), or (diffuse, specular) with ``split``.
    """
    if count < 1:
        raise ValueError("need at least one sample")
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    b = draw_samples(x, n, wo, roughness, count, seed, point_ids, bvh, occlusion_enabled)
    Li = b.incident(env, indirect)
    P = len(x)
    albedo = np.broadcast_to(np.asarray(albedo, dtype=np.float64), (P, 3))
    rho = np.broadcast_to(np.asarray(roughness, dtype=np.float64), (P,))
    metal = np.broadcast_to(np.asarray(metalness, dtype=np.float64), (P,))
    d, s = shade_bundle(b, Li, albedo, rho, metal)
    return (d, s) if split else d + s


def demodulated_lighting(bundle: SampleBundle, Li, metal, rho):
    """Diffuse light with f_r -> (1 - m)/pi and specular light with the Fresnel-free lobe."""
    metal = np.asarray(metal, dtype=np.float64).reshape(-1)
    P = len(metal)
    d, _ = shade_bundle(bundle, Li, np.ones((P, 3)), rho, np.zeros(P))
    _, s = shade_bundle(bundle, Li, np.ones((P, 3)), rho, np.ones(P))
    return (1 - metal)[:, None] * d, s


def reference_radiance(x, n, wo, albedo, roughness, metalness, env, indirect, bvh=None, count=64, seed=0):
    """Slow per-sample loop over eval_brdf; used to cross-check the vectorized estimator."""
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((len(x), 3))
    b = draw_samples(x, n, wo, roughness, count, seed, None, bvh, bvh is not None)
    for p in range(len(x)):
        for s in range(b.wi.shape[1]):
            if b.weight[p, s] == 0:
                continue
            wi = b.wi[p, s]
            fd, fs = eval_brdf_parts(albedo[p], roughness[p], metalness[p], n[p], wi, wo[p])
            O = b.occluded[p, s]
            L = (1 - O) * env(wi[None])[0] + O * indirect(wi[None])[0]
            out[p] += b.weight[p, s] * (fd + fs) * L * b.nl[p, s]
    return out


def gaussian_occlusion(gs, x, wi, t_min=None):
    """Soft occlusion 1 - prod(1 - alpha_i) from tracing the flat Gaussians directly.

    Each Gaussian is treated as a disk in its own tangent plane; the ray's
    crossing point is weighted by the in-plane Gaussian falloff. Slow reference
    for small inputs only.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    wi = np.asarray(wi, dtype=np.float64).reshape(-1, 3)
    lo, hi = gs.positions.min(0), gs.positions.max(0)
    t_min = 1e-4 * float(np.linalg.norm(hi - lo)) if t_min is None else t_min
    R = gs.rotations
    nz = R[:, :, 2]
    out = np.zeros(len(x))
    for i in range(len(x)):
        denom = nz @ wi[i]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.sum((gs.positions - x[i]) * nz, axis=1) / denom
        ok = np.isfinite(t) & (t > t_min) & (np.abs(denom) > 1e-12)
        p = x[i] + t[ok, None] * wi[i]
        local = np.einsum("nij,ni->nj", R[ok], p - gs.positions[ok])
        q = (local[:, 0] / gs.scales[ok, 0]) ** 2 + (local[:, 1] / gs.scales[ok, 1]) ** 2
        a = np.minimum(gs.opacities[ok] * np.exp(-0.5 * q), 0.99)
        a = np.where(q <= 9.0, a, 0.0)
        out[i] = 1.0 - np.prod(1.0 - a)
    return out
