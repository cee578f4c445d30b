"""Software Gaussian-splatting rasterizer.

Gaussians are projected with the local-affine (EWA) approximation
``Sigma_2D = J W Sigma W^T J^T``, sorted front to back by the camera depth of
their centres and alpha-composited per pixel. Compositing is linear in the
payload once the footprints are fixed, so the rasterizer exposes the
per-(pixel, Gaussian) blend weights and applies them to any payload: colours
for forward shading, attributes for the deferred G-buffer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
import scipy.sparse as sp

from .adapter import GaussianSet
from .scene_io import View

ALPHA_MAX = 0.99
CUTOFF = 9.0  # squared Mahalanobis radius (3 sigma)
NEAR = 1e-2


@numba.njit(cache=True)
def _composite(order, mu2, conic, opacity, box, height, width, capacity):
    T = np.ones(height * width)
    pix = np.empty(capacity, np.int64)
    gid = np.empty(capacity, np.int64)
    wts = np.empty(capacity, np.float64)
    n = 0
    for g in order:
        a, b, c = conic[g, 0], conic[g, 1], conic[g, 2]
        ux, uy = mu2[g, 0], mu2[g, 1]
        for py in range(box[g, 2], box[g, 3] + 1):
            dy = py + 0.5 - uy
            for px in range(box[g, 0], box[g, 1] + 1):
                dx = px + 0.5 - ux
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if q > CUTOFF:
                    continue
                al = opacity[g] * np.exp(-0.5 * q)
                if al > ALPHA_MAX:
                    al = ALPHA_MAX
                if al <= 0.0:
                    continue
                p = py * width + px
                pix[n] = p
                gid[n] = g
                wts[n] = al * T[p]
                n += 1
                T[p] *= 1.0 - al
    return pix[:n], gid[:n], wts[:n], T


@numba.njit(cache=True)
def _accumulate(pix, gid, wts, payload, out):
    for i in range(pix.shape[0]):
        p, g, w = pix[i], gid[i], wts[i]
        for ch in range(payload.shape[1]):
            out[p, ch] += w * payload[g, ch]


@dataclass
class Projection:
    mu2: np.ndarray       # (N, 2) pixel coordinates of centres
    depth: np.ndarray     # (N,) camera-space depth (-z)
    cov2d: np.ndarray     # (N, 2, 2)
    conic: np.ndarray     # (N, 3) inverse covariance (a, b, c)
    box: np.ndarray       # (N, 4) inclusive pixel bounds x0, x1, y0, y1
    visible: np.ndarray   # (N,) bool
    degenerate: int


def project(gs: GaussianSet, view: View, blur: float = 0.0) -> Projection:
    """EWA projection of every Gaussian; ``blur`` is a screen-space variance added to Sigma_2D."""
    W = view.rotation
    pc = gs.positions @ W.T + view.translation
    depth = -pc[:, 2]
    front = depth > NEAR
    d = np.where(front, depth, 1.0)
    fx, fy = view.focal_x, view.focal_y
    u = fx * pc[:, 0] / d + view.principal_x
    v = -fy * pc[:, 1] / d + view.principal_y
    J = np.zeros((len(gs), 2, 3))
    J[:, 0, 0] = fx / d
    J[:, 0, 2] = fx * pc[:, 0] / d ** 2
    J[:, 1, 1] = -fy / d
    J[:, 1, 2] = -fy * pc[:, 1] / d ** 2
    T = J @ W
    cov = np.einsum("nij,njk,nlk->nil", T, gs.covariances(), T)
    cov[:, 0, 0] += blur
    cov[:, 1, 1] += blur
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    scale = np.maximum(cov[:, 0, 0] * cov[:, 1, 1], 1e-300)
    good = np.isfinite(det) & (det > 1e-12 * scale) & (det > 0)
    degenerate = int(np.sum(front & ~good))
    with np.errstate(divide="ignore", invalid="ignore"):
        conic = np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], axis=1)
        rx = 3.0 * np.sqrt(np.maximum(cov[:, 0, 0], 0))
        ry = 3.0 * np.sqrt(np.maximum(cov[:, 1, 1], 0))
    x0 = np.ceil(u - rx - 0.5)
    x1 = np.floor(u + rx - 0.5)
    y0 = np.ceil(v - ry - 0.5)
    y1 = np.floor(v + ry - 0.5)
    visible = front & good & np.isfinite(x0 + x1 + y0 + y1)
    visible &= (x1 >= 0) & (x0 <= view.width - 1) & (y1 >= 0) & (y0 <= view.height - 1)
    visible &= gs.opacities > 0
    box = np.zeros((len(gs), 4), np.int64)
    vis = np.nonzero(visible)[0]
    box[vis, 0] = np.clip(x0[vis], 0, view.width - 1)
    box[vis, 1] = np.clip(x1[vis], 0, view.width - 1)
    box[vis, 2] = np.clip(y0[vis], 0, view.height - 1)
    box[vis, 3] = np.clip(y1[vis], 0, view.height - 1)
    conic[~visible] = 0.0
    return Projection(np.stack([u, v], 1), depth, cov, conic, box, visible, degenerate)


def depth_order(gs: GaussianSet, depth: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Front-to-back order of ``candidates``.

    Ties on depth are broken by position and payload, then by index, so a
    permutation of the input set composites in the same content order.
    """
    keys = [candidates]
    payload = gs.colors
    if payload is None and gs.attributes is not None:
        payload = np.column_stack([gs.attributes["albedo"], gs.attributes["roughness"], gs.attributes["metalness"]])
    if payload is not None:
        keys += [payload[candidates, i] for i in range(payload.shape[1])[::-1]]
    keys += [gs.normals[candidates, i] for i in (2, 1, 0)]
    keys += [gs.positions[candidates, i] for i in (2, 1, 0)]
    keys.append(depth[candidates])
    return candidates[np.lexsort(keys[1:])] if len(candidates) else candidates


@dataclass
class SplatWeights:
    """Blend weights w_i = alpha_i * prod_{j<i}(1 - alpha_j), stored in compositing order."""

    pixel: np.ndarray
    gaussian: np.ndarray
    weight: np.ndarray
    alpha: np.ndarray      # (H, W, 1)
    height: int
    width: int
    count: int
    degenerate: int
    depth: np.ndarray      # per-Gaussian camera depth

    def apply(self, payload):
        payload = np.asarray(payload, dtype=np.float64)
        width = payload.shape[-1] if payload.ndim > 1 else 1
        payload = np.ascontiguousarray(payload.reshape(self.count, width))
        out = np.zeros((self.height * self.width, payload.shape[1]))
        _accumulate(self.pixel, self.gaussian, self.weight, payload, out)
        return out.reshape(self.height, self.width, -1)

    def matrix(self):
        """Sparse (H*W, N) matrix M with image = M @ payload."""
        return sp.csr_matrix((self.weight, (self.pixel, self.gaussian)),
                             shape=(self.height * self.width, self.count))

    def visible_gaussians(self):
        return np.unique(self.gaussian)


def splat_weights(gs: GaussianSet, view: View, blur: float = 0.0) -> SplatWeights:
    proj = project(gs, view, blur)
    cand = np.nonzero(proj.visible)[0]
    order = depth_order(gs, proj.depth, cand)
    b = proj.box
    cap = int(np.sum((b[cand, 1] - b[cand, 0] + 1) * (b[cand, 3] - b[cand, 2] + 1))) if len(cand) else 0
    pix, gid, wts, T = _composite(order.astype(np.int64), np.ascontiguousarray(proj.mu2),
                                  np.ascontiguousarray(proj.conic), np.ascontiguousarray(gs.opacities, dtype=np.float64),
                                  b, view.height, view.width, cap)
    alpha = (1.0 - T).reshape(view.height, view.width, 1)
    return SplatWeights(pix, gid, wts, alpha, view.height, view.width, len(gs), proj.degenerate, proj.depth)


@dataclass
class Rendered:
    image: np.ndarray
    alpha: np.ndarray
    degenerate: int = 0


@dataclass
class GBuffer:
    """Alpha-normalised screen-space attributes (zero where alpha is zero)."""

    position: np.ndarray
    normal: np.ndarray
    albedo: np.ndarray
    roughness: np.ndarray
    metalness: np.ndarray
    alpha: np.ndarray
    depth: np.ndarray


def _normalized(acc, alpha):
    a = alpha[..., 0:1]
    return np.where(a > 0, acc / np.where(a > 0, a, 1.0), 0.0)


def rasterize(gs: GaussianSet, view: View, blur: float = 0.0, weights: SplatWeights | None = None):
    """Composite colours (forward payload) into an image, or attributes into a GBuffer."""
    sw = weights if weights is not None else splat_weights(gs, view, blur)
    if gs.colors is not None:
        return Rendered(sw.apply(gs.colors), sw.alpha, sw.degenerate)
    if gs.attributes is None:
        raise ValueError("Gaussian set carries no payload")
    return gbuffer(gs, view, sw)


def gbuffer(gs: GaussianSet, view: View, sw: SplatWeights) -> GBuffer:
    at = gs.attributes
    packed = np.column_stack([gs.positions, gs.normals, at["albedo"], at["roughness"], at["metalness"],
                              sw.depth])
    acc = sw.apply(packed)
    alpha = sw.alpha
    mean = _normalized(acc, alpha)
    n = mean[..., 3:6]
    nn = np.linalg.norm(n, axis=-1, keepdims=True)
    renorm = (alpha > 0.5) & (nn > 0)
    n = np.where(renorm, n / np.where(nn > 0, nn, 1.0), n)
    depth = np.where(alpha > 0, mean[..., 11:12], np.inf)
    return GBuffer(mean[..., 0:3], n, mean[..., 6:9], mean[..., 9:10], mean[..., 10:11], alpha, depth)


def render_depth_normal(gs: GaussianSet, view: View, blur: float = 0.0, weights: SplatWeights | None = None):
    """Alpha-normalised expected camera depth and camera-space normal per pixel.

    Empty pixels get depth +inf and normal (0, 0, 0).
    """
    sw = weights if weights is not None else splat_weights(gs, view, blur)
    n_cam = gs.normals @ view.rotation.T
    acc = sw.apply(np.column_stack([sw.depth, n_cam]))
    alpha = sw.alpha
    hit = alpha > 0
    depth = np.where(hit, acc[..., 0:1] / np.where(hit, alpha, 1.0), np.inf)
    n = acc[..., 1:4]
    nn = np.linalg.norm(n, axis=-1, keepdims=True)
    n = np.where(hit & (nn > 0), n / np.where(nn > 0, nn, 1.0), 0.0)
    return depth[..., 0], n, alpha[..., 0]
