"""Training losses and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _check(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"dimension mismatch: {np.shape(a)} vs {np.shape(b)}")


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x, g):
    """Separable 'valid' filtering of an (H, W, C) stack with a symmetric 1-D kernel."""
    r = len(g) // 2
    y = correlate1d(x, g, axis=0, mode="constant")[r:x.shape[0] - r]
    return correlate1d(y, g, axis=1, mode="constant")[:, r:x.shape[1] - r]


def _filter_adjoint(y, g, shape):
    """Adjoint of _filter_valid: scatter back to the full image."""
    r = len(g) // 2
    full = np.zeros(shape[:2] + (y.shape[2],))
    full[r:shape[0] - r, r:shape[1] - r] = y
    # the kernel is symmetric, so correlation is its own adjoint on zero-padded data
    full = correlate1d(full, g, axis=1, mode="constant")
    return correlate1d(full, g, axis=0, mode="constant")


def _as3(x):
    x = np.asarray(x, dtype=np.float64)
    return x[..., None] if x.ndim == 2 else x


def ssim(a, b, with_grad=False, data_range=1.0):
    """Mean SSIM over valid window positions and channels.

    With ``with_grad`` also returns d SSIM / d a.
    """
    _check(a, b)
    a, b = _as3(a), _as3(b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    g = gaussian_window()
    C1, C2 = (K1 * data_range) ** 2, (K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    ea2, eb2, eab = _filter_valid(a * a, g), _filter_valid(b * b, g), _filter_valid(a * b, g)
    va, vb, cov = ea2 - mu_a ** 2, eb2 - mu_b ** 2, eab - mu_a * mu_b
    A1, A2 = 2 * mu_a * mu_b + C1, 2 * cov + C2
    B1, B2 = mu_a ** 2 + mu_b ** 2 + C1, va + vb + C2
    S = A1 * A2 / (B1 * B2)
    value = float(S.mean())
    if not with_grad:
        return value
    M = S.size
    d_mu = S * (2 * mu_b / A1 - 2 * mu_b / A2 - 2 * mu_a / B1 + 2 * mu_a / B2) / M
    d_ea2 = -S / B2 / M
    d_eab = 2 * S / A2 / M
    grad = (_filter_adjoint(d_mu, g, a.shape) + 2 * a * _filter_adjoint(d_ea2, g, a.shape)
            + b * _filter_adjoint(d_eab, g, a.shape))
    return value, grad


def psnr(pred, gt, mask=None):
    """PSNR in dB of [0,1]-clamped images (optionally over mask > 0.5); +inf when identical."""
    _check(pred, gt)
    d = (np.clip(pred, 0, 1) - np.clip(gt, 0, 1)) ** 2
    if mask is not None:
        m = np.asarray(mask).reshape(d.shape[:2]) > 0.5
        d = d[m]
    mse = float(np.mean(d))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


def normal_mae(pred_n, gt_n, mask=None):
    """Mean angular error in degrees over masked pixels."""
    _check(pred_n, gt_n)
    dot = np.clip(np.sum(np.asarray(pred_n) * np.asarray(gt_n), axis=-1), -1.0, 1.0)
    ang = np.degrees(np.arccos(dot))
    if mask is not None:
        ang = ang[np.asarray(mask).reshape(ang.shape) > 0.5]
    return float(np.mean(ang)) if ang.size else float("nan")


def l1(pred, gt, with_grad=False):
    _check(pred, gt)
    d = np.asarray(pred, dtype=np.float64) - gt
    v = float(np.mean(np.abs(d)))
    return (v, np.sign(d) / d.size) if with_grad else v


def mask_mse(alpha, mask):
    _check(alpha, mask)
    return float(np.mean((np.asarray(alpha, dtype=np.float64) - mask) ** 2))


def photometric_loss(pred, alpha, gt, mask, lambda_ssim=0.2, lambda_mask=5.0):
    """Components (l1, 1 - SSIM, mask MSE) and their weighted sum."""
    _check(pred, gt)
    _check(alpha, mask)
    c = {"l1": l1(pred, gt), "ssim_term": 1.0 - ssim(pred, gt), "mask": mask_mse(alpha, mask)}
    c["total"] = c["l1"] + lambda_ssim * c["ssim_term"] + lambda_mask * c["mask"]
    return c


def light_regularizer(L_d, L_s, I_gt, with_grad=False):
    """Mean |mean_c(L_d + L_s) - max_c(I_gt)|; the gradient is w.r.t. L_d (equal for L_s)."""
    _check(L_d, L_s)
    _check(L_d, I_gt)
    L = np.asarray(L_d, dtype=np.float64) + L_s
    r = L.mean(axis=-1) - np.asarray(I_gt).max(axis=-1)
    v = float(np.mean(np.abs(r)))
    if not with_grad:
        return v
    g = np.sign(r)[..., None] / r.size / L.shape[-1]
    return v, np.broadcast_to(g, L.shape).copy()


@dataclass
class LossReport:
    l1: float = 0.0
    ssim_term: float = 0.0
    mask: float = 0.0
    entropy: float = 0.0
    smoothness: float = 0.0
    light_reg: float = 0.0
    weights: dict = field(default_factory=dict)

    @property
    def total(self):
        w = self.weights
        return (self.l1 + w.get("ssim", 0.0) * self.ssim_term + w.get("mask", 0.0) * self.mask
                + w.get("sdf", 0.0) * self.entropy + w.get("smooth", 0.0) * self.smoothness
                + w.get("light", 0.0) * self.light_reg)

    def as_dict(self):
        d = {k: getattr(self, k) for k in ("l1", "ssim_term", "mask", "entropy", "smoothness", "light_reg")}
        d["total"] = self.total
        d["weights"] = dict(self.weights)
        return d


def albedo_scale(pred, gt, mask=None):
    """Per-channel least-squares factor s minimizing |s * pred - gt|^2 over the mask."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if mask is not None:
        m = np.asarray(mask).reshape(-1) > 0.5
        p, g = p[m], g[m]
    den = np.sum(p * p, axis=0)
    return np.where(den > 0, np.sum(p * g, axis=0) / np.where(den > 0, den, 1.0), 1.0)


def reflect(d, n):
    return d - 2 * np.sum(d * n, axis=-1, keepdims=True) * n


@dataclass
class Consistency:
    reflection_mae_deg: float
    distance_l1: float
    coverage: float
    valid: bool
    pixels: int


def consistency_from_maps(ray_dirs, dist_a, normal_a, hit_a, dist_b, normal_b, hit_b, diag):
    """Compare two (distance along ray, world normal) renderings over their co-hit pixels.

    Returns summed angle / distance error and the co-hit count so several
    views can be pooled.
    """
    both = hit_a & hit_b
    d = ray_dirs[both]
    ra = reflect(d, normal_a[both])
    rb = reflect(d, normal_b[both])
    ra /= np.linalg.norm(ra, axis=-1, keepdims=True)
    rb /= np.linalg.norm(rb, axis=-1, keepdims=True)
    ang = np.degrees(np.arccos(np.clip(np.sum(ra * rb, axis=-1), -1, 1)))
    dist = np.abs(dist_a[both] - dist_b[both]) / diag
    return float(ang.sum()), float(dist.sum()), int(both.sum()), int(both.size)


def shape_consistency(bvh, gaussians, views, blur=0.0, alpha_threshold=0.5):
    """Reflection-direction MAE (degrees) and ray-distance L1 (fraction of the bbox diagonal).

    Splat depth and normals come from alpha-normalized rasterization; the
    reference is the closest mesh hit. Coverage below 1% of pixels is invalid.
    """
    from .splat import render_depth_normal
    from .transport import raycast_view

    diag = bvh.diagonal
    ang_sum = dist_sum = 0.0
    count = total = 0
    for view in views:
        depth, n_cam, alpha = render_depth_normal(gaussians, view, blur)
        hits = raycast_view(bvh, view)
        rays_cam = view.camera_rays()
        dist = depth / np.maximum(-rays_cam[..., 2], 1e-12)
        n_world = n_cam @ view.rotation
        a, dsum, c, t = consistency_from_maps(view.pixel_rays(), dist, n_world, alpha > alpha_threshold,
                                              hits.distance, hits.normal, hits.hit, diag)
        ang_sum += a
        dist_sum += dsum
        count += c
        total += t
    coverage = count / max(total, 1)
    if count == 0:
        return Consistency(float("nan"), float("nan"), 0.0, False, 0)
    return Consistency(ang_sum / count, dist_sum / count, coverage, coverage >= 0.01, count)
