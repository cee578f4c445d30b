"""Spatially varying material field.

Five raw channels (three albedo logits, roughness logit, metalness logit) are
stored on dense grids at several resolutions. A query sums the trilinear
interpolants of all levels and applies a logistic per channel. Because the
raw value is linear in the parameters, the field is represented at a fixed
set of points by a sparse interpolation matrix ``Q`` with ``raw = Q @ params``,
and the parameter gradient is ``Q.T @ (g * sigma'(raw))``.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from . import binfmt, rng
from .brdf import MaterialSample

CHANNELS = 5


def logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logistic_grad(x):
    s = logistic(x)
    return s * (1.0 - s)


class MaterialField:
    def __init__(self, lo, hi, resolutions=(16, 32, 64), params=None):
        self.lo = np.asarray(lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(hi, dtype=np.float64).reshape(3)
        if np.any(self.hi <= self.lo):
            raise ValueError("field bounds must have positive extent")
        self.resolutions = tuple(int(r) for r in resolutions)
        if any(r < 2 for r in self.resolutions):
            raise ValueError("grid resolution must be >= 2")
        self.offsets = np.cumsum([0] + [r ** 3 for r in self.resolutions])
        n = int(self.offsets[-1])
        if params is None:
            params = np.zeros((n, CHANNELS))
        params = np.asarray(params, dtype=np.float64).reshape(n, CHANNELS)
        if not np.all(np.isfinite(params)):
            raise ValueError("field parameters must be finite")
        self.params = params.copy()

    @classmethod
    def for_mesh(cls, mesh, resolutions=(16, 32, 64), pad=0.05):
        lo, hi = mesh.bounds()
        ext = np.maximum(hi - lo, 1e-6 * max(mesh.bbox_diagonal(), 1.0))
        return cls(lo - pad * ext, hi + pad * ext, resolutions)

    @property
    def n_nodes(self):
        return int(self.offsets[-1])

    def level(self, k):
        r = self.resolutions[k]
        return self.params[self.offsets[k]:self.offsets[k + 1]].reshape(r, r, r, CHANNELS)

    def node_position(self, k, i, j, l):
        r = self.resolutions[k]
        return self.lo + np.array([i, j, l]) / (r - 1) * (self.hi - self.lo)

    def interpolation_matrix(self, points):
        """Sparse (P, n_nodes) trilinear weights summed over levels, plus an out-of-bounds flag per point."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        outside = np.any((p < self.lo) | (p > self.hi), axis=1)
        p = np.clip(p, self.lo, self.hi)
        rel = (p - self.lo) / (self.hi - self.lo)
        rows, cols, vals = [], [], []
        P = len(p)
        for k, r in enumerate(self.resolutions):
            x = rel * (r - 1)
            snapped = np.rint(x)
            x = np.where(np.abs(x - snapped) < 1e-9, snapped, x)
            i0 = np.minimum(np.floor(x).astype(np.int64), r - 2)
            f = x - i0
            for corner in range(8):
                c = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
                w = np.prod(np.where(c == 1, f, 1.0 - f), axis=1)
                idx = ((i0[:, 0] + c[0]) * r + (i0[:, 1] + c[1])) * r + (i0[:, 2] + c[2])
                rows.append(np.arange(P))
                cols.append(idx + self.offsets[k])
                vals.append(w)
        Q = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(P, self.n_nodes))
        Q.eliminate_zeros()
        return Q, outside

    def raw(self, points):
        Q, _ = self.interpolation_matrix(points)
        return Q @ self.params

    def query(self, points):
        """Activated channels, (P, 5): albedo rgb, roughness, metalness. A single point returns a MaterialSample."""
        pts = np.asarray(points, dtype=np.float64)
        out = logistic(self.raw(pts))
        if pts.ndim == 1:
            return MaterialSample(out[0, :3], float(out[0, 3]), float(out[0, 4]))
        return out

    def query_with_gradient(self, points):
        """Activated outputs and the pieces of d output / d params.

        Returns (out, Q, dsig): the derivative of channel c at point p with
        respect to node parameter (j, c) is ``Q[p, j] * dsig[p, c]``; other
        channels do not interact.
        """
        Q, _ = self.interpolation_matrix(points)
        raw = Q @ self.params
        return logistic(raw), Q, logistic_grad(raw)

    @staticmethod
    def backprop(Q, dsig, g_out):
        """Parameter gradient for an output cotangent g_out (P, 5)."""
        return Q.T @ (g_out * dsig)

    def smoothness_loss(self, points, sigma=0.01, seed=0, step=0, with_grad=False):
        """Mean L1 change of all five outputs under a Gaussian position jitter of scale sigma."""
        if sigma <= 0:
            raise ValueError("sigma must be positive")
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        ids = np.arange(len(p))[:, None]
        jitter = sigma * rng.normal(seed, ids, np.arange(3)[None, :], step, 0x5300)
        Q1, _ = self.interpolation_matrix(p)
        Q2, _ = self.interpolation_matrix(p + jitter)
        r1, r2 = Q1 @ self.params, Q2 @ self.params
        diff = logistic(r1) - logistic(r2)
        loss = float(np.abs(diff).sum(axis=1).mean()) if len(p) else 0.0
        if not with_grad:
            return loss
        g = np.sign(diff) / max(len(p), 1)
        grad = Q1.T @ (g * logistic_grad(r1)) - Q2.T @ (g * logistic_grad(r2))
        return loss, grad

    def copy(self):
        return MaterialField(self.lo, self.hi, self.resolutions, self.params)

    def save(self, path):
        binfmt.write(path, {"kind": "material_field", "resolutions": list(self.resolutions),
                            "lo": self.lo.tolist(), "hi": self.hi.tolist(),
                            "channels": ["albedo_r", "albedo_g", "albedo_b", "roughness", "metalness"]},
                     {"params": self.params})

    @classmethod
    def load(cls, path):
        header, arrays = binfmt.read(path)
        if header.get("kind") != "material_field":
            raise ValueError("file does not hold a material field")
        return cls(header["lo"], header["hi"], header["resolutions"], arrays["params"])
