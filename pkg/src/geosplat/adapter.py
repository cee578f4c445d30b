"""Mesh-to-Gaussian adapter.

Each triangle yields six flat Gaussians placed at fixed barycentric midpoints
(face mode); during warm-up each vertex yields one isotropic disk (vertex mode).
Every attribute is a closed-form function of the triangle corners and their
normals, so the mapping is differentiable by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import binfmt
from .geometry import Mesh

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdapterConstants:
    u: float = 0.07
    v: float = 0.22
    alpha_inner: float = 0.80
    alpha_outer: float = 2.08
    beta_inner: float = 15.0
    beta_outer: float = 13.0
    delta: float = 4.5e-5

    def __post_init__(self):
        if not 0 < self.u < self.v < 0.5:
            raise ValueError("need 0 < u < v < 1/2")
        if min(self.alpha_inner, self.alpha_outer, self.beta_inner, self.beta_outer, self.delta) <= 0:
            raise ValueError("alpha, beta and delta must be positive")

    def patterns(self):
        """Barycentric midpoints m_jk, their target corners b_k, and per-point alpha/beta.

        Ordered m12, m23, m31 (inner triple from u) then m45, m56, m64 (outer, from v).
        """
        mids, targets, alphas, betas = [], [], [], []
        for t, a, b in ((self.u, self.alpha_inner, self.beta_inner), (self.v, self.alpha_outer, self.beta_outer)):
            b1 = np.array([t, t, 1 - 2 * t])
            b2 = np.array([t, 1 - 2 * t, t])
            b3 = np.array([1 - 2 * t, t, t])
            for bj, bk in ((b1, b2), (b2, b3), (b3, b1)):
                mids.append((bj + bk) / 2)
                targets.append(bk)
                alphas.append(a)
                betas.append(b)
        return np.array(mids), np.array(targets), np.array(alphas), np.array(betas)


@dataclass(frozen=True)
class GaussianPoint:
    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    normal: np.ndarray
    opacity: float
    source: int
    barycentric: np.ndarray


@dataclass
class GaussianSet:
    """Structure-of-arrays Gaussian collection.

    ``rotations[i]`` has columns (R_x, R_y, R_z) with R_z the normal, so the
    covariance is ``R diag(S^2) R^T``. ``source`` is the face index (face mode)
    or vertex index (vertex mode). Payload is either ``colors`` (forward
    shading) or ``attributes`` (deferred shading), never both.
    """

    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    normals: np.ndarray
    opacities: np.ndarray
    source: np.ndarray
    barycentric: np.ndarray
    mode: str = "face"
    colors: np.ndarray | None = None
    attributes: dict | None = None
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.positions)

    def __getitem__(self, i):
        return GaussianPoint(self.positions[i], self.scales[i], self.rotations[i], self.normals[i],
                             float(self.opacities[i]), int(self.source[i]), self.barycentric[i])

    def covariances(self):
        R = self.rotations
        return np.einsum("nij,nj,nkj->nik", R, self.scales ** 2, R)

    def subset(self, idx):
        idx = np.asarray(idx)
        return GaussianSet(
            self.positions[idx], self.scales[idx], self.rotations[idx], self.normals[idx],
            self.opacities[idx], self.source[idx], self.barycentric[idx], self.mode,
            None if self.colors is None else self.colors[idx],
            None if self.attributes is None else {k: v[idx] for k, v in self.attributes.items()},
        )

    def with_colors(self, colors):
        colors = np.asarray(colors, dtype=np.float64)
        colors = colors.reshape(len(self), -1) if len(self) else colors.reshape(0, 3)
        if not np.all(np.isfinite(colors)) or np.any(colors < 0):
            raise ValueError("colors must be finite and non-negative")
        out = self.subset(np.arange(len(self)))
        out.colors, out.attributes = colors, None
        return out

    def with_attributes(self, albedo, roughness, metalness):
        out = self.subset(np.arange(len(self)))
        out.colors = None
        out.attributes = {
            "albedo": np.asarray(albedo, dtype=np.float64).reshape(len(self), 3),
            "roughness": np.asarray(roughness, dtype=np.float64).reshape(len(self)),
            "metalness": np.asarray(metalness, dtype=np.float64).reshape(len(self)),
        }
        return out

    @staticmethod
    def concatenate(sets):
        sets = list(sets)
        if not sets:
            return empty_set()
        cat = lambda name: np.concatenate([getattr(s, name) for s in sets])
        return GaussianSet(cat("positions"), cat("scales"), cat("rotations"), cat("normals"),
                           cat("opacities"), cat("source"), cat("barycentric"), sets[0].mode)

    def quaternions(self):
        """Rotation quaternions (w, x, y, z)."""
        from scipy.spatial.transform import Rotation

        q = Rotation.from_matrix(self.rotations).as_quat()  # x, y, z, w
        return np.concatenate([q[:, 3:], q[:, :3]], axis=1)

    def save(self, path):
        """Binary table, one float32 record per point: mu(3) S(3) quat wxyz(4) n(3) opacity(1)."""
        table = np.concatenate([self.positions, self.scales, self.quaternions(), self.normals,
                                self.opacities[:, None]], axis=1).astype(np.float32)
        binfmt.write(path, {"kind": "gaussian_set", "mode": self.mode, "count": len(self),
                            "record": ["mu_x", "mu_y", "mu_z", "s_x", "s_y", "s_z",
                                       "q_w", "q_x", "q_y", "q_z", "n_x", "n_y", "n_z", "opacity"]},
                     {"table": table, "source": self.source.astype(np.int64)})

    @classmethod
    def load(cls, path):
        from scipy.spatial.transform import Rotation

        header, arrays = binfmt.read(path)
        if header.get("kind") != "gaussian_set":
            raise ValueError("file does not hold a Gaussian set")
        t = arrays["table"].astype(np.float64)
        q = t[:, 6:10]
        R = Rotation.from_quat(np.concatenate([q[:, 1:], q[:, :1]], axis=1)).as_matrix() if len(t) else np.zeros((0, 3, 3))
        n = len(t)
        return cls(t[:, 0:3], t[:, 3:6], R, t[:, 10:13], t[:, 13], arrays["source"],
                   np.zeros((n, 3)), header.get("mode", "face"))


def empty_set():
    z = np.zeros((0, 3))
    return GaussianSet(z, z.copy(), np.zeros((0, 3, 3)), z.copy(), np.zeros(0), np.zeros(0, np.int64), z.copy())


def _normalize(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0), n[..., 0]


def _faces_to_gaussians(P, N, c: AdapterConstants, face_ids):
    """Vectorized face sampling. P, N: (F, 3, 3) corner positions / normals."""
    mids, targets, alphas, betas = c.patterns()
    F = len(P)
    mu = np.einsum("kj,fjd->fkd", mids, P)  # (F, 6, 3)
    n, _ = _normalize(np.einsum("kj,fjd->fkd", mids, N))
    e = np.einsum("kj,fjd->fkd", targets, P) - mu
    elen = np.linalg.norm(e, axis=-1)
    area = 0.5 * np.linalg.norm(np.cross(P[:, 1] - P[:, 0], P[:, 2] - P[:, 0]), axis=-1)
    S = np.empty((F, 6, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        S[..., 0] = alphas * elen
        S[..., 1] = area[:, None] / (betas * elen)
    S[..., 2] = c.delta
    # project the in-plane direction off the interpolated normal so R stays orthonormal
    t = e - np.sum(e * n, axis=-1, keepdims=True) * n
    rx, tlen = _normalize(t)
    ry = np.cross(n, rx)
    R = np.stack([rx, ry, n], axis=-1)  # columns
    ok = np.all((tlen > 1e-12 * np.maximum(elen, 1e-300)) & (elen > 0), axis=1) & (area > 0)
    if not np.all(ok):
        log.warning("skipping %d degenerate faces", int((~ok).sum()))
    sel = np.nonzero(ok)[0]
    k = 6
    return GaussianSet(
        positions=mu[sel].reshape(-1, 3),
        scales=S[sel].reshape(-1, 3),
        rotations=R[sel].reshape(-1, 3, 3),
        normals=n[sel].reshape(-1, 3),
        opacities=np.ones(len(sel) * k),
        source=np.repeat(np.asarray(face_ids)[sel], k),
        barycentric=np.tile(mids, (len(sel), 1)),
        mode="face",
        info={"skipped_faces": int((~ok).sum())},
    )


def sample_face(mesh: Mesh, face: int, c: AdapterConstants = AdapterConstants()) -> GaussianSet:
    """The six Gaussians generated for one triangle."""
    f = mesh.faces[face]
    return _faces_to_gaussians(mesh.vertices[f][None], mesh.vertex_normals[f][None], c, [face])


def sample_vertex(mesh: Mesh, vertex: int, k: float = 1.0, delta: float = 4.5e-5):
    """Warm-up Gaussian for one vertex, or None for an isolated vertex."""
    gs = _vertex_gaussians(mesh, np.array([vertex]), k, delta)
    return gs[0] if len(gs) else None


def _vertex_gaussians(mesh, verts, k, delta):
    star = mesh.vertex_star_areas()[verts]
    keep = star > 0
    if not np.all(keep):
        log.warning("skipping %d isolated vertices", int((~keep).sum()))
    verts = verts[keep]
    n = mesh.vertex_normals[verts]
    s = np.sqrt(k / 3.0 * star[keep])
    rx = np.cross([0.0, 0.0, 1.0], n)
    par = np.linalg.norm(rx, axis=1) < 1e-8
    rx[par] = np.cross([1.0, 0.0, 0.0], n[par])
    rx, _ = _normalize(rx)
    ry = np.cross(n, rx)
    m = len(verts)
    return GaussianSet(
        positions=mesh.vertices[verts].copy(),
        scales=np.stack([s, s, np.full(m, delta)], axis=1),
        rotations=np.stack([rx, ry, n], axis=-1),
        normals=n.copy(),
        opacities=np.ones(m),
        source=verts.astype(np.int64),
        barycentric=np.tile([1.0, 0.0, 0.0], (m, 1)),
        mode="vertex",
    )


def adapt(mesh: Mesh, mode: str = "face", c: AdapterConstants = AdapterConstants(), k: float = 1.0) -> GaussianSet:
    """Generate the Gaussian set for a mesh; face mode is face-major, 6 per face."""
    if mode == "face":
        if mesh.n_faces == 0:
            return empty_set()
        return _faces_to_gaussians(mesh.vertices[mesh.faces], mesh.vertex_normals[mesh.faces], c,
                                   np.arange(mesh.n_faces))
    if mode == "vertex":
        if len(mesh.vertices) == 0:
            return empty_set()
        return _vertex_gaussians(mesh, np.arange(len(mesh.vertices)), k, c.delta)
    raise ValueError(f"unknown adapter mode {mode!r}")


def face_jacobians(P, N, c: AdapterConstants = AdapterConstants()):
    """Analytic derivatives for one triangle's six Gaussians.

    Returns ``dmu_dP`` and ``dS_dP`` of shape (6, 3, 9), derivatives with
    respect to the flattened corner positions (p1, p2, p3), and ``dn_dN`` of
    shape (6, 3, 9) with respect to the flattened corner normals.
    """
    P = np.asarray(P, float)
    N = np.asarray(N, float)
    mids, targets, alphas, betas = c.patterns()
    I3 = np.eye(3)
    e1, e2 = P[1] - P[0], P[2] - P[0]
    cr = np.cross(e1, e2)
    area = 0.5 * np.linalg.norm(cr)
    ch = cr / np.linalg.norm(cr)
    dA = np.zeros(9)
    dA[3:6] = 0.5 * np.cross(e2, ch)
    dA[6:9] = 0.5 * np.cross(ch, e1)
    dA[0:3] = -(dA[3:6] + dA[6:9])
    dmu = np.zeros((6, 3, 9))
    dS = np.zeros((6, 3, 9))
    dn = np.zeros((6, 3, 9))
    for i in range(6):
        w = targets[i] - mids[i]
        e = w @ P
        el = np.linalg.norm(e)
        eh = e / el
        del_ = np.concatenate([w[j] * eh for j in range(3)])
        for j in range(3):
            dmu[i][:, 3 * j:3 * j + 3] = mids[i][j] * I3
        dS[i, 0] = alphas[i] * del_
        dS[i, 1] = dA / (betas[i] * el) - area / (betas[i] * el ** 2) * del_
        nt = mids[i] @ N
        nl = np.linalg.norm(nt)
        nh = nt / nl
        proj = (I3 - np.outer(nh, nh)) / nl
        for j in range(3):
            dn[i][:, 3 * j:3 * j + 3] = mids[i][j] * proj
    return {"dmu_dP": dmu, "dS_dP": dS, "dn_dN": dn}
