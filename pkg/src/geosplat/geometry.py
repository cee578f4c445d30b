"""Triangle meshes, scalar grids, isosurface extraction and the entropy term."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import binfmt

log = logging.getLogger(__name__)


@dataclass
class Mesh:
    """Indexed triangle mesh with unit per-vertex normals.

    ``info`` collects validation flags (dropped degenerate faces, non-manifold
    edge count, empty-extraction flag) without making them errors.
    """

    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh vertices must be finite")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face references an out-of-range vertex")
        if self.vertex_normals is None:
            self.vertex_normals = area_weighted_normals(self)
        else:
            self.vertex_normals = np.ascontiguousarray(self.vertex_normals, dtype=np.float64).reshape(-1, 3)
            if len(self.vertex_normals) != len(self.vertices):
                raise ValueError("need exactly one normal per vertex")
        self._areas = None

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def triangles(self):
        """(F, 3, 3) corner positions."""
        return self.vertices[self.faces]

    @property
    def face_areas(self):
        if self._areas is None:
            self._areas = 0.5 * np.linalg.norm(_face_cross(self.vertices, self.faces), axis=1)
        return self._areas

    @property
    def face_normals(self):
        c = _face_cross(self.vertices, self.faces)
        n = np.linalg.norm(c, axis=1, keepdims=True)
        return c / np.where(n > 0, n, 1.0)

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bbox_diagonal(self):
        lo, hi = self.bounds()
        return float(np.linalg.norm(hi - lo))

    def edge_face_counts(self):
        """Map of undirected edge -> number of incident faces, as (edges, counts)."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def vertex_star_areas(self):
        """Sum of incident face areas per vertex."""
        out = np.zeros(len(self.vertices))
        for k in range(3):
            np.add.at(out, self.faces[:, k], self.face_areas)
        return out


def _face_cross(vertices, faces):
    p = vertices[faces]
    return np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])


def area_weighted_normals(mesh: Mesh) -> np.ndarray:
    """Vertex normals as the normalized sum of area-weighted face normals.

    The unnormalized cross product already equals twice the area times the
    unit face normal, so it is accumulated directly. Vertices with no incident
    face (zero accumulation) get +z and a warning.
    """
    acc = np.zeros_like(mesh.vertices)
    if len(mesh.faces):
        c = 0.5 * _face_cross(mesh.vertices, mesh.faces)
        for k in range(3):
            np.add.at(acc, mesh.faces[:, k], c)
    norm = np.linalg.norm(acc, axis=1)
    bad = norm <= 1e-300
    if np.any(bad):
        log.warning("%d vertices without incident area; normal set to +z", int(bad.sum()))
        acc[bad] = (0.0, 0.0, 1.0)
        norm[bad] = 1.0
    return acc / norm[:, None]


def drop_degenerate_faces(mesh: Mesh, eps: float = 0.0) -> Mesh:
    keep = mesh.face_areas > eps
    dropped = int((~keep).sum())
    if dropped == 0:
        mesh.info.setdefault("dropped_degenerate_faces", 0)
        return mesh
    out = Mesh(mesh.vertices, mesh.faces[keep], mesh.vertex_normals, dict(mesh.info))
    out.info["dropped_degenerate_faces"] = out.info.get("dropped_degenerate_faces", 0) + dropped
    return out


def validation_report(mesh: Mesh) -> dict:
    _, counts = mesh.edge_face_counts() if mesh.n_faces else (None, np.zeros(0, int))
    return {
        "vertices": len(mesh.vertices),
        "faces": mesh.n_faces,
        "non_manifold_edges": int((counts > 2).sum()),
        "boundary_edges": int((counts == 1).sum()),
        "dropped_degenerate_faces": int(mesh.info.get("dropped_degenerate_faces", 0)),
    }


# ---------------------------------------------------------------------------
# primitives

def icosahedron(radius=1.0) -> Mesh:
    t = (1.0 + 5.0 ** 0.5) / 2.0
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    v *= radius / np.linalg.norm(v[0])
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    return Mesh(v, f)


def icosphere(subdivisions=3, radius=1.0, center=(0.0, 0.0, 0.0)) -> Mesh:
    """Geodesic sphere; ``subdivisions=3`` gives 1280 faces."""
    base = icosahedron(1.0)
    v, f = base.vertices, base.faces
    for _ in range(subdivisions):
        v, f = _subdivide(v, f)
        v = v / np.linalg.norm(v, axis=1, keepdims=True)
    n = v.copy()
    return Mesh(v * radius + np.asarray(center, float), f, n)


def _subdivide(v, f):
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    key = np.sort(edges, axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    mid = 0.5 * (v[uniq[:, 0]] + v[uniq[:, 1]])
    m = len(f)
    a, b, c = f[:, 0], f[:, 1], f[:, 2]
    ab, bc, ca = (inv[:m] + len(v), inv[m:2 * m] + len(v), inv[2 * m:] + len(v))
    nf = np.concatenate([
        np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
        np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
    ])
    return np.concatenate([v, mid]), nf


def grid_plane(size=2.0, n=8, z=0.0, center=(0.0, 0.0)) -> Mesh:
    """Square in the z=const plane facing +z, split into 2*n*n triangles."""
    xs = np.linspace(-size / 2, size / 2, n + 1)
    X, Y = np.meshgrid(xs + center[0], xs + center[1], indexing="xy")
    v = np.stack([X.ravel(), Y.ravel(), np.full(X.size, float(z))], 1)
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
    c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
    f = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
    return Mesh(v, f, np.tile([0.0, 0.0, 1.0], (len(v), 1)))


def box(lo, hi, n=2) -> Mesh:
    """Closed axis-aligned box with outward faces, each side split n x n."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    verts, faces = [], []
    for axis in range(3):
        for side in (0, 1):
            u_ax, v_ax = [a for a in range(3) if a != axis]
            s = np.linspace(0, 1, n + 1)
            U, V = np.meshgrid(s, s, indexing="xy")
            p = np.zeros((U.size, 3))
            p[:, axis] = hi[axis] if side else lo[axis]
            p[:, u_ax] = lo[u_ax] + U.ravel() * (hi[u_ax] - lo[u_ax])
            p[:, v_ax] = lo[v_ax] + V.ravel() * (hi[v_ax] - lo[v_ax])
            idx = np.arange(U.size).reshape(n + 1, n + 1) + sum(len(x) for x in verts)
            a, b = idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel()
            c, d = idx[1:, :-1].ravel(), idx[1:, 1:].ravel()
            f = np.concatenate([np.stack([a, b, d], 1), np.stack([a, d, c], 1)])
            normal = np.zeros(3)
            normal[axis] = 1.0 if side else -1.0
            fn = np.cross(p[f[0, 1] - idx.min()] - p[f[0, 0] - idx.min()],
                          p[f[0, 2] - idx.min()] - p[f[0, 0] - idx.min()])
            if fn @ normal < 0:
                f = f[:, ::-1]
            verts.append(p)
            faces.append(f)
    v = np.concatenate(verts)
    f = np.concatenate(faces)
    # weld duplicated corner/edge vertices so the box is closed
    key = np.round(v, 12)
    uniq, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    order = np.argsort(first)
    remap = np.empty(len(order), np.int64)
    remap[order] = np.arange(len(order))
    return Mesh(v[first[order]], remap[inv.reshape(-1)][f])


def merge(*meshes: Mesh) -> Mesh:
    verts, faces, normals, off = [], [], [], 0
    for m in meshes:
        verts.append(m.vertices)
        normals.append(m.vertex_normals)
        faces.append(m.faces + off)
        off += len(m.vertices)
    return Mesh(np.concatenate(verts), np.concatenate(faces), np.concatenate(normals))


# ---------------------------------------------------------------------------
# scalar grids

@dataclass
class ScalarGrid:
    """Scalar values on the nodes of a regular grid spanning ``bounds``."""

    values: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.lo = np.asarray(self.lo, dtype=np.float64).reshape(3)
        self.hi = np.asarray(self.hi, dtype=np.float64).reshape(3)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("grid resolution must be >= 2 along every axis")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")
        if np.any(self.hi <= self.lo):
            raise ValueError("grid bounds must have positive extent")

    @property
    def resolution(self):
        return tuple(self.values.shape)

    @property
    def spacing(self):
        return (self.hi - self.lo) / (np.array(self.values.shape) - 1)

    def node_positions(self):
        axes = [np.linspace(self.lo[i], self.hi[i], self.values.shape[i]) for i in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @classmethod
    def from_function(cls, fn, resolution, lo, hi):
        res = (resolution,) * 3 if np.isscalar(resolution) else tuple(resolution)
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        axes = [np.linspace(lo[i], hi[i], res[i]) for i in range(3)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        return cls(fn(pts), lo, hi)

    def save(self, path):
        binfmt.write(path, {"kind": "scalar_grid", "resolution": list(self.resolution),
                            "bounds": [self.lo.tolist(), self.hi.tolist()]},
                     {"values": self.values})

    @classmethod
    def load(cls, path):
        header, arrays = binfmt.read(path)
        if header.get("kind") != "scalar_grid":
            raise ValueError("file does not hold a scalar grid")
        lo, hi = header["bounds"]
        return cls(arrays["values"].reshape(header["resolution"]), lo, hi)


def extract_isosurface(grid: ScalarGrid, level: float = 0.0) -> Mesh:
    """Marching-cubes mesh of ``{x : zeta(x) = level}``.

    Faces are wound so that face normals point toward increasing zeta
    (outward for a signed distance that is negative inside). When zeta - level
    never changes sign an empty mesh is returned with ``info["empty"] = True``.
    """
    from skimage.measure import marching_cubes

    d = grid.values - level
    if not (np.any(d > 0) and np.any(d < 0)):
        m = Mesh(np.zeros((0, 3)), np.zeros((0, 3), np.int64), np.zeros((0, 3)))
        m.info["empty"] = True
        return m
    verts, faces, _, _ = marching_cubes(d, 0.0, spacing=tuple(grid.spacing),
                                        allow_degenerate=False, method="lewiner")
    verts = verts.astype(np.float64) + grid.lo
    faces = faces.astype(np.int64)
    mesh = Mesh(verts, faces)
    # orient along the field gradient, judged by majority over faces
    centroids = mesh.triangles.mean(axis=1)
    grad = _grid_gradient(grid, centroids)
    if np.sum(np.einsum("ij,ij->i", mesh.face_normals, grad)) < 0:
        mesh = Mesh(verts, faces[:, ::-1].copy())
    mesh = drop_degenerate_faces(mesh)
    mesh.info["empty"] = False
    return mesh


def _grid_gradient(grid, pts):
    g = np.gradient(grid.values, *grid.spacing)
    t = (pts - grid.lo) / grid.spacing
    idx = np.clip(np.rint(t).astype(int), 0, np.array(grid.values.shape) - 1)
    return np.stack([gi[idx[:, 0], idx[:, 1], idx[:, 2]] for gi in g], axis=1)


def _softplus(x):
    return np.logaddexp(0.0, x)


def entropy_loss(grid: ScalarGrid) -> float:
    """Binary cross-entropy over grid edges whose endpoints differ in sign.

    Uses the axis-aligned 6-neighbourhood edge set. Raw values are squashed
    with the logistic function before the cross entropy, and the target of
    each endpoint is the {0,1} sign of the other endpoint.
    """
    z = grid.values
    total = 0.0
    for axis in range(3):
        a = np.moveaxis(z, axis, 0)
        zi, zj = a[:-1], a[1:]
        si, sj = zi > 0, zj > 0
        cross = si != sj
        if not np.any(cross):
            continue
        zi, zj, si, sj = zi[cross], zj[cross], si[cross], sj[cross]
        # H(sigmoid(z), y) = softplus(-z) if y == 1 else softplus(z)
        total += np.sum(np.where(sj, _softplus(-zi), _softplus(zi)))
        total += np.sum(np.where(si, _softplus(-zj), _softplus(zj)))
    return float(total)
