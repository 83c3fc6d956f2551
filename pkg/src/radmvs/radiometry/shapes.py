"""Analytic and triangulated shapes with vectorised ray intersection.

``intersect(origins, dirs)`` takes (N, 3) arrays and returns the hit
distance along each ray (``inf`` on a miss) and the outward unit normal
at the hit.
"""

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ConfigError

_RAY_CHUNK = 256


@dataclass(frozen=True, eq=False)
class Sphere:
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    radius: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if self.radius <= 0:
            raise ConfigError("sphere radius must be positive")

    def intersect(self, origins, dirs):
        oc = origins - self.center
        b = np.sum(oc * dirs, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius ** 2
        a = np.sum(dirs * dirs, axis=-1)
        disc = b * b - a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        t = (-b - sq) / a
        t = np.where(hit & (t > 0), t, np.inf)
        p = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        n = (p - self.center) / self.radius
        return t, n

    def bbox(self):
        return self.center - self.radius, self.center + self.radius

    def signed_distance(self, points):
        return np.linalg.norm(np.asarray(points) - self.center, axis=-1) - self.radius

    def triangulate(self, n_lat=48, n_lon=96):
        return uv_sphere(self.center, self.radius, n_lat, n_lon)


@dataclass(frozen=True, eq=False)
class Plane:
    """Finite rectangle ``center + s*axis_u + r*axis_v`` with ``|s|, |r| <= half_size``."""

    center: np.ndarray
    normal: np.ndarray
    axis_u: np.ndarray
    half_size: float = 1.0

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        n = n / np.linalg.norm(n)
        u = np.asarray(self.axis_u, dtype=np.float64)
        u = u - n * (u @ n)
        u = u / np.linalg.norm(u)
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "normal", n)
        object.__setattr__(self, "axis_u", u)

    @property
    def axis_v(self):
        return np.cross(self.normal, self.axis_u)

    def intersect(self, origins, dirs):
        denom = dirs @ self.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((self.center - origins) @ self.normal) / denom
        p = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        rel = p - self.center
        inside = (np.abs(rel @ self.axis_u) <= self.half_size) & (np.abs(rel @ self.axis_v) <= self.half_size)
        t = np.where(inside & (t > 0) & np.isfinite(t), t, np.inf)
        # face the incoming ray
        n = np.where((denom < 0)[:, None], self.normal, -self.normal)
        return t, n

    def bbox(self):
        corners = np.array([self.center + a * self.axis_u + b * self.axis_v
                            for a in (-self.half_size, self.half_size) for b in (-self.half_size, self.half_size)])
        return corners.min(axis=0), corners.max(axis=0)

    def triangulate(self):
        h = self.half_size
        v = np.array([self.center + a * self.axis_u + b * self.axis_v for a, b in ((-h, -h), (h, -h), (h, h), (-h, h))])
        return TriangleMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray
    vertex_normals: np.ndarray = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3 or f.ndim != 2 or f.shape[1] != 3:
            raise ConfigError("mesh must have (V, 3) vertices and (F, 3) faces")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise ConfigError("face index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        if self.vertex_normals is not None:
            vn = np.asarray(self.vertex_normals, dtype=np.float64)
            object.__setattr__(self, "vertex_normals", vn / np.linalg.norm(vn, axis=1, keepdims=True))

    @property
    def triangles(self):
        return self.vertices[self.faces]

    def face_normals(self):
        tri = self.triangles
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)

    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def intersect(self, origins, dirs):
        tri = self.triangles
        v0 = tri[:, 0]
        e1 = tri[:, 1] - v0
        e2 = tri[:, 2] - v0
        fn = self.face_normals()
        N = len(origins)
        t_best = np.full(N, np.inf)
        normals = np.zeros((N, 3))
        for s in range(0, N, _RAY_CHUNK):
            o = origins[s:s + _RAY_CHUNK, None, :]
            d = dirs[s:s + _RAY_CHUNK, None, :]
            p = np.cross(d, e2[None])
            det = np.sum(e1[None] * p, axis=-1)
            ok = np.abs(det) > 1e-14
            inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
            tv = o - v0[None]
            u = np.sum(tv * p, axis=-1) * inv
            q = np.cross(tv, e1[None])
            w = np.sum(d * q, axis=-1) * inv
            t = np.sum(e2[None] * q, axis=-1) * inv
            hit = ok & (u >= 0) & (w >= 0) & (u + w <= 1) & (t > 1e-9)
            t = np.where(hit, t, np.inf)
            k = np.argmin(t, axis=1)
            rows = np.arange(len(k))
            tb = t[rows, k]
            t_best[s:s + _RAY_CHUNK] = tb
            if self.vertex_normals is not None:
                vn = self.vertex_normals[self.faces[k]]
                bu, bw = u[rows, k], w[rows, k]
                n = (1 - bu - bw)[:, None] * vn[:, 0] + bu[:, None] * vn[:, 1] + bw[:, None] * vn[:, 2]
                n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
            else:
                n = fn[k]
            normals[s:s + _RAY_CHUNK] = n
        return t_best, normals

    def triangulate(self):
        return self


def uv_sphere(center, radius, n_lat=48, n_lon=96):
    center = np.asarray(center, dtype=np.float64)
    theta = np.linspace(0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    T, P = np.meshgrid(theta, phi, indexing="ij")
    ring = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1).reshape(-1, 3)
    dirs = np.vstack([[0, 0, 1.0], ring, [0, 0, -1.0]])
    faces = []
    nr = len(theta)
    idx = lambda i, j: 1 + i * n_lon + (j % n_lon)  # noqa: E731
    for j in range(n_lon):
        faces.append([0, idx(0, j), idx(0, j + 1)])
        for i in range(nr - 1):
            faces.append([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)])
            faces.append([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)])
        faces.append([len(dirs) - 1, idx(nr - 1, j + 1), idx(nr - 1, j)])
    return TriangleMesh(center + radius * dirs, np.array(faces), vertex_normals=dirs)


def superellipsoid(radii=(1.0, 1.0, 1.0), e1=0.5, e2=0.5, center=(0, 0, 0), n_lat=48, n_lon=96):
    """Tessellated superellipsoid with analytic vertex normals."""
    radii = np.asarray(radii, dtype=np.float64)

    def spow(x, e):
        return np.sign(x) * np.abs(x) ** e

    theta = np.linspace(-np.pi / 2, np.pi / 2, n_lat + 1)[1:-1]
    phi = np.linspace(-np.pi, np.pi, n_lon, endpoint=False)
    T, P = np.meshgrid(theta, phi, indexing="ij")
    x = radii[0] * spow(np.cos(T), e1) * spow(np.cos(P), e2)
    y = radii[1] * spow(np.cos(T), e1) * spow(np.sin(P), e2)
    z = radii[2] * spow(np.sin(T), e1)
    nx = spow(np.cos(T), 2 - e1) * spow(np.cos(P), 2 - e2) / radii[0]
    ny = spow(np.cos(T), 2 - e1) * spow(np.sin(P), 2 - e2) / radii[1]
    nz = spow(np.sin(T), 2 - e1) / radii[2]
    ring = np.stack([x, y, z], axis=-1).reshape(-1, 3)
    rn = np.stack([nx, ny, nz], axis=-1).reshape(-1, 3)
    verts = np.vstack([[0, 0, -radii[2]], ring, [0, 0, radii[2]]]) + np.asarray(center, dtype=np.float64)
    vn = np.vstack([[0, 0, -1.0], rn, [0, 0, 1.0]])
    nr = len(theta)
    idx = lambda i, j: 1 + i * n_lon + (j % n_lon)  # noqa: E731
    faces = []
    for j in range(n_lon):
        faces.append([0, idx(0, j + 1), idx(0, j)])
        for i in range(nr - 1):
            faces.append([idx(i, j), idx(i, j + 1), idx(i + 1, j + 1)])
            faces.append([idx(i, j), idx(i + 1, j + 1), idx(i + 1, j)])
        faces.append([len(verts) - 1, idx(nr - 1, j), idx(nr - 1, j + 1)])
    return TriangleMesh(verts, np.array(faces), vertex_normals=vn)
