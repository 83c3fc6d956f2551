"""Whole-shape recovery: neighbour selection, backprojection and voxel merging."""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_int, check_positive
from .exceptions import ConfigError, GeometryError

MIN_MEAN_NORMAL = 0.3


@dataclass(frozen=True, eq=False)
class OrientedPointCloud:
    points: np.ndarray
    normals: np.ndarray
    colors: np.ndarray = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if p.shape != n.shape:
            raise GeometryError("points and normals differ in length")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(n))):
            raise GeometryError("non-finite point cloud coordinates")
        if len(n) and np.max(np.abs(np.linalg.norm(n, axis=1) - 1.0)) > 1e-6:
            raise GeometryError("point cloud normals must be unit length")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "normals", n)
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(c) != len(p):
                raise GeometryError("colors and points differ in length")
            object.__setattr__(self, "colors", c)

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)))

    @classmethod
    def concatenate(cls, clouds):
        clouds = [c for c in clouds if len(c)]
        if not clouds:
            return cls.empty()
        colors = None
        if all(c.colors is not None for c in clouds):
            colors = np.concatenate([c.colors for c in clouds])
        return cls(np.concatenate([c.points for c in clouds]), np.concatenate([c.normals for c in clouds]), colors)


@dataclass(frozen=True)
class ViewNeighborhood:
    ref: int
    sources: tuple


def _azimuth(cam, up):
    up = np.asarray(up, dtype=np.float64)
    up = up / np.linalg.norm(up)
    a = cam.optical_axis - np.dot(cam.optical_axis, up) * up
    e1 = np.cross(up, [1.0, 0.0, 0.0])
    if np.linalg.norm(e1) < 1e-6:
        e1 = np.cross(up, [0.0, 1.0, 0.0])
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(up, e1)
    return np.arctan2(np.dot(a, e2), np.dot(a, e1))


def select_neighbors(cameras, ref, up=(0.0, 0.0, 1.0), per_side=2):
    """Two nearest views on each side of ``ref`` by signed azimuth about ``up``."""
    n = len(cameras)
    if n < 2 * per_side + 1:
        raise ConfigError(f"need at least {2 * per_side + 1} views, got {n}")
    if not 0 <= ref < n:
        raise ConfigError(f"reference index {ref} out of range")
    centers = np.array([c.center for c in cameras])
    dist = np.linalg.norm(centers[:, None] - centers[None], axis=2)
    if np.any(dist[np.triu_indices(n, 1)] < 1e-9):
        raise GeometryError("duplicate camera centers")
    az = np.array([_azimuth(c, up) for c in cameras])
    diff = np.angle(np.exp(1j * (az - az[ref])))
    others = [i for i in range(n) if i != ref]
    pos = sorted((i for i in others if diff[i] > 0), key=lambda i: (diff[i], i))
    neg = sorted((i for i in others if diff[i] <= 0), key=lambda i: (-diff[i], i))
    take_pos = min(per_side, len(pos))
    take_neg = min(per_side, len(neg))
    # fill a short side from the other one
    short_neg, short_pos = per_side - take_neg, per_side - take_pos
    take_pos = min(take_pos + short_neg, len(pos))
    take_neg = min(take_neg + short_pos, len(neg))
    return ViewNeighborhood(ref, tuple(pos[:take_pos] + neg[:take_neg]))


def backproject(maps, cam, stride=1, min_confidence=None, image=None):
    """Unmasked pixels of ``maps`` as world-space oriented points."""
    stride = check_int(stride, "stride", 1)
    mask = maps.mask.copy()
    if min_confidence is not None and maps.confidence is not None:
        mask &= maps.confidence >= min_confidence
    sub = np.zeros_like(mask)
    sub[::stride, ::stride] = True
    mask &= sub
    v, u = np.nonzero(mask)
    X = cam.backproject(maps.depth[v, u], u.astype(np.float64), v.astype(np.float64))
    n = maps.normal[v, u] @ cam.R
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    flip = np.sum(n * (X - cam.center), axis=1) > 0
    n[flip] *= -1.0
    colors = None if image is None else image[v, u]
    return OrientedPointCloud(X, n, colors)


def merge_clouds(clouds, voxel):
    """Voxel-grid merge: centroid position and normalised mean normal per occupied voxel."""
    check_positive(voxel, "voxel")
    if isinstance(clouds, OrientedPointCloud):
        clouds = [clouds]
    cloud = OrientedPointCloud.concatenate(clouds)
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    uniq, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    m = len(uniq)

    def vsum(x):
        return np.stack([np.bincount(inv, weights=x[:, k], minlength=m) for k in range(x.shape[1])], axis=1)

    pos = vsum(cloud.points) / counts[:, None]
    nsum = vsum(cloud.normals)
    nlen = np.linalg.norm(nsum, axis=1)
    nrm = nsum / np.where(nlen > 0, nlen, 1.0)[:, None]
    col = None if cloud.colors is None else vsum(cloud.colors) / counts[:, None]
    # single-point voxels pass through untouched so merging is idempotent
    single = counts == 1
    first = np.zeros(m, dtype=np.int64)
    first[inv[::-1]] = np.arange(len(inv))[::-1]
    pos[single] = cloud.points[first[single]]
    nrm[single] = cloud.normals[first[single]]
    if col is not None:
        col[single] = cloud.colors[first[single]]
    keep = nlen / counts >= MIN_MEAN_NORMAL
    return OrientedPointCloud(pos[keep], nrm[keep], None if col is None else col[keep])


def default_voxel(bbox_min, bbox_max, fraction=0.005):
    return fraction * float(np.linalg.norm(np.asarray(bbox_max, float) - np.asarray(bbox_min, float)))


class PointCloudFusion(TransformerMixin, BaseEstimator):
    """``transform([(maps, camera), ...])`` -> merged OrientedPointCloud."""

    def __init__(self, voxel=None, stride=1, min_confidence=None, bbox=None):
        self.voxel = voxel
        self.stride = stride
        self.min_confidence = min_confidence
        self.bbox = bbox

    def fit(self, X=None, y=None):
        if self.voxel is None and self.bbox is None:
            raise ConfigError("PointCloudFusion needs voxel or bbox")
        self.voxel_ = self.voxel if self.voxel is not None else default_voxel(*self.bbox)
        check_positive(self.voxel_, "voxel")
        return self

    def transform(self, X):
        clouds = [backproject(m, c, self.stride, self.min_confidence) for m, c in X]
        return merge_clouds(clouds, self.voxel_)
