"""Evaluation metrics for depth maps, normal maps and fused point clouds."""

import csv
import io as _io
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import GeometryError

DEPTH_THRESHOLD_PCT = 2.0
NORMAL_THRESHOLDS_DEG = (17.0, 19.0)


def _shared_mask(shape, *masks):
    m = np.ones(shape, dtype=bool)
    for x in masks:
        if x is not None:
            m &= np.asarray(x, dtype=bool)
    if not m.any():
        raise GeometryError("empty evaluation mask")
    return m


def depth_abs_error_pct(est, gt, bbox_diag):
    """Per-pixel |d_est - d_gt| as a percentage of the bounding-box diagonal."""
    return np.abs(np.asarray(est, dtype=np.float64) - gt) / bbox_diag * 100.0


def depth_error(est, gt, bbox_diag, mask=None, gt_mask=None):
    """Mean absolute depth error in percent of ``bbox_diag``."""
    m = _shared_mask(np.shape(gt), mask, gt_mask)
    return float(depth_abs_error_pct(est, gt, bbox_diag)[m].mean())


def normal_angles_deg(est, gt):
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    dot = np.clip(np.sum(est * gt, axis=-1), -1.0, 1.0)
    return np.degrees(np.arccos(dot))


def normal_error(est, gt, mask=None, gt_mask=None):
    """Mean angular error in degrees between unit normal maps."""
    m = _shared_mask(np.shape(gt)[:-1], mask, gt_mask)
    return float(normal_angles_deg(est, gt)[m].mean())


def closest_point_on_triangles(p, a, b, c):
    """Closest points on triangles (a, b, c) to points ``p``; all (N, 3), row-wise."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = vb / denom
        w = vc / denom
        out = a + ab * v[:, None] + ac * w[:, None]  # interior
        # edge regions, checked from least to most specific so later ones win
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        e_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        out = np.where(e_bc[:, None], b + (c - b) * t_bc[:, None], out)
        t_ac = d2 / (d2 - d6)
        e_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        out = np.where(e_ac[:, None], a + ac * t_ac[:, None], out)
        t_ab = d1 / (d1 - d3)
        e_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        out = np.where(e_ab[:, None], a + ab * t_ab[:, None], out)
    out = np.where(((d6 >= 0) & (d5 <= d6))[:, None], c, out)
    out = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b, out)
    out = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a, out)
    return out


def point_to_mesh_distances_brute(points, vertices, faces, chunk=64):
    """Exact nearest-surface distance by checking every triangle."""
    points = np.asarray(points, dtype=np.float64)
    tri = np.asarray(vertices, dtype=np.float64)[np.asarray(faces)]
    F = len(tri)
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        P = len(p)
        pp = np.repeat(p, F, axis=0)
        q = closest_point_on_triangles(pp, np.tile(tri[:, 0], (P, 1)), np.tile(tri[:, 1], (P, 1)),
                                       np.tile(tri[:, 2], (P, 1)))
        out[s:s + chunk] = np.linalg.norm(pp - q, axis=1).reshape(P, F).min(axis=1)
    return out


class MeshDistance:
    """Nearest point-on-triangle queries pruned with a k-d tree over triangle centroids.

    For each query, the distance ``r`` to the nearest centroid bounds the true
    distance; any triangle that could be closer has its centroid within
    ``r + max_radius`` (its circumradius about the centroid), so only those
    candidates are tested exactly.
    """

    def __init__(self, vertices, faces):
        v = np.asarray(vertices, dtype=np.float64)
        f = np.asarray(faces, dtype=np.int64)
        if f.ndim != 2 or f.shape[1] != 3 or len(f) == 0:
            raise GeometryError("mesh needs at least one triangle")
        self.tri = v[f]
        area = np.linalg.norm(np.cross(self.tri[:, 1] - self.tri[:, 0], self.tri[:, 2] - self.tri[:, 0]), axis=1)
        if not np.all(area > 0):
            raise GeometryError("mesh has degenerate triangles")
        self.centroids = self.tri.mean(axis=1)
        self.max_radius = float(np.linalg.norm(self.tri - self.centroids[:, None], axis=2).max())
        self.tree = cKDTree(self.centroids)

    def distances(self, points):
        points = np.asarray(points, dtype=np.float64)
        r, _ = self.tree.query(points)
        out = np.empty(len(points))
        for i, cand in enumerate(self.tree.query_ball_point(points, r + self.max_radius)):
            cand = np.asarray(cand, dtype=np.int64)
            t = self.tri[cand]
            p = np.broadcast_to(points[i], (len(cand), 3))
            q = closest_point_on_triangles(p, t[:, 0], t[:, 1], t[:, 2])
            out[i] = np.sqrt(np.min(np.sum((p - q) ** 2, axis=1)))
        return out


def point_to_mesh_rms(points, vertices, faces, bbox_diag):
    """RMS distance from ``points`` to the mesh, in percent of ``bbox_diag``."""
    points = np.asarray(getattr(points, "points", points), dtype=np.float64)
    if len(points) == 0:
        raise GeometryError("empty point cloud")
    d = MeshDistance(vertices, faces).distances(points)
    return float(np.sqrt(np.mean(d ** 2)) / bbox_diag * 100.0)


@dataclass
class EvalReport:
    depth_mae_pct: float = float("nan")
    normal_mae_deg: float = float("nan")
    frac_depth_below_2pct: float = float("nan")
    frac_normal_below_17deg: float = float("nan")
    frac_normal_below_19deg: float = float("nan")
    mesh_rms_pct: float = float("nan")

    @classmethod
    def from_maps(cls, est, gt, bbox_diag):
        """Aggregate over views; ``est`` and ``gt`` are lists of DepthNormalMaps."""
        de, ne = [], []
        for e, g in zip(est, gt):
            m = e.mask & g.mask
            if m.any():
                de.append(depth_abs_error_pct(e.depth, g.depth, bbox_diag)[m])
                ne.append(normal_angles_deg(e.normal, g.normal)[m])
        if not de:
            raise GeometryError("empty evaluation mask")
        de, ne = np.concatenate(de), np.concatenate(ne)
        return cls(float(de.mean()), float(ne.mean()), float(np.mean(de < DEPTH_THRESHOLD_PCT)),
                   float(np.mean(ne < NORMAL_THRESHOLDS_DEG[0])), float(np.mean(ne < NORMAL_THRESHOLDS_DEG[1])))

    def as_dict(self):
        return asdict(self)

    def to_csv(self):
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k, v in self.as_dict().items():
            w.writerow([k, repr(float(v))])
        return buf.getvalue()

    def to_text(self):
        d = self.as_dict()
        lines = [
            f"depth MAE            {d['depth_mae_pct']:.4f} % of bbox diagonal",
            f"normal MAE           {d['normal_mae_deg']:.4f} deg",
            f"depth < 2%           {d['frac_depth_below_2pct']:.4f}",
            f"normal < 17 deg      {d['frac_normal_below_17deg']:.4f}",
            f"normal < 19 deg      {d['frac_normal_below_19deg']:.4f}",
            f"mesh RMS             {d['mesh_rms_pct']:.4f} % of bbox diagonal",
        ]
        return "\n".join(lines) + "\n"
