"""Plane-sweep depth and normal estimation for a reference view.

For every depth hypothesis the reference pixels are back-projected and
re-projected into each source view. Each source contributes

* a photometric cost: Charbonnier distance between log radiances, and
* a normal cost: ``1 - BC`` where ``BC = sum_c sqrt(p_ref(c) p_src(c))`` is
  the Bhattacharyya coefficient of the two normal densities binned on a
  common hemispherical grid in the reference viewer frame.

Per-source costs are combined by the mean of the best 75 %; the depth
probability is a softmax of ``-cost / tau`` over hypotheses, and depth and
normal are decoded as probability-weighted expectations. A final sparse
least-squares pass bends the depth map to agree with the decoded normals.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import map_coordinates, uniform_filter, uniform_filter1d
from scipy.sparse.linalg import spsolve
from sklearn.base import BaseEstimator

from ._validation import check_image, check_int, check_nonempty, check_positive, check_rotation
from .exceptions import ConfigError, GeometryError
from .radiometry.camera import VIEWER_FLIP
from .sfs import BASE_RES, HemiGrid, NormalDensityField, coarsen_cells
from .views import DepthNormalMaps

CHARBONNIER_EPS = 1e-3


@dataclass(frozen=True)
class DepthHypothesisRange:
    d_min: float
    d_max: float
    count: int = 64

    def __post_init__(self):
        if not (0 < self.d_min < self.d_max):
            raise ConfigError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if int(self.count) < 2:
            raise ConfigError("need at least two depth hypotheses")

    def values(self):
        """Depths uniform in inverse depth, ordered near to far."""
        inv = np.linspace(1.0 / self.d_min, 1.0 / self.d_max, int(self.count))
        return 1.0 / inv

    @classmethod
    def from_bbox(cls, cam, bbox_min, bbox_max, count=64, margin=0.05):
        lo, hi = np.asarray(bbox_min, float), np.asarray(bbox_max, float)
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        z = cam.world_to_camera(corners)[:, 2]
        pad = margin * (z.max() - z.min())
        return cls(max(z.min() - pad, 1e-3), z.max() + pad, count)


@dataclass(frozen=True, eq=False)
class ViewData:
    """A view plus its normal density field (viewer frame), if available."""

    view: object
    density: NormalDensityField = None

    @property
    def camera(self):
        return self.view.camera


@dataclass(eq=False)
class CostVolumes:
    depths: np.ndarray   # (D,)
    cost: np.ndarray     # (D, H, W)
    prob: np.ndarray     # (D, H, W)
    normal: np.ndarray   # (D, H, W, 3), reference camera frame
    mask: np.ndarray     # (H, W)
    tau: float = 0.1
    valid: np.ndarray = None  # (D, H, W): at least one source observes the hypothesis

    def __post_init__(self):
        if self.valid is None:
            self.valid = np.broadcast_to(self.mask, self.cost.shape).copy()


def rotate_densities(field, R):
    """Rotate every sample direction by ``R`` (probabilities unchanged)."""
    R = check_rotation(R)
    dirs = field.dirs @ R.T
    cells = HemiGrid(field.level).cell_of(dirs)
    return NormalDensityField(dirs, cells, field.prob.copy(), field.mask.copy(), field.level)


def viewer_rotation(src_cam, ref_cam):
    """Rotation taking ``src_cam`` viewer-frame vectors into ``ref_cam``'s viewer frame."""
    return ref_cam.to_viewer @ src_cam.to_viewer.T


def _bin_density(field, match_level):
    """Histogram a density on the ``match_level`` grid: mass (H,W,G) and direction sums (H,W,G,3)."""
    level = field.level
    match = min(level, match_level)
    G = (BASE_RES * 2 ** match) ** 2
    grid = HemiGrid(match)
    cells = grid.cell_of(field.dirs)
    ok = (cells >= 0) & field.mask[..., None] & (field.prob > 0)
    H, W, S = field.prob.shape
    hist = np.zeros((H * W, G))
    dsum = np.zeros((H * W, G, 3))
    rows = np.repeat(np.arange(H * W), S)
    c = cells.reshape(-1)
    w = np.where(ok, field.prob, 0.0).reshape(-1)
    keep = w > 0
    np.add.at(hist, (rows[keep], c[keep]), w[keep])
    np.add.at(dsum, (rows[keep], c[keep]), w[keep, None] * field.dirs.reshape(-1, 3)[keep])
    return hist, dsum


def _log_image(image, floor):
    with np.errstate(divide="ignore"):
        return np.where(image > 0, np.log(np.where(image > 0, image, 1.0)), floor)


def build_cost_volume(ref, srcs, hypotheses, alpha_photo=1.0, beta_normal=2.0, tau=0.1,
                      match_level=1, top_cells=4, keep_fraction=0.75, max_cost=None):
    """Plane-sweep cost, depth probability and normal volumes for ``ref``."""
    if not srcs:
        raise ConfigError("need at least one source view")
    tau = check_positive(tau, "tau")
    alpha_photo = check_positive(alpha_photo, "alpha_photo", allow_zero=True)
    beta_normal = check_positive(beta_normal, "beta_normal", allow_zero=True)
    if max_cost is None:
        max_cost = 10.0 * alpha_photo + beta_normal
    use_normals = beta_normal > 0
    if use_normals and (ref.density is None or any(s.density is None for s in srcs)):
        raise ConfigError("normal cost requires densities for every view")

    cam = ref.camera
    H, W = cam.height, cam.width
    depths = hypotheses.values()
    D = len(depths)
    mask = ref.view.mask.copy()
    if ref.density is not None:
        mask &= ref.density.mask
    pix = np.flatnonzero(mask.ravel())
    P = len(pix)
    u_ref, v_ref = cam.pixel_grid()
    u_ref, v_ref = u_ref.ravel()[pix], v_ref.ravel()[pix]
    floor = np.log(1e-6 * ref.view.image[ref.view.mask].max()) if ref.view.mask.any() else 0.0
    log_ref = _log_image(ref.view.image.reshape(-1, 3)[pix], floor)

    if ref.density is not None:
        ref_hist, ref_dsum = _bin_density(ref.density, match_level)
        ref_hist, ref_dsum = ref_hist[pix], ref_dsum[pix]
        ref_mean = ref.density.mean_normals().reshape(-1, 3)[pix]
    src_hists = []
    for s in srcs:
        if use_normals:
            rotated = rotate_densities(s.density, viewer_rotation(s.camera, cam))
            src_hists.append(np.sqrt(_bin_density(rotated, match_level)[0]))
        else:
            src_hists.append(None)
    sqrt_ref = np.sqrt(ref_hist) if use_normals else None
    src_logs = [_log_image(s.view.image, floor) for s in srcs]

    cost = np.full((D, P), max_cost)
    valid_cells = np.zeros((D, P), dtype=bool)
    normal = np.zeros((D, P, 3))
    any_valid = np.zeros(P, dtype=bool)
    rays = cam.rays_camera(u_ref, v_ref)
    for di, d in enumerate(depths):
        X = cam.camera_to_world(rays * d)
        per_src = np.full((len(srcs), P), np.inf)
        prod = np.zeros((P, ref_hist.shape[1])) if ref.density is not None else None
        n_valid = np.zeros(P)
        for si, s in enumerate(srcs):
            u, v, z = s.camera.project(X)
            Hs, Ws = s.camera.height, s.camera.width
            valid = (z > 0) & (u >= -0.5) & (u <= Ws - 0.5) & (v >= -0.5) & (v <= Hs - 0.5)
            if not valid.any():
                continue
            c = np.zeros(P)
            if alpha_photo > 0:
                samp = np.stack([map_coordinates(src_logs[si][..., k], [v, u], order=1, mode="nearest")
                                 for k in range(3)], axis=-1)
                r = log_ref - samp
                c += alpha_photo * np.mean(np.sqrt(r * r + CHARBONNIER_EPS ** 2) - CHARBONNIER_EPS, axis=-1)
            if use_normals or prod is not None:
                iu = np.clip(np.rint(u), 0, Ws - 1).astype(np.int64)
                iv = np.clip(np.rint(v), 0, Hs - 1).astype(np.int64)
            if use_normals:
                sh = src_hists[si][iv * Ws + iu]
                bc = np.sum(sqrt_ref * sh, axis=1)
                c += beta_normal * (1.0 - np.clip(bc, 0.0, 1.0))
                prod += np.where(valid[:, None], sh * sh, 0.0)
            per_src[si] = np.where(valid, c, np.inf)
            n_valid += valid
        ok = n_valid > 0
        any_valid |= ok
        valid_cells[di] = ok
        srt = np.sort(per_src, axis=0)
        keep = np.ceil(keep_fraction * n_valid).astype(np.int64)
        rank = np.arange(len(srcs))[:, None]
        sel = rank < keep[None, :]
        total = np.sum(np.where(sel, srt, 0.0), axis=0)
        cost[di] = np.where(ok, total / np.maximum(keep, 1), max_cost)
        if ref.density is not None:
            normal[di] = _normal_hypothesis(ref_hist * prod / np.maximum(n_valid, 1)[:, None], ref_dsum,
                                            ref_mean, top_cells)
        else:
            normal[di] = (0.0, 0.0, 1.0)

    full_mask = np.zeros(H * W, dtype=bool)
    full_mask[pix[any_valid]] = True
    cost_full = np.zeros((D, H * W))
    cost_full[:, pix] = cost
    n_full = np.zeros((D, H * W, 3))
    n_full[..., 2] = -1.0
    n_full[:, pix] = normal @ VIEWER_FLIP  # viewer -> camera frame
    v_full = np.zeros((D, H * W), dtype=bool)
    v_full[:, pix] = valid_cells
    full_mask = full_mask.reshape(H, W)
    cost_full = cost_full.reshape(D, H, W)
    return CostVolumes(depths, cost_full, softmax_probability(cost_full, full_mask, tau),
                       n_full.reshape(D, H, W, 3), full_mask, tau, v_full.reshape(D, H, W) & full_mask[None])


def _normal_hypothesis(weights, dsum, fallback, top_cells):
    k = min(top_cells, weights.shape[1])
    top = np.argpartition(-weights, k - 1, axis=1)[:, :k]
    w = np.take_along_axis(weights, top, axis=1)
    d = np.take_along_axis(dsum, top[..., None], axis=1)
    dn = d / np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-300)
    n = np.sum(w[..., None] * dn, axis=1)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    good = (norm[:, 0] > 1e-12) & (w.sum(axis=1) > 0)
    return np.where(good[:, None], n / np.where(norm > 0, norm, 1.0), fallback)


def softmax_probability(cost, mask, tau):
    z = -cost / tau
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=0, keepdims=True)
    return np.where(mask[None], p, 0.0)


def _masked_box(x, mask, radius):
    """Box mean over ``mask`` (D, H, W) in each (H, W) slice of ``x`` (D, H, W[, C])."""
    size = 2 * radius + 1
    m = np.broadcast_to(mask, x.shape[:3]).astype(np.float64)
    den = uniform_filter(m, size=(1, size, size), mode="constant")
    extra = (1,) * (x.ndim - 3)
    sl = (Ellipsis,) + (None,) * len(extra)
    num = uniform_filter(x * m[sl], size=(1, size, size) + extra, mode="constant")
    den = den[sl]
    return np.where(den > 1e-12, num / np.where(den > 1e-12, den, 1.0), 0.0)


def guided_filter_slices(cost, guide, mask, radius, eps=1e-2):
    """Edge-aware (guided) smoothing of every depth slice, restricted to ``mask`` (D, H, W)."""
    if radius == 0:
        return cost.copy()
    I = np.broadcast_to(guide[None], cost.shape)
    mean_I = _masked_box(I, mask, radius)
    mean_p = _masked_box(cost, mask, radius)
    corr_Ip = _masked_box(I * cost, mask, radius)
    var_I = _masked_box(I * I, mask, radius) - mean_I ** 2
    a = (corr_Ip - mean_I * mean_p) / (var_I + eps)
    b = mean_p - a * mean_I
    out = _masked_box(a, mask, radius) * I + _masked_box(b, mask, radius)
    return np.where(mask, out, cost)


def filter_cost_volume(vol, guide, radius=2, depth_window=3, eps=1e-2):
    """Guided spatial smoothing per depth slice plus a box filter along depth.

    ``radius=0`` with ``depth_window=1`` is the identity.
    """
    radius = check_int(radius, "radius", 0)
    depth_window = check_int(depth_window, "depth_window", 1)
    guide = check_image(guide)
    g = np.log(np.maximum(guide.mean(axis=2), 1e-12))
    if vol.mask.any():
        g = (g - g[vol.mask].mean()) / (g[vol.mask].std() + 1e-12)
    valid = vol.valid
    cost = guided_filter_slices(vol.cost, g, valid, radius, eps)
    if depth_window > 1:
        w = valid.astype(np.float64)
        num = uniform_filter1d(np.where(valid, cost, 0.0), size=depth_window, axis=0, mode="constant")
        den = uniform_filter1d(w, size=depth_window, axis=0, mode="constant")
        cost = np.where(den > 1e-12, num / np.where(den > 1e-12, den, 1.0), cost)
    cost = np.where(valid, cost, vol.cost)
    if radius > 0:
        n = _masked_box(vol.normal, valid, radius)
        norm = np.linalg.norm(n, axis=-1, keepdims=True)
        normal = np.where(norm > 1e-12, n / np.where(norm > 1e-12, norm, 1.0), vol.normal)
        normal = np.where(vol.mask[None, ..., None], normal, vol.normal)
    else:
        normal = vol.normal.copy()
    return CostVolumes(vol.depths, cost, softmax_probability(cost, vol.mask, vol.tau), normal, vol.mask.copy(),
                       vol.tau, valid.copy())


def decode_depth_normal(vol):
    """Expected depth and normalised expected normal per pixel."""
    p = vol.prob
    depth = np.tensordot(vol.depths, p, axes=(0, 0))
    n = np.sum(p[..., None] * vol.normal, axis=0)
    norm = np.linalg.norm(n, axis=-1)
    mask = vol.mask & (norm >= 1e-8)
    normal = np.where(mask[..., None], n / np.where(norm >= 1e-8, norm, 1.0)[..., None], 0.0)
    depth = np.where(mask, np.clip(depth, vol.depths.min(), vol.depths.max()), 0.0)
    confidence = np.where(mask, p.max(axis=0), 0.0)
    return DepthNormalMaps(depth, normal, mask, confidence)


def depth_to_normal(depth, cam, mask=None):
    """Normals from the cross product of depth-map tangents (camera frame, facing the camera).

    Central differences where both neighbours are valid, one-sided
    differences at mask borders; pixels lacking a neighbour along either
    axis are masked.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if mask is None:
        mask = depth > 0
    mask = np.asarray(mask, dtype=bool)
    u, v = cam.pixel_grid()
    P = cam.rays_camera(u, v) * depth[..., None]

    def tangent(axis):
        fwd = np.roll(P, -1, axis=axis) - P
        bwd = P - np.roll(P, 1, axis=axis)
        m_f = np.roll(mask, -1, axis=axis)
        m_b = np.roll(mask, 1, axis=axis)
        n = mask.shape[axis]
        idx = np.arange(n)
        edge_f = (idx == n - 1)
        edge_b = (idx == 0)
        shape = [1, 1]
        shape[axis] = n
        m_f = m_f & ~edge_f.reshape(shape)
        m_b = m_b & ~edge_b.reshape(shape)
        t = np.where((m_f & m_b)[..., None], 0.5 * (fwd + bwd),
                     np.where(m_f[..., None], fwd, np.where(m_b[..., None], bwd, 0.0)))
        return t, m_f | m_b

    tu, ok_u = tangent(1)
    tv, ok_v = tangent(0)
    n = np.cross(tu, tv)
    norm = np.linalg.norm(n, axis=-1, keepdims=True)
    valid = mask & ok_u & ok_v & (norm[..., 0] > 0)
    n = n / np.where(norm > 0, norm, 1.0)
    flip = np.sum(n * P, axis=-1) > 0
    n = np.where(flip[..., None], -n, n)
    return np.where(valid[..., None], n, 0.0), valid


def refine_depth(maps, cam, weight=1e-3, bounds=None):
    """Adjust depths so their tangents follow the estimated normals.

    Least squares over the masked pixels: every pair of horizontally or
    vertically adjacent pixels contributes ``n . (P_j - P_i) = 0`` with
    ``n`` the mean of their normals, and every pixel is weakly anchored to
    its decoded depth with ``weight``. The global scale is then matched to
    the decoded depths by their median ratio. Normals are returned unchanged.
    """
    depth, normal, mask = maps.depth, maps.normal, maps.mask
    N = int(mask.sum())
    if N == 0 or weight is None or weight <= 0:
        return maps
    H, W = mask.shape
    index = np.full((H, W), -1, dtype=np.int64)
    index[mask] = np.arange(N)
    rays = cam.rays_camera()
    rows, cols, vals = [], [], []
    start = 0
    for dy, dx in ((0, 1), (1, 0)):
        pair = mask[:H - dy, :W - dx] & mask[dy:, dx:]
        ys, xs = np.nonzero(pair)
        n = normal[ys, xs] + normal[ys + dy, xs + dx]
        k = start + np.arange(len(ys))
        rows += [k, k]
        cols += [index[ys, xs], index[ys + dy, xs + dx]]
        vals += [-np.sum(n * rays[ys, xs], axis=1), np.sum(n * rays[ys + dy, xs + dx], axis=1)]
        start += len(ys)
    A = sp.csr_matrix((0.5 * np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(start, N))
    M = (A.T @ A + sp.identity(N, format="csr") * weight ** 2).tocsc()
    z = spsolve(M, weight ** 2 * depth[mask])
    # scaling all depths leaves every tangent constraint satisfied, so the
    # weak anchor pins the scale poorly; set it robustly from the decode instead
    z = z * np.median(depth[mask] / z)
    if bounds is not None:
        z = np.clip(z, bounds[0], bounds[1])
    out = depth.copy()
    out[mask] = z
    return DepthNormalMaps(out, normal.copy(), mask.copy(), maps.confidence)


def angular_error_deg(a, b):
    return np.degrees(np.arccos(np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)))


def consistency_score(n_hat, depth, cam, mask=None, interior_threshold=None):
    """Mean angle (degrees) between normals and depth-derived normals.

    With ``interior_threshold`` (relative depth-gradient magnitude), pixels
    whose depth jumps more than that fraction to a neighbour are excluded,
    approximating the continuous-surface region.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if mask is None:
        mask = depth > 0
    nbar, valid = depth_to_normal(depth, cam, mask)
    valid = valid & mask
    if interior_threshold is not None:
        gy, gx = np.gradient(depth)
        rel = np.hypot(gx, gy) / np.maximum(depth, 1e-12)
        valid &= rel < interior_threshold
    if not valid.any():
        raise GeometryError("consistency_score: empty mask")
    return float(np.mean(angular_error_deg(n_hat[valid], nbar[valid])))


class PlaneSweepMVS(BaseEstimator):
    """``predict([ref, src1, ...]) -> DepthNormalMaps`` for ``ViewData`` inputs.

    ``refine_weight`` anchors the normal-guided depth refinement applied
    after decoding (``refine_depth``); ``0`` or ``None`` returns the plain
    expectation decode.
    """

    def __init__(self, dmin=None, dmax=None, num_hypotheses=64, alpha_photo=1.0, beta_normal=2.0, tau=0.1,
                 filter_radius=2, depth_window=3, match_level=1, top_cells=4, refine_weight=1e-3, bbox=None):
        self.dmin = dmin
        self.dmax = dmax
        self.num_hypotheses = num_hypotheses
        self.alpha_photo = alpha_photo
        self.beta_normal = beta_normal
        self.tau = tau
        self.filter_radius = filter_radius
        self.depth_window = depth_window
        self.match_level = match_level
        self.top_cells = top_cells
        self.refine_weight = refine_weight
        self.bbox = bbox

    def fit(self, X=None, y=None):
        check_int(self.num_hypotheses, "num_hypotheses", 2)
        check_positive(self.tau, "tau")
        check_int(self.filter_radius, "filter_radius", 0)
        if (self.dmin is None or self.dmax is None) and self.bbox is None:
            raise ConfigError("need either dmin/dmax or a bounding box")
        self.fitted_ = True
        return self

    def hypotheses(self, cam):
        if self.dmin is not None and self.dmax is not None:
            return DepthHypothesisRange(float(self.dmin), float(self.dmax), int(self.num_hypotheses))
        return DepthHypothesisRange.from_bbox(cam, self.bbox[0], self.bbox[1], int(self.num_hypotheses))

    def cost_volume(self, X):
        if not hasattr(self, "fitted_"):
            self.fit()
        ref, srcs = X[0], list(X[1:])
        vol = build_cost_volume(ref, srcs, self.hypotheses(ref.camera), self.alpha_photo, self.beta_normal,
                                self.tau, self.match_level, self.top_cells)
        if self.filter_radius > 0 or self.depth_window > 1:
            vol = filter_cost_volume(vol, ref.view.image, self.filter_radius, self.depth_window)
        return vol

    def predict(self, X):
        vol = self.cost_volume(X)
        check_nonempty(vol.mask, "reference mask")
        maps = decode_depth_normal(vol)
        if self.refine_weight:
            maps = refine_depth(maps, X[0].camera, self.refine_weight, (vol.depths.min(), vol.depths.max()))
        return maps
