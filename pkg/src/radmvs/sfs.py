"""Per-pixel surface-normal densities from a single view.

Normals are parameterised by their viewer-frame ``(n_x, n_y)`` on the unit
disk (orthographic projection of the visible hemisphere). A level-``l``
grid has ``8 * 2**l`` cells per side over ``[-1, 1]^2``; a cell is active
when its center lies strictly inside the disk.

Observed likelihood of a normal is a product over colour channels of
Laplace densities on log radiance. The search evaluates every active cell
of the 8x8 grid at its best orientation among a 4x4 sub-grid of the cell,
then repeatedly doubles the grid resolution, keeping only the children of
the ``top_k`` most likely cells. Contextual aggregation multiplies each
pixel's likelihood by an edge-aware average of its neighbours' densities.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_image, check_int, check_mask, check_positive
from .exceptions import ConfigError
from .radiometry.render import render_irradiance

BASE_RES = 8
_PIX_CHUNK = 1024


class HemiGrid:
    """Square grid over the disk of visible normal directions."""

    def __init__(self, level):
        self.level = check_int(level, "level", 0)
        self.resolution = BASE_RES * 2 ** self.level

    def centers(self):
        R = self.resolution
        c = -1.0 + (np.arange(R) + 0.5) * 2.0 / R
        ny, nx = np.meshgrid(c, c, indexing="ij")
        return nx, ny

    def active(self):
        nx, ny = self.centers()
        return nx ** 2 + ny ** 2 < 1.0

    def directions(self):
        nx, ny = self.centers()
        nz = np.sqrt(np.clip(1.0 - nx ** 2 - ny ** 2, 0.0, None))
        return np.stack([nx, ny, nz], axis=-1)

    def cell_of(self, dirs):
        """Flat cell index of viewer-frame directions; -1 when ``n_z <= 0``."""
        dirs = np.asarray(dirs, dtype=np.float64)
        R = self.resolution
        ix = np.clip(np.floor((dirs[..., 0] + 1.0) * R / 2.0).astype(np.int64), 0, R - 1)
        iy = np.clip(np.floor((dirs[..., 1] + 1.0) * R / 2.0).astype(np.int64), 0, R - 1)
        return np.where(dirs[..., 2] > 0, iy * R + ix, -1)

    def cell_diagonal_deg(self):
        """Angular size of a cell diagonal at the disk center."""
        return np.degrees(np.arcsin(min(1.0, 2.0 * np.sqrt(2.0) / self.resolution)))


def coarsen_cells(cells, level, target_level):
    """Map flat cell indices at ``level`` to their ancestors at ``target_level``."""
    if target_level >= level:
        return cells
    R = BASE_RES * 2 ** level
    shift = level - target_level
    Rt = BASE_RES * 2 ** target_level
    iy, ix = cells // R, cells % R
    return np.where(cells >= 0, (iy >> shift) * Rt + (ix >> shift), -1)


class _Lattice:
    """Irradiance table at the sub-sample points of one grid level for one view."""

    def __init__(self, level, sub, env, brdf, to_viewer, wo_world):
        self.level = level
        self.sub = sub
        R = BASE_RES * 2 ** level
        self.size = L = R * sub
        c = -1.0 + (np.arange(L) + 0.5) * 2.0 / L
        ny, nx = np.meshgrid(c, c, indexing="ij")
        rr = nx ** 2 + ny ** 2
        self.valid = rr < 1.0
        nz = np.sqrt(np.clip(1.0 - rr, 0.0, None))
        self.dirs = np.stack([nx, ny, nz], axis=-1)
        self.E = np.full((L, L, 3), np.nan)
        world = self.dirs[self.valid] @ to_viewer  # viewer -> world is the transpose
        self.E[self.valid] = render_irradiance(env, brdf, world, wo_world)

    def subsample_index(self, cells):
        """Flat lattice indices (…, sub*sub) of the sub-samples of each cell."""
        R = BASE_RES * 2 ** self.level
        iy, ix = cells // R, cells % R
        a = np.arange(self.sub)
        jy = iy[..., None, None] * self.sub + a[:, None]
        jx = ix[..., None, None] * self.sub + a[None, :]
        flat = jy * self.size + jx
        return flat.reshape(cells.shape + (self.sub * self.sub,))


def log_laplace(x, mu, b):
    return -np.log(2.0 * b) - np.abs(x - mu) / b


def _log_irradiance(E, log_floor):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(E > 0, np.log(np.where(E > 0, E, 1.0)), log_floor)


def normal_log_likelihood(I, E, b, log_floor=-np.inf):
    """Log of the observed likelihood for pixel colour(s) ``I`` and irradiance(s) ``E``."""
    logI = np.log(np.asarray(I, dtype=np.float64))
    logE = _log_irradiance(np.asarray(E, dtype=np.float64), log_floor)
    return np.sum(log_laplace(logI, logE, b), axis=-1)


def normal_likelihood(I, env, brdf, wo, n, b=0.1, log_floor=None):
    """Observed likelihood ``p(I | n)`` of one normal (all vectors in world frame)."""
    b = check_positive(b, "b")
    I = np.asarray(I, dtype=np.float64)
    if np.any(I <= 0):
        raise ConfigError("pixel colour must be strictly positive in every channel")
    E = render_irradiance(env, brdf, n, wo)
    if log_floor is None:
        log_floor = np.log(1e-6 * I.max())
    return float(np.exp(normal_log_likelihood(I, E, b, log_floor)))


@dataclass(eq=False)
class NormalSampleSet:
    """Per-pixel sampled normals and their observed log-likelihoods.

    ``dirs`` (H, W, S, 3) are viewer-frame unit normals, ``cells`` (H, W, S)
    the flat grid index at ``level`` (-1 for padding), ``loglik`` (H, W, S).
    """

    dirs: np.ndarray
    cells: np.ndarray
    loglik: np.ndarray
    mask: np.ndarray
    level: int
    degenerate: np.ndarray

    @property
    def likelihood(self):
        return np.exp(self.loglik)

    def probabilities(self):
        return _normalize_log(self.loglik, self.mask, self.cells)


def _normalize_log(loglik, mask, cells):
    valid = cells >= 0
    top = np.max(np.where(valid, loglik, -np.inf), axis=-1, keepdims=True)
    finite = np.isfinite(top)
    with np.errstate(invalid="ignore"):
        w = np.where(valid & finite, np.exp(loglik - np.where(finite, top, 0.0)), 0.0)
    s = w.sum(axis=-1, keepdims=True)
    uniform = valid / np.maximum(valid.sum(axis=-1, keepdims=True), 1)
    p = np.where(s > 0, w / np.where(s > 0, s, 1.0), uniform)
    return np.where(mask[..., None], p, 0.0)


@dataclass(eq=False)
class NormalDensityField:
    """Per-pixel discrete normal densities (probabilities sum to 1 per unmasked pixel)."""

    dirs: np.ndarray
    cells: np.ndarray
    prob: np.ndarray
    mask: np.ndarray
    level: int

    @property
    def shape(self):
        return self.mask.shape

    @property
    def samples_per_pixel(self):
        return self.prob.shape[-1]

    def argmax_normals(self):
        k = np.argmax(self.prob, axis=-1)
        return np.take_along_axis(self.dirs, k[..., None, None], axis=-2)[..., 0, :]

    def mean_normals(self):
        m = np.sum(self.prob[..., None] * self.dirs, axis=-2)
        n = np.linalg.norm(m, axis=-1, keepdims=True)
        return np.where(n > 1e-12, m / np.where(n > 1e-12, n, 1.0), np.array([0.0, 0.0, 1.0]))


def _pixel_inputs(image, mask):
    image = check_image(image)
    mask = check_mask(mask, image.shape) & np.all(image > 0, axis=2)
    return image, mask


def coarse_to_fine_search(image, mask, env, brdf, camera, levels=4, b=0.1, top_k=16, sub=4,
                          log_floor=None, lattices=None):
    """Sample per-pixel normal likelihoods on a hierarchy of hemispherical grids.

    Returns the sample set of the final level. ``lattices`` may carry
    precomputed per-level irradiance tables (see ``build_lattices``).
    """
    levels = check_int(levels, "levels", 1)
    top_k = check_int(top_k, "top_k", 1)
    b = check_positive(b, "b")
    image, mask = _pixel_inputs(image, mask)
    H, W = mask.shape
    if log_floor is None:
        peak = image[mask].max() if mask.any() else 1.0
        log_floor = np.log(1e-6 * peak)
    if lattices is None:
        lattices = build_lattices(env, brdf, camera, levels, sub)

    pix = np.flatnonzero(mask.ravel())
    logI = np.log(image.reshape(-1, 3)[pix])

    grid0 = HemiGrid(0)
    cells0 = np.flatnonzero(grid0.active().ravel())

    def evaluate(lat, cells, logI_chunk):
        # cells: (P, S) -> best sub-sample per cell
        idx = lat.subsample_index(np.maximum(cells, 0))              # (P, S, Q)
        logE = _log_irradiance(lat.E.reshape(-1, 3)[idx], log_floor)  # (P, S, Q, 3)
        ll = np.sum(log_laplace(logI_chunk[:, None, None, :], logE, b), axis=-1)
        ok = lat.valid.ravel()[idx] & (cells >= 0)[..., None]
        ll = np.where(ok, ll, -np.inf)
        best = np.argmax(ll, axis=-1)
        bll = np.take_along_axis(ll, best[..., None], axis=-1)[..., 0]
        bidx = np.take_along_axis(idx, best[..., None], axis=-1)[..., 0]
        return bll, lat.dirs.reshape(-1, 3)[bidx]

    n_final = len(cells0) if levels == 1 else 4 * min(top_k, len(cells0))
    out_dirs = np.zeros((len(pix), n_final, 3))
    out_cells = np.full((len(pix), n_final), -1, dtype=np.int64)
    out_ll = np.full((len(pix), n_final), -np.inf)

    for s in range(0, len(pix), _PIX_CHUNK):
        li = logI[s:s + _PIX_CHUNK]
        cells = np.broadcast_to(cells0, (len(li), len(cells0)))
        ll, dirs = evaluate(lattices[0], cells, li)
        for level in range(1, levels):
            k = min(top_k, cells.shape[1])
            top = np.argsort(-ll, axis=1, kind="stable")[:, :k]
            parents = np.take_along_axis(cells, top, axis=1)
            finite = np.isfinite(np.take_along_axis(ll, top, axis=1))
            # degenerate pixels (no finite likelihood) keep refining their top cells so they stay uniform
            parent_ok = (finite | ~finite.any(axis=1, keepdims=True)) & (parents >= 0)
            Rp = BASE_RES * 2 ** (level - 1)
            py, px = parents // Rp, parents % Rp
            R = 2 * Rp
            kids = []
            for dy in (0, 1):
                for dx in (0, 1):
                    cy, cx = 2 * py + dy, 2 * px + dx
                    cxn = -1.0 + (cx + 0.5) * 2.0 / R
                    cyn = -1.0 + (cy + 0.5) * 2.0 / R
                    active = parent_ok & (cxn ** 2 + cyn ** 2 < 1.0)
                    kids.append(np.where(active, cy * R + cx, -1))
            cells = np.stack(kids, axis=2).reshape(len(li), -1)
            ll, dirs = evaluate(lattices[level], cells, li)
        out_dirs[s:s + _PIX_CHUNK, :cells.shape[1]] = dirs
        out_cells[s:s + _PIX_CHUNK, :cells.shape[1]] = cells
        out_ll[s:s + _PIX_CHUNK, :cells.shape[1]] = ll

    out_dirs[out_cells < 0] = (0.0, 0.0, 1.0)
    S = n_final
    dirs_full = np.zeros((H * W, S, 3))
    dirs_full[..., 2] = 1.0
    cells_full = np.full((H * W, S), -1, dtype=np.int64)
    ll_full = np.full((H * W, S), -np.inf)
    dirs_full[pix], cells_full[pix], ll_full[pix] = out_dirs, out_cells, out_ll
    degenerate = mask & ~np.isfinite(ll_full.max(axis=1)).reshape(H, W)
    return NormalSampleSet(dirs_full.reshape(H, W, S, 3), cells_full.reshape(H, W, S),
                           ll_full.reshape(H, W, S), mask, levels - 1, degenerate)


def build_lattices(env, brdf, camera, levels, sub=4):
    """Per-level irradiance tables for the view direction of ``camera``."""
    wo = -camera.optical_axis
    return [_Lattice(level, sub, env, brdf, camera.to_viewer, wo) for level in range(levels)]


def dense_search(image, mask, lattice, b=0.1, log_floor=None):
    """Exhaustive evaluation of every lattice point; returns (H, W) best cell and normal.

    Brute-force counterpart of ``coarse_to_fine_search`` at the lattice's level.
    """
    image, mask = _pixel_inputs(image, mask)
    H, W = mask.shape
    if log_floor is None:
        log_floor = np.log(1e-6 * image[mask].max())
    valid = lattice.valid.ravel()
    logE = _log_irradiance(lattice.E.reshape(-1, 3)[valid], log_floor).astype(np.float32)
    dirs = lattice.dirs.reshape(-1, 3)[valid]
    pix = np.flatnonzero(mask.ravel())
    logI = np.log(image.reshape(-1, 3)[pix]).astype(np.float32)
    best = np.empty(len(pix), dtype=np.int64)
    for s in range(0, len(pix), 256):
        a = logI[s:s + 256]
        r = np.abs(a[:, None, 0] - logE[None, :, 0])
        r += np.abs(a[:, None, 1] - logE[None, :, 1])
        r += np.abs(a[:, None, 2] - logE[None, :, 2])
        best[s:s + 256] = np.argmin(r, axis=1)
    grid = HemiGrid(lattice.level)
    cell = np.full(H * W, -1, dtype=np.int64)
    normal = np.zeros((H * W, 3))
    normal[pix] = dirs[best]
    cell[pix] = grid.cell_of(dirs[best])
    return cell.reshape(H, W), normal.reshape(H, W, 3)


def aggregate_density(samples, image, iters=3, radius=2, color_sigma=0.1, match_level=2, blur_cells=1.0):
    """Refine observed likelihoods with edge-aware neighbourhood context.

    Each iteration sets ``p_hat(n_i) ∝ p(I | n_i) * g(n_i)`` where ``g`` is
    the colour-similarity weighted mean, over the other pixels of a
    ``(2r+1)^2`` window, of their current densities looked up at the grid
    cell (at ``match_level``) containing ``n_i``. Neighbour densities are
    smoothed over the grid by a Gaussian of ``blur_cells`` cells first, so
    near-tied adjacent cells are not separated by quantisation alone.
    ``iters=0`` returns the normalised likelihood.
    """
    iters = check_int(iters, "iters", 0)
    blur_cells = check_positive(blur_cells, "blur_cells", allow_zero=True)
    radius = check_int(radius, "radius", 0)
    image = check_image(image)
    mask = samples.mask
    p_obs = samples.probabilities()
    q = p_obs.copy()
    level = samples.level
    match = min(level, match_level)
    G = (BASE_RES * 2 ** match) ** 2
    coarse = coarsen_cells(samples.cells, level, match)
    valid = samples.cells >= 0
    coarse_idx = np.where(valid, coarse, 0)

    if iters == 0 or not mask.any():
        return NormalDensityField(samples.dirs, samples.cells, q, mask, level)

    ys, xs = np.nonzero(mask)
    y0, y1 = ys.min(), ys.max() + 1
    x0, x1 = xs.min(), xs.max() + 1
    sub_mask = mask[y0:y1, x0:x1]
    sub_img = image[y0:y1, x0:x1]
    sigma = color_sigma * image[mask].max()
    h, w = sub_mask.shape
    r = radius
    pad_img = np.pad(sub_img, ((r, r), (r, r), (0, 0)))
    pad_mask = np.pad(sub_mask, r)
    offsets = [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1) if (dy, dx) != (0, 0)]
    weights = []
    for dy, dx in offsets:
        nb = pad_img[r + dy:r + dy + h, r + dx:r + dx + w]
        nm = pad_mask[r + dy:r + dy + h, r + dx:r + dx + w]
        d2 = np.sum((sub_img - nb) ** 2, axis=-1)
        weights.append(np.where(nm & sub_mask, np.exp(-d2 / sigma ** 2), 0.0))
    wsum = np.sum(weights, axis=0) if weights else np.zeros((h, w))

    p_sub = p_obs[y0:y1, x0:x1]
    c_sub = coarse_idx[y0:y1, x0:x1]
    v_sub = valid[y0:y1, x0:x1]
    q_sub = q[y0:y1, x0:x1]
    for _ in range(iters):
        hist = np.zeros((h, w, G))
        np.add.at(hist, (np.arange(h)[:, None, None], np.arange(w)[None, :, None], c_sub),
                  np.where(v_sub, q_sub, 0.0))
        if blur_cells > 0:
            Rm = BASE_RES * 2 ** match
            hist = gaussian_filter(hist.reshape(h, w, Rm, Rm), sigma=(0, 0, blur_cells, blur_cells),
                                   mode="constant").reshape(h, w, G)
        pad_hist = np.pad(hist, ((r, r), (r, r), (0, 0)))
        g = np.zeros(q_sub.shape)
        for (dy, dx), wt in zip(offsets, weights):
            nb = pad_hist[r + dy:r + dy + h, r + dx:r + dx + w]
            g += wt[..., None] * np.take_along_axis(nb, c_sub, axis=2)
        isolated = wsum <= 0
        g = np.where(isolated[..., None], 1.0, g / np.where(isolated, 1.0, wsum)[..., None])
        new = p_sub * g
        s = new.sum(axis=-1, keepdims=True)
        # neighbours with no overlapping support: keep the observed likelihood
        q_sub = np.where(s > 0, new / np.where(s > 0, s, 1.0), p_sub)
        q_sub = np.where(sub_mask[..., None], q_sub, 0.0)
    q = q.copy()
    q[y0:y1, x0:x1] = q_sub
    return NormalDensityField(samples.dirs, samples.cells, q, mask, level)


class ShapeFromShading(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``transform(view) -> NormalDensityField``.

    Parameters
    ----------
    env : EnvironmentMap
        Known distant illumination.
    brdf : Brdf
        Current reflectance estimate.
    b : float
        Laplace scale on natural-log radiance.
    levels : int
        Number of grid levels (final grid is ``8 * 2**(levels-1)`` wide).
    dark_percentile : float or None
        If set, pixels darker than this intensity percentile are masked
        (optional shadow guard).
    """

    def __init__(self, env=None, brdf=None, b=0.1, levels=4, top_k=16, sub_samples=4,
                 aggregate_iters=3, aggregate_radius=2, color_sigma=0.1, match_level=2, blur_cells=1.0,
                 dark_percentile=None):
        self.env = env
        self.brdf = brdf
        self.b = b
        self.levels = levels
        self.top_k = top_k
        self.sub_samples = sub_samples
        self.aggregate_iters = aggregate_iters
        self.aggregate_radius = aggregate_radius
        self.color_sigma = color_sigma
        self.match_level = match_level
        self.blur_cells = blur_cells
        self.dark_percentile = dark_percentile

    def fit(self, X=None, y=None):
        if self.env is None or self.brdf is None:
            raise ConfigError("ShapeFromShading needs both env and brdf")
        check_positive(self.b, "b")
        check_int(self.levels, "levels", 1)
        check_int(self.top_k, "top_k", 1)
        check_int(self.sub_samples, "sub_samples", 1)
        self.n_features_in_ = 3
        return self

    def search(self, view):
        mask = view.mask
        if self.dark_percentile is not None and mask.any():
            lum = view.image.mean(axis=2)
            mask = mask & (lum >= np.percentile(lum[mask], self.dark_percentile))
        return coarse_to_fine_search(view.image, mask, self.env, self.brdf, view.camera,
                                     levels=self.levels, b=self.b, top_k=self.top_k, sub=self.sub_samples)

    def transform(self, X):
        if not hasattr(self, "n_features_in_"):
            self.fit()
        samples = self.search(X)
        return aggregate_density(samples, X.image, iters=self.aggregate_iters, radius=self.aggregate_radius,
                                 color_sigma=self.color_sigma, match_level=self.match_level,
                                 blur_cells=self.blur_cells)
