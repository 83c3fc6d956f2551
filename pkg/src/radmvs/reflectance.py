"""Homogeneous reflectance estimation alternating with geometry.

The objective compares observed and re-rendered views in the log domain
after Gaussian blurring both (coarse-level consistency). Optionally each
pixel's normal is first *snapped*: replaced by the direction within a small
cone around the estimate whose rendered radiance best matches the pixel.
"""

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter, map_coordinates
from scipy.optimize import minimize
from sklearn.base import BaseEstimator

from ._validation import check_int, check_positive
from .exceptions import ConfigError
from .radiometry.brdf import Lambertian, Microfacet
from .radiometry.render import render_irradiance, render_terms

log = logging.getLogger(__name__)

GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))

_BOUNDS = {
    "lambertian": ([1e-3] * 3, [1.0] * 3),
    "microfacet": ([1e-3] * 3 + [0.0] * 3 + [0.02], [1.0] * 3 + [1.0] * 3 + [1.0]),
}


@dataclass(frozen=True, eq=False)
class BrdfParams:
    """Parameter vector of a parametric BRDF family with box bounds."""

    kind: str
    values: np.ndarray

    def __post_init__(self):
        if self.kind not in _BOUNDS:
            raise ConfigError(f"unknown BRDF family {self.kind!r}")
        v = np.asarray(self.values, dtype=np.float64).copy()
        lo, hi = self.bounds
        if v.shape != lo.shape:
            raise ConfigError(f"{self.kind} takes {lo.size} parameters, got {v.size}")
        v = np.clip(v, lo, hi)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def bounds(self):
        lo, hi = _BOUNDS[self.kind]
        return np.array(lo, dtype=np.float64), np.array(hi, dtype=np.float64)

    def to_brdf(self):
        v = self.values
        if self.kind == "lambertian":
            return Lambertian(v[:3])
        return Microfacet(v[:3], v[3:6], v[6])

    @classmethod
    def from_brdf(cls, brdf):
        if isinstance(brdf, Lambertian):
            return cls("lambertian", brdf.albedo)
        if isinstance(brdf, Microfacet):
            return cls("microfacet", np.concatenate([brdf.diffuse, brdf.specular, [brdf.roughness]]))
        raise ConfigError(f"cannot parameterise {type(brdf).__name__}")

    def as_family(self, kind):
        """Re-express in another family (Lambertian -> microfacet with no specular lobe)."""
        if kind == self.kind:
            return self
        if self.kind == "lambertian" and kind == "microfacet":
            return BrdfParams(kind, np.concatenate([self.values, [0.0, 0.0, 0.0], [0.5]]))
        if self.kind == "microfacet" and kind == "lambertian":
            return BrdfParams(kind, self.values[:3])
        raise ConfigError(f"cannot convert {self.kind} to {kind}")

    def named(self):
        return {"kind": self.kind, **self.to_brdf().to_params()}


def _cone_samples(n_est, cone_deg, n_samples):
    """Fibonacci-spiral directions within ``cone_deg`` of each ``n_est`` (P, 3) -> (P, S, 3).

    Sample 0 is ``n_est`` itself.
    """
    n_est = np.atleast_2d(n_est)
    i = np.arange(n_samples)
    theta = np.radians(cone_deg) * np.sqrt(i / max(n_samples - 1, 1))
    phi = i * GOLDEN_ANGLE
    local = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], axis=-1)
    helper = np.where(np.abs(n_est[:, :1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))
    t = np.cross(helper, n_est)
    t /= np.linalg.norm(t, axis=1, keepdims=True)
    b = np.cross(n_est, t)
    out = (local[None, :, 0:1] * t[:, None] + local[None, :, 1:2] * b[:, None] + local[None, :, 2:3] * n_est[:, None])
    out /= np.linalg.norm(out, axis=-1, keepdims=True)
    out[:, 0] = n_est
    return out, theta


def snap_normals(I, n_est, irradiance_fn, cone_deg=15.0, n_samples=64):
    """Batch version of ``snapped_normal``; ``irradiance_fn`` maps (M, 3) normals to (M, 3) irradiance."""
    I = np.atleast_2d(np.asarray(I, dtype=np.float64))
    n_est = np.atleast_2d(np.asarray(n_est, dtype=np.float64))
    if cone_deg <= 0:
        return n_est.copy()
    cand, dev = _cone_samples(n_est, cone_deg, n_samples)
    P, S = cand.shape[:2]
    E = irradiance_fn(cand.reshape(-1, 3)).reshape(P, S, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sum(np.abs(np.log(I)[:, None, :] - np.log(E)), axis=-1)
    r = np.where(np.isfinite(r), r, np.inf)
    # candidates are ordered by deviation, so argmin already breaks ties toward n_est
    k = np.argmin(r, axis=1)
    best = cand[np.arange(P), k]
    none = ~np.isfinite(r[np.arange(P), k])
    return np.where(none[:, None], n_est, best)


def snapped_normal(I, n_est, env, brdf, wo, cone_deg=15.0, n_samples=64):
    """Direction within ``cone_deg`` of ``n_est`` minimising the log-radiance L1 residual."""
    check_positive(cone_deg, "cone_deg")
    fn = lambda n: render_irradiance(env, brdf, n, wo)  # noqa: E731
    return snap_normals(I, n_est, fn, cone_deg, n_samples)[0]


class ReflectanceMap:
    """Irradiance tabulated over viewer-frame normals, bilinearly interpolated."""

    def __init__(self, env, brdf, camera, resolution=64):
        self.resolution = L = resolution
        c = -1.0 + (np.arange(L) + 0.5) * 2.0 / L
        ny, nx = np.meshgrid(c, c, indexing="ij")
        r = np.sqrt(nx ** 2 + ny ** 2)
        scale = np.where(r > 0.999, 0.999 / np.maximum(r, 1e-12), 1.0)
        nx, ny = nx * scale, ny * scale
        nz = np.sqrt(np.clip(1.0 - nx ** 2 - ny ** 2, 0.0, None))
        dirs = np.stack([nx, ny, nz], axis=-1).reshape(-1, 3)
        self.to_viewer = camera.to_viewer
        E = render_irradiance(env, brdf, dirs @ self.to_viewer, -camera.optical_axis)
        self.table = E.reshape(L, L, 3)

    def __call__(self, n_viewer):
        n = np.asarray(n_viewer, dtype=np.float64)
        L = self.resolution
        x = (n[:, 0] + 1.0) * L / 2.0 - 0.5
        y = (n[:, 1] + 1.0) * L / 2.0 - 0.5
        out = np.stack([map_coordinates(self.table[..., k], [y, x], order=1, mode="nearest") for k in range(3)],
                       axis=-1)
        return np.where((n[:, 2] > 0)[:, None], out, 0.0)


def _masked_blur(img, mask, sigma):
    if sigma == 0:
        return img
    m = mask.astype(np.float64)
    if np.isinf(sigma):
        mean = (img * m[..., None]).sum(axis=(0, 1)) / m.sum()
        return np.broadcast_to(mean, img.shape)
    den = gaussian_filter(m, sigma, mode="constant")
    num = np.stack([gaussian_filter(img[..., k] * m, sigma, mode="constant") for k in range(3)], axis=-1)
    return num / np.where(den > 0, den, 1.0)[..., None]


def _view_normals(view, maps):
    cam = view.camera
    mask = view.mask & maps.mask
    return mask, maps.normal[mask] @ cam.R


def render_geometry(view, maps, env, brdf, snap=False, cone_deg=15.0, n_samples=64, rmap_resolution=32):
    """Re-render ``view`` from its depth/normal maps; returns (image, mask).

    With ``snap`` each normal is first snapped against a tabulated
    reflectance map of ``brdf``, and the snapped pixels are shaded from that
    same map.
    """
    cam = view.camera
    mask, n_world = _view_normals(view, maps)
    out = np.zeros(view.image.shape)
    if not mask.any():
        return out, mask
    if snap:
        rmap = ReflectanceMap(env, brdf, cam, rmap_resolution)
        n_view = snap_normals(view.image[mask], n_world @ cam.to_viewer.T, rmap, cone_deg, n_samples)
        out[mask] = rmap(n_view)
    else:
        out[mask] = render_irradiance(env, brdf, n_world, -cam.optical_axis)
    return out, mask


def _log_discrepancy(bI, bR):
    floor = 1e-6 * bI.max()
    ratio = np.maximum(bI, floor) / np.maximum(bR, floor)
    return np.abs(np.log(ratio))


def reflectance_objective(params, views, env, blur_sigma=4.0, snap=False, cone_deg=15.0, n_samples=64):
    """Sum over views of the per-pixel mean blurred log-radiance L1 discrepancy.

    ``views`` is a sequence of ``(View, DepthNormalMaps)`` pairs. Views with
    no unmasked pixel are skipped with a warning.
    """
    if blur_sigma < 0:
        raise ConfigError("blur_sigma must be >= 0")
    brdf = params.to_brdf() if isinstance(params, BrdfParams) else params
    total = 0.0
    used = 0
    for view, maps in views:
        rendered, mask = render_geometry(view, maps, env, brdf, snap, cone_deg, n_samples)
        if not mask.any():
            warnings.warn(f"view {view.name!r} has no unmasked pixels; skipped")
            continue
        bI = _masked_blur(view.image, mask, blur_sigma)[mask]
        bR = _masked_blur(rendered, mask, blur_sigma)[mask]
        total += float(np.mean(np.sum(_log_discrepancy(bI, bR), axis=-1)))
        used += 1
    if used == 0:
        raise ConfigError("no view has unmasked pixels")
    return total


class _SplitObjective:
    """The unsnapped objective for fixed geometry, exploiting linearity.

    Blurring is linear and ``E = diffuse * P + specular * A(a) + B(a)``, so
    the blurred basis images are computed once (``P``) or once per roughness
    (``A``, ``B``) and each channel's colour parameters can be searched on
    their own.
    """

    def __init__(self, views, env, blur_sigma):
        if blur_sigma < 0:
            raise ConfigError("blur_sigma must be >= 0")
        self.env, self.blur_sigma = env, blur_sigma
        self.geo = []
        for view, maps in views:
            mask, n_world = _view_normals(view, maps)
            if not mask.any():
                warnings.warn(f"view {view.name!r} has no unmasked pixels; skipped")
                continue
            self.geo.append((view, mask, n_world, _masked_blur(view.image, mask, blur_sigma)[mask]))
        if not self.geo:
            raise ConfigError("no view has unmasked pixels")
        self.P = [self._blur(g, render_terms(env, None, g[2], -g[0].camera.optical_axis)[0]) for g in self.geo]
        self.renders = 1
        self._spec = {}

    def _blur(self, g, values):
        view, mask = g[0], g[1]
        img = np.zeros(view.image.shape)
        img[mask] = values
        return _masked_blur(img, mask, self.blur_sigma)[mask]

    def spec(self, roughness):
        if roughness not in self._spec:
            AB = []
            for g in self.geo:
                _, A, B = render_terms(self.env, roughness, g[2], -g[0].camera.optical_axis)
                AB.append((self._blur(g, A), self._blur(g, B)))
            self._spec = {roughness: AB}
            self.renders += 1
        return self._spec[roughness]

    def channel(self, k, kd, ks=0.0, roughness=None):
        total = 0.0
        AB = self.spec(roughness) if roughness is not None else None
        for i, g in enumerate(self.geo):
            bR = kd * self.P[i][:, k]
            if AB is not None:
                bR = bR + ks * AB[i][0][:, k] + AB[i][1][:, k]
            bI = g[3]
            floor = 1e-6 * bI.max()
            total += float(np.mean(np.abs(np.log(np.maximum(bI[:, k], floor) / np.maximum(bR, floor)))))
        return total


@dataclass
class FitResult:
    params: BrdfParams
    objective: float
    evaluations: int


class _Budget(Exception):
    pass


def simplex_search(fun, x0, lo, hi, maxfev, scale=0.15, tol=1e-6):
    """Bounded Nelder-Mead, restarted with a halved simplex while restarts keep paying off.

    Returns ``(x_best, f_best, nfev)``; ``x0`` is always evaluated first, so
    the result is never worse than the starting point.
    """
    x0 = np.clip(np.asarray(x0, dtype=np.float64), lo, hi)
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    count = [0]
    best = {"x": x0.copy(), "f": np.inf}

    def f(x):
        if count[0] >= maxfev:
            raise _Budget
        count[0] += 1
        x = np.clip(x, lo, hi)
        val = fun(x)
        if val < best["f"]:
            best["f"], best["x"] = val, x.copy()
        return val

    try:
        f(x0)
        prev = best["f"]
        while count[0] < maxfev:
            xb = best["x"]
            simplex = [xb]
            for i in range(len(xb)):
                step = np.zeros_like(xb)
                span = scale * (hi[i] - lo[i])
                step[i] = span if xb[i] + span <= hi[i] else -span
                simplex.append(np.clip(xb + step, lo, hi))
            minimize(f, xb, method="Nelder-Mead", bounds=list(zip(lo, hi)),
                     options={"initial_simplex": np.array(simplex), "maxfev": maxfev - count[0],
                              "xatol": 1e-6, "fatol": tol * max(abs(best["f"]), 1e-12)})
            if prev - best["f"] <= tol * max(abs(prev), 1e-12):
                break
            prev = best["f"]
            scale *= 0.5
    except _Budget:
        pass
    return best["x"], best["f"], count[0]


def _fit_colors(model, kind, x, roughness, inner_budget):
    """Per-channel colour search for fixed roughness; returns (values, objective)."""
    x = np.array(x, dtype=np.float64)
    lo, hi = _BOUNDS[kind]
    total = 0.0
    for k in range(3):
        if kind == "lambertian":
            xk, fk, _ = simplex_search(lambda v: model.channel(k, v[0]), [x[k]], [lo[k]], [hi[k]], inner_budget)
            x[k] = xk[0]
        else:
            fun = lambda v: model.channel(k, v[0], v[1], roughness)  # noqa: E731
            xk, fk, _ = simplex_search(fun, [x[k], x[3 + k]], [lo[k], lo[3 + k]], [hi[k], hi[3 + k]],
                                       inner_budget)
            x[k], x[3 + k] = xk
        total += fk
    return x, total


def _split_fit(init, views, env, budget, blur_sigma, inner_budget):
    """Search over the unsnapped objective; ``budget`` counts full renders."""
    model = _SplitObjective(views, env, blur_sigma)
    if init.kind == "lambertian":
        x, _ = _fit_colors(model, "lambertian", init.values, None, inner_budget)
        return BrdfParams(init.kind, x), model.renders
    incumbent = {"x": init.values.copy(), "f": np.inf}
    lo, hi = init.bounds

    def profile(t):
        # roughness searched in log space; colours re-fitted from the incumbent
        x = incumbent["x"].copy()
        x[6] = float(np.exp(t[0]))
        x, val = _fit_colors(model, "microfacet", x, x[6], inner_budget)
        if val < incumbent["f"]:
            incumbent.update(x=x, f=val)
        return val

    t0 = np.log(np.clip(init.values[6], lo[6], hi[6]))
    simplex_search(profile, [t0], [np.log(lo[6])], [np.log(hi[6])], max(budget - 1, 1), scale=0.25, tol=1e-5)
    return BrdfParams(init.kind, incumbent["x"]), model.renders


def fit_reflectance(init, views, env, budget=40, blur_sigma=4.0, snap=False, cone_deg=15.0, n_samples=64,
                    inner_budget=200):
    """Bounded simplex search for BRDF parameters with geometry fixed.

    ``budget`` bounds the number of full re-renderings. Without snapping the
    colour parameters are searched per channel on precomputed basis images
    and only the roughness needs new renders. With snapping the unsnapped
    result serves as a warm start for a joint search of the snapped
    objective. The result is never worse than ``init``.
    """
    budget = check_int(budget, "budget", 0)
    if budget == 0:
        return FitResult(init, np.nan, 0)
    f_init = reflectance_objective(init, views, env, blur_sigma, snap, cone_deg, n_samples)
    best, f_best, used = init, f_init, 1
    if used < budget:
        cand, renders = _split_fit(init, views, env, budget - used if not snap else max((budget - used) // 2, 1),
                                   blur_sigma, inner_budget)
        used += renders + 1
        f_cand = reflectance_objective(cand, views, env, blur_sigma, snap, cone_deg, n_samples)
        if f_cand < f_best:
            best, f_best = cand, f_cand
    if snap and used < budget:
        lo, hi = init.bounds
        fun = lambda x: reflectance_objective(BrdfParams(init.kind, x), views, env, blur_sigma, True,  # noqa: E731
                                              cone_deg, n_samples)
        x, f, n = simplex_search(fun, best.values, lo, hi, budget - used, scale=0.05)
        used += n
        if f < f_best:
            best, f_best = BrdfParams(init.kind, x), f
    log.debug("fit_reflectance: %d renders, objective %.6g", used, f_best)
    return FitResult(best, f_best, used)


def initial_albedo(views, env):
    """Albedo guess: median masked radiance over median environment radiance."""
    pix = np.concatenate([v.image[v.mask] for v in views], axis=0)
    med_env = np.median(env.radiance.reshape(-1, 3), axis=0)
    return np.clip(np.median(pix, axis=0) / np.maximum(med_env, 1e-12), 1e-3, 1.0)


@dataclass
class AlternationState:
    iteration: int
    params: BrdfParams
    maps: list
    history: list = field(default_factory=list)  # (round, phase, objective)
    best_round: int = 0


def alternate(views, env, rounds=3, geometry_fn=None, family="microfacet", budget=40, blur_sigma=4.0,
              snap=True, cone_deg=15.0, frozen_maps=None, init=None):
    """Alternate geometry estimation and reflectance fitting.

    ``geometry_fn(brdf) -> list[DepthNormalMaps]`` re-estimates per-view
    geometry for the current BRDF; ``frozen_maps`` skips that step. Stops
    early when the objective rises for two consecutive rounds and returns
    the best round.
    """
    rounds = check_int(rounds, "rounds", 1)
    if geometry_fn is None and frozen_maps is None:
        raise ConfigError("alternate needs geometry_fn or frozen_maps")
    if init is None:
        init = BrdfParams("lambertian", initial_albedo(views, env))
    params = init
    state = AlternationState(0, params, None)
    best = (np.inf, params, None, 0)
    rises = 0
    last = np.inf
    for r in range(1, rounds + 1):
        maps = frozen_maps if frozen_maps is not None else geometry_fn(params.to_brdf())
        pairs = list(zip(views, maps))
        start = params.as_family(family)
        res = fit_reflectance(start, pairs, env, budget, blur_sigma, snap, cone_deg)
        params = res.params
        state.iteration, state.params, state.maps = r, params, maps
        state.history.append((r, "reflectance", res.objective))
        log.info("round %d: objective %.6g", r, res.objective)
        if res.objective < best[0]:
            best = (res.objective, params, maps, r)
        rises = rises + 1 if res.objective > last else 0
        last = res.objective
        if rises >= 2:
            log.warning("objective rose for two consecutive rounds; stopping at round %d", r)
            break
    state.params, state.maps, state.best_round = best[1], best[2], best[3]
    return state


class ReflectanceEstimator(BaseEstimator):
    """``fit(views_with_maps)`` estimates ``params_`` with geometry held fixed."""

    def __init__(self, env=None, family="microfacet", budget=40, blur_sigma=4.0, snap=False, cone_deg=15.0,
                 init=None):
        self.env = env
        self.family = family
        self.budget = budget
        self.blur_sigma = blur_sigma
        self.snap = snap
        self.cone_deg = cone_deg
        self.init = init

    def fit(self, X, y=None):
        if self.env is None:
            raise ConfigError("ReflectanceEstimator needs env")
        X = list(X)
        init = self.init
        if init is None:
            init = BrdfParams("lambertian", initial_albedo([v for v, _ in X], self.env))
        res = fit_reflectance(init.as_family(self.family), X, self.env, self.budget, self.blur_sigma, self.snap,
                              self.cone_deg)
        self.params_ = res.params
        self.objective_ = res.objective
        self.n_evaluations_ = res.evaluations
        return self

    def predict(self, X):
        """Re-rendered images of ``(View, DepthNormalMaps)`` pairs under ``params_``."""
        brdf = self.params_.to_brdf()
        return [render_geometry(v, m, self.env, brdf, self.snap, self.cone_deg)[0] for v, m in X]
