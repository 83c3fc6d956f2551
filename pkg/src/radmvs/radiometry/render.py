"""Direct-lighting image formation.

Pixel value = integral over the sphere of ``L(wi) rho(wi, wo, n) max(0, wi.n)``,
evaluated by summing over every environment texel with its solid-angle
weight. No visibility term: shadows and interreflections are ignored.
"""

from dataclasses import dataclass

import numpy as np

from ..parallel import chunk_slices, pmap
from .brdf import Lambertian, Microfacet

_NORMAL_CHUNK = 2048


def render_irradiance(env, brdf, n, wo):
    """Irradiance ``E(wo, n)`` for one normal (3,) or many normals (N, 3).

    ``wo`` is either a single direction or one direction per normal.
    """
    n = np.asarray(n, dtype=np.float64)
    single = n.ndim == 1
    normals = np.atleast_2d(n)
    wo = np.asarray(wo, dtype=np.float64)
    per_normal = wo.ndim == 2
    dirs, weighted = env.texels
    out = np.zeros((len(normals), 3))
    if len(dirs) == 0 or len(normals) == 0:
        return out[0] if single else out

    def work(sl):
        o = wo[sl] if per_normal else wo
        return brdf.shade(normals[sl], o, dirs, weighted)

    slices = chunk_slices(len(normals), _NORMAL_CHUNK)
    for sl, res in zip(slices, pmap(work, slices)):
        out[sl] = res
    return out[0] if single else out


def render_terms(env, roughness, n, wo):
    """Basis images ``(P, A, B)`` with ``E = diffuse * P + specular * A + B`` for a microfacet BRDF.

    ``wo`` must be a single direction. ``roughness=None`` returns only ``P``
    (the Lambertian basis, ``E = albedo * P``) with ``A = B = None``.
    """
    normals = np.atleast_2d(np.asarray(n, dtype=np.float64))
    wo = np.asarray(wo, dtype=np.float64)
    dirs, weighted = env.texels
    lobe = Microfacet(0.0, 0.0, 1.0 if roughness is None else roughness)
    terms = np.zeros((3, len(normals), 3))
    if len(dirs) and len(normals):
        slices = chunk_slices(len(normals), _NORMAL_CHUNK)
        for sl, res in zip(slices, pmap(lambda sl: lobe.shade_terms(normals[sl], wo, dirs, weighted), slices)):
            terms[:, sl] = res
    if roughness is None:
        return terms[0], None, None
    return terms[0], terms[1], terms[2]


@dataclass(frozen=True, eq=False)
class Scene:
    """Object geometry plus homogeneous BRDF.

    ``albedo_texture`` optionally maps world points (N, 3) -> RGB albedo and
    turns the surface into a spatially varying Lambertian (used only for
    textured-plane sanity scenes).
    """

    shape: object
    brdf: object
    albedo_texture: object = None


@dataclass(frozen=True, eq=False)
class RenderResult:
    image: np.ndarray   # (H, W, 3) linear radiance
    depth: np.ndarray   # (H, W) distance along the optical axis, 0 where masked
    normal: np.ndarray  # (H, W, 3) world-frame normals, 0 where masked
    mask: np.ndarray    # (H, W) bool

    def maps(self, cam):
        """Ground-truth ``DepthNormalMaps`` with normals in ``cam``'s frame."""
        from ..views import DepthNormalMaps
        return DepthNormalMaps(self.depth.copy(), self.normal @ cam.R.T, self.mask.copy())


def render_view(scene, cam, env, perspective_shading=False):
    """Ray-cast ``scene`` from ``cam`` and shade every hit with ``render_irradiance``.

    With ``perspective_shading=False`` (the default) every pixel is shaded
    with the same view direction, the reverse optical axis (distant camera).
    """
    H, W = cam.height, cam.width
    rays_c = cam.rays_camera().reshape(-1, 3)
    dirs = rays_c @ cam.R
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(cam.center, dirs.shape).copy()
    t, normals = scene.shape.intersect(origins, dirs)
    mask = np.isfinite(t)
    points = origins + np.where(mask, t, 0.0)[:, None] * dirs
    # outward normals must face the camera for a valid observation
    normals = np.where((np.sum(normals * dirs, axis=1) > 0)[:, None], -normals, normals)

    image = np.zeros((H * W, 3))
    idx = np.flatnonzero(mask)
    if idx.size:
        wo = -dirs[idx] if perspective_shading else -cam.optical_axis
        if scene.albedo_texture is not None:
            white = Lambertian((1.0, 1.0, 1.0))
            shading = render_irradiance(env, white, normals[idx], wo)
            image[idx] = shading * np.asarray(scene.albedo_texture(points[idx]))
        else:
            image[idx] = render_irradiance(env, scene.brdf, normals[idx], wo)
    depth = np.where(mask, cam.world_to_camera(points)[:, 2], 0.0)
    normal_map = np.where(mask[:, None], normals, 0.0)
    return RenderResult(image.reshape(H, W, 3), depth.reshape(H, W), normal_map.reshape(H, W, 3),
                        mask.reshape(H, W))
