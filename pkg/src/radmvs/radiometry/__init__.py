"""BRDFs, illumination, cameras and the forward image-formation model."""

from .brdf import Brdf, Lambertian, MerlTabulated, Microfacet, brdf_from_params, half_diff_angles
from .camera import Camera, VIEWER_FLIP
from .envmap import EnvironmentMap, synthetic_sky
from .render import RenderResult, Scene, render_irradiance, render_terms, render_view
from .shapes import Plane, Sphere, TriangleMesh, superellipsoid, uv_sphere


def eval_brdf(brdf, wi, wo, n):
    return brdf.evaluate(wi, wo, n)


__all__ = [
    "Brdf", "Lambertian", "Microfacet", "MerlTabulated", "brdf_from_params", "half_diff_angles",
    "Camera", "VIEWER_FLIP", "EnvironmentMap", "synthetic_sky", "RenderResult", "Scene",
    "render_irradiance", "render_terms", "render_view", "eval_brdf", "Plane", "Sphere", "TriangleMesh",
    "superellipsoid", "uv_sphere",
]
