import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from radmvs.exceptions import ConfigError
from radmvs.radiometry import (Camera, EnvironmentMap, Lambertian, Microfacet, Plane, Scene, Sphere, eval_brdf,
                               render_irradiance, render_view, synthetic_sky)


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def test_solid_angles_sum_to_sphere():
    env = EnvironmentMap.constant(1.0, 64, 32)
    assert env.solid_angles.sum() == pytest.approx(4 * np.pi, rel=1e-3)
    th = (np.arange(32) + 0.5) * np.pi / 32
    np.testing.assert_allclose(env.solid_angles[:, 0], np.sin(th) * (2 * np.pi / 64) * (np.pi / 32))


def test_lambertian_value():
    n = np.array([0.0, 0.0, 1.0])
    wi, wo = unit([0.3, 0.1, 0.8]), unit([-0.2, 0.4, 0.7])
    np.testing.assert_allclose(eval_brdf(Lambertian(0.5), wi, wo, n), np.full(3, 0.5 / np.pi))


@pytest.mark.parametrize("brdf", [Lambertian(0.7), Microfacet(0.2, 0.5, 0.3)])
def test_below_horizon_is_zero(brdf):
    n = np.array([0.0, 0.0, 1.0])
    wi = unit([np.sqrt(1 - 0.09), 0.0, -0.3])
    np.testing.assert_array_equal(eval_brdf(brdf, wi, unit([0, 0.2, 1]), n), 0.0)
    np.testing.assert_array_equal(eval_brdf(brdf, unit([0, 0.2, 1]), wi, n), 0.0)


def microfacet_oracle(kd, ks, a, wi, wo, n):
    """Scalar re-statement of the GGX / Smith / Schlick lobe."""
    h = (wi + wo) / np.linalg.norm(wi + wo)
    ci, co, ch, cd = wi @ n, wo @ n, h @ n, wi @ h
    D = a * a / (np.pi * (ch * ch * (a * a - 1) + 1) ** 2)

    def g1(c):
        return 2 * c / (c + np.sqrt(a * a + (1 - a * a) * c * c))

    F = ks + (1 - ks) * (1 - cd) ** 5
    return kd / np.pi + F * D * g1(ci) * g1(co) / (4 * ci * co)


def test_microfacet_normal_incidence_oracle():
    n = np.array([0.0, 0.0, 1.0])
    kd, ks, a = 0.2, 0.35, 0.3
    got = eval_brdf(Microfacet(kd, ks, a), n, n, n)
    # at wi = wo = n the lobe collapses to kd/pi + ks / (4 pi a^2)
    np.testing.assert_allclose(got, kd / np.pi + ks / (4 * np.pi * a * a), rtol=1e-12)


def test_microfacet_matches_scalar_oracle():
    rng = np.random.default_rng(3)
    n = unit([0.1, -0.2, 1.0])
    b = Microfacet((0.1, 0.2, 0.3), (0.4, 0.5, 0.6), 0.35)
    for _ in range(20):
        wi, wo = unit(n + rng.normal(size=3) * 0.5), unit(n + rng.normal(size=3) * 0.5)
        if wi @ n <= 0 or wo @ n <= 0:
            continue
        ref = [microfacet_oracle(b.diffuse[k], b.specular[k], b.roughness, wi, wo, n) for k in range(3)]
        np.testing.assert_allclose(eval_brdf(b, wi, wo, n), ref, rtol=1e-10)


def test_microfacet_reciprocity():
    rng = np.random.default_rng(0)
    b = Microfacet(0.1, 0.4, 0.2)
    n = np.array([0.0, 0.0, 1.0])
    wi = rng.normal(size=(100, 3)); wi[:, 2] = np.abs(wi[:, 2]); wi /= np.linalg.norm(wi, axis=1, keepdims=True)
    wo = rng.normal(size=(100, 3)); wo[:, 2] = np.abs(wo[:, 2]); wo /= np.linalg.norm(wo, axis=1, keepdims=True)
    np.testing.assert_allclose(eval_brdf(b, wi, wo, n), eval_brdf(b, wo, wi, n), rtol=1e-12)


def test_roughness_bounds():
    with pytest.raises(ConfigError):
        Microfacet(0.1, 0.1, 0.0)
    with pytest.raises(ConfigError):
        Microfacet(0.1, 0.1, 1.5)


def test_constant_env_lambertian_equals_albedo():
    env = EnvironmentMap.constant(1.0, 64, 32)
    a = np.array([0.2, 0.5, 0.9])
    for n in [unit([0, 0, 1]), unit([1, 1, 0]), unit([0.3, -0.5, -0.8])]:
        np.testing.assert_allclose(render_irradiance(env, Lambertian(a), n, n), a, rtol=5e-3)


def test_zero_env_renders_zero():
    env = EnvironmentMap(np.zeros((16, 32, 3)))
    assert np.all(render_irradiance(env, Microfacet(0.3, 0.3, 0.3), unit([0, 0, 1]), unit([0, 1, 1])) == 0)


def delta_env(W, H, theta, phi, power=1.0):
    """Env with a single lit texel containing (theta, phi); total power is resolution independent."""
    rad = np.zeros((H, W, 3))
    r = min(int(theta / np.pi * H), H - 1)
    c = min(int((phi + np.pi) / (2 * np.pi) * W), W - 1)
    probe = EnvironmentMap(rad.copy())
    rad[r, c] = power / probe.solid_angles[r, c]
    return EnvironmentMap(rad), probe.directions[r, c]


def test_single_texel_matches_refined_quadrature():
    a = 0.6
    n = unit([0.2, 0.1, 1.0])
    env, d = delta_env(64, 32, 0.5, 0.3)
    got = render_irradiance(env, Lambertian(a), n, n)
    np.testing.assert_allclose(got, a / np.pi * max(0.0, d @ n), rtol=1e-9)
    # the same lit patch integrated on a 4x finer grid of texels
    fine = EnvironmentMap(np.repeat(np.repeat(env.radiance, 4, axis=0), 4, axis=1))
    ref = render_irradiance(fine, Lambertian(a), n, n)
    np.testing.assert_allclose(got, ref, rtol=1e-2)


def test_linearity_in_environment():
    env = synthetic_sky(32, 16)
    b = Microfacet(0.2, 0.3, 0.25)
    n, wo = unit([0.2, 0.3, 0.9]), unit([0, 0.3, 1])
    e1 = render_irradiance(env, b, n, wo)
    np.testing.assert_array_equal(render_irradiance(env.scaled(4.0), b, n, wo), 4.0 * e1)


def test_white_furnace_bound():
    env = EnvironmentMap.constant(2.0, 64, 32)
    rng = np.random.default_rng(1)
    n = rng.normal(size=(200, 3)); n /= np.linalg.norm(n, axis=1, keepdims=True)
    E = render_irradiance(env, Lambertian(1.0), n, n)
    assert np.all(E <= 2.0 * 1.005)


def test_frame_rotation_invariance():
    env = synthetic_sky(64, 32, seed=2)
    b = Microfacet((0.2, 0.15, 0.1), (0.3, 0.3, 0.3), 0.3)
    R = Rotation.from_euler("xyz", [20, -35, 50], degrees=True).as_matrix()
    rng = np.random.default_rng(5)
    n = rng.normal(size=(50, 3)); n /= np.linalg.norm(n, axis=1, keepdims=True)
    wo = unit([0.3, -0.2, 1.0])
    n = np.where((n @ wo)[:, None] < 0, -n, n)
    E = render_irradiance(env, b, n, wo)
    E2 = render_irradiance(env.rotated(R), b, n @ R.T, R @ wo)
    rel = np.abs(E2 - E) / np.maximum(E, 1e-3)
    assert np.median(rel) < 0.01


def test_quadrature_converges_on_smooth_env():
    def fn(d):
        return np.stack([1 + 0.5 * d[..., 2], 1 + 0.3 * d[..., 0], 1.2 - 0.4 * d[..., 1] ** 2], axis=-1)

    n = unit([0.3, 0.4, 0.8])
    b = Lambertian(0.5)
    vals = [render_irradiance(EnvironmentMap.from_function(fn, 16 * 2 ** k, 8 * 2 ** k), b, n, n) for k in range(5)]
    diffs = [np.abs(vals[k + 1] - vals[k]).max() for k in range(4)]
    assert all(diffs[k + 1] < diffs[k] for k in range(3))


def test_rendered_sphere_lambertian_constant():
    env = EnvironmentMap.constant(1.0, 64, 32)
    cam = Camera.look_at([0, -4, 0], [0, 0, 0], [0, 0, 1], 60, 48, 48)
    r = render_view(Scene(Sphere(), Lambertian(0.4)), cam, env)
    np.testing.assert_allclose(r.image[r.mask], 0.4, rtol=5e-3)


def test_rendered_sphere_normals_and_depth():
    cam = Camera.look_at([0.0, -5.0, 0.3], [0, 0, 0], [0, 0, 1], 400, 256, 256)
    r = render_view(Scene(Sphere([0, 0, 0], 1.0), Lambertian(0.5)), cam, EnvironmentMap.constant(1.0, 16, 8))
    v, u = np.nonzero(r.mask)
    X = cam.backproject(r.depth[v, u], u.astype(float), v.astype(float))
    analytic = X / np.linalg.norm(X, axis=1, keepdims=True)
    ang = np.degrees(np.arccos(np.clip(np.sum(analytic * r.normal[v, u], axis=1), -1, 1)))
    assert ang.max() < 0.5
    # pixel that looks straight at the centre
    uc, vc, _ = cam.project(np.zeros(3))
    ray = cam.rays_camera(np.array(uc), np.array(vc))
    t_hit = np.linalg.norm(cam.center) - 1.0
    np.testing.assert_allclose(t_hit / np.linalg.norm(ray), cam.center @ -cam.optical_axis - 1.0, atol=1e-9)
    # at the integer pixel nearest the projected centre, depth is within 1e-3 of the analytic value
    ui, vi = int(round(float(uc))), int(round(float(vc)))
    Xp = cam.backproject(r.depth[vi, ui], np.array(float(ui)), np.array(float(vi)))
    assert abs(np.linalg.norm(Xp) - 1.0) < 1e-9
    assert abs(r.depth[vi, ui] - (np.linalg.norm(cam.center) - 1.0)) < 1e-3


def test_plane_render_constant_normal():
    cam = Camera.look_at([0, 0, 3], [0, 0, 0], [0, 1, 0], 50, 32, 32)
    r = render_view(Scene(Plane([0, 0, 0], [0, 0, 1], [1, 0, 0], 5.0), Lambertian(0.5)), cam,
                    EnvironmentMap.constant(1.0, 16, 8))
    assert r.mask.all()
    np.testing.assert_allclose(r.normal[r.mask], np.tile([0.0, 0.0, 1.0], (r.mask.sum(), 1)), atol=1e-12)
    np.testing.assert_allclose(r.depth, 3.0, atol=1e-12)


def test_camera_rotation_validated():
    with pytest.raises(ConfigError):
        Camera(np.eye(3) * 10, np.diag([1.0, 1.0, -1.0]), np.zeros(3), 8, 8)


def test_camera_project_backproject_roundtrip():
    cam = Camera.look_at([1, -3, 2], [0, 0, 0], [0, 0, 1], 80, 64, 48)
    u, v = cam.pixel_grid()
    X = cam.backproject(np.full(u.shape, 3.5), u, v)
    u2, v2, z = cam.project(X)
    np.testing.assert_allclose(u2, u, atol=1e-9)
    np.testing.assert_allclose(v2, v, atol=1e-9)
    np.testing.assert_allclose(z, 3.5, atol=1e-12)
