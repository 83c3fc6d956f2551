import numpy as np
import pytest

from radmvs.exceptions import ConfigError
from radmvs.radiometry import (EnvironmentMap, Lambertian, Microfacet, Scene, Sphere, render_irradiance, render_view,
                               synthetic_sky)
from radmvs.sfs import (HemiGrid, NormalSampleSet, ShapeFromShading, aggregate_density, build_lattices,
                        coarse_to_fine_search, dense_search, normal_likelihood, normal_log_likelihood)
from radmvs.views import View

from conftest import arc_cameras


def angles_deg(a, b):
    return np.degrees(np.arccos(np.clip(np.sum(a * b, axis=-1), -1, 1)))


@pytest.fixture(scope="module")
def glossy_view(sky, glossy):
    cam = arc_cameras(1, 48)[0]
    r = render_view(Scene(Sphere(), glossy), cam, sky)
    gt_viewer = r.normal @ cam.to_viewer.T
    return View(r.image, cam, r.mask), gt_viewer


@pytest.fixture(scope="module")
def glossy_samples(glossy_view, sky, glossy):
    view, _ = glossy_view
    lat = build_lattices(sky, glossy, view.camera, 3)
    s = coarse_to_fine_search(view.image, view.mask, sky, glossy, view.camera, levels=3, lattices=lat)
    return s, lat


def test_hemigrid_shapes_and_active_cells():
    g = HemiGrid(0)
    assert g.resolution == 8
    d = g.directions()[g.active()]
    assert np.all(d[:, 2] > 0)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0)
    assert HemiGrid(3).resolution == 64
    with pytest.raises(ConfigError):
        HemiGrid(-1)


def test_likelihood_zero_residual(sky):
    b = Lambertian((0.5, 0.4, 0.3))
    n = np.array([0.2, -0.3, 0.93]); n /= np.linalg.norm(n)
    wo = np.array([0.0, 0.0, 1.0])
    E = render_irradiance(sky, b, n, wo)
    for scale in (0.05, 0.1, 0.3):
        assert normal_likelihood(E, sky, b, wo, n, b=scale) == pytest.approx((1 / (2 * scale)) ** 3, rel=1e-12)


def test_likelihood_one_scale_unit(sky):
    b = Lambertian((0.5, 0.4, 0.3))
    n = np.array([0.0, 0.0, 1.0])
    wo = n
    E = render_irradiance(sky, b, n, wo)
    lap = 0.1
    I = E * np.exp(lap * np.array([1.0, -1.0, 1.0]))
    expected = (1 / (2 * lap)) ** 3 * np.exp(-3.0)
    assert normal_likelihood(I, sky, b, wo, n, b=lap) == pytest.approx(expected, rel=1e-10)


def test_likelihood_rejects_nonpositive_pixel(sky):
    with pytest.raises(ConfigError):
        normal_likelihood([0.1, 0.0, 0.2], sky, Lambertian(0.5), [0, 0, 1.0], [0, 0, 1.0])


def three_lobe_env():
    # one colour lobe per channel from well separated directions keeps the three channels independent
    def fn(d):
        out = np.full(d.shape[:-1] + (3,), 0.05)
        for k, ax in enumerate(([1, 0, 0.3], [0, 1, 0.3], [-0.5, -0.5, 1])):
            ax = np.asarray(ax) / np.linalg.norm(ax)
            out[..., k] += 2 * np.exp(3 * (d @ ax - 1))
        return out

    return EnvironmentMap.from_function(fn, 64, 32)


def test_likelihood_dense_grid_peak_near_true_normal():
    env = three_lobe_env()
    brdf = Lambertian((0.6, 0.5, 0.4))
    cam = arc_cameras(1, 32)[0]
    r = render_view(Scene(Sphere(), brdf), cam, env)
    wo = -cam.optical_axis
    grid = HemiGrid(3)
    act = grid.active()
    dirs_v = grid.directions()[act]
    dirs_w = dirs_v @ cam.to_viewer
    ys, xs = np.nonzero(r.mask)
    pick = np.random.default_rng(0).choice(len(ys), 40, replace=False)
    E_all = render_irradiance(env, brdf, dirs_w, wo)
    cell_ids = np.flatnonzero(act.ravel())
    for i in pick:
        I = r.image[ys[i], xs[i]]
        ll = normal_log_likelihood(I, E_all, 0.1)
        best = cell_ids[np.argmax(ll)]
        true_v = cam.to_viewer @ r.normal[ys[i], xs[i]]
        true = grid.cell_of(true_v)
        R = grid.resolution
        assert abs(best // R - true // R) <= 1 and abs(best % R - true % R) <= 1


def test_single_level_matches_exhaustive_8x8(glossy_view, sky, glossy):
    view, _ = glossy_view
    cam = view.camera
    s = coarse_to_fine_search(view.image, view.mask, sky, glossy, cam, levels=1)
    grid = HemiGrid(0)
    cells = np.flatnonzero(grid.active().ravel())
    assert s.loglik.shape[-1] == len(cells)
    # independent oracle: render every 4x4 sub-sample of every active cell, keep each cell's best
    L = 32
    c = -1 + (np.arange(L) + 0.5) * 2 / L
    ny, nx = np.meshgrid(c, c, indexing="ij")
    ok = nx ** 2 + ny ** 2 < 1
    nz = np.sqrt(np.clip(1 - nx ** 2 - ny ** 2, 0, None))
    dv = np.stack([nx, ny, nz], -1)
    E = np.full((L, L, 3), np.nan)
    E[ok] = render_irradiance(sky, glossy, dv[ok] @ cam.to_viewer, -cam.optical_axis)
    ys, xs = np.nonzero(view.mask)
    floor = np.log(1e-6 * view.image[view.mask].max())
    for y, x in list(zip(ys, xs))[::97]:
        I = view.image[y, x]
        for j, cell in enumerate(cells):
            cy, cx = divmod(cell, 8)
            blockE = E[cy * 4:cy * 4 + 4, cx * 4:cx * 4 + 4].reshape(-1, 3)
            blockok = ok[cy * 4:cy * 4 + 4, cx * 4:cx * 4 + 4].ravel()
            ll = normal_log_likelihood(I, np.where(blockok[:, None], blockE, 1.0), 0.1, floor)
            ll = np.where(blockok, ll, -np.inf)
            assert s.loglik[y, x, j] == pytest.approx(ll.max(), rel=1e-12, abs=1e-9)
            assert s.cells[y, x, j] == cell


def test_coarse_to_fine_matches_dense_argmax(glossy_samples, glossy_view):
    s, lat = glossy_samples
    view, _ = glossy_view
    dense_cell, dense_n = dense_search(view.image, view.mask, lat[-1])
    k = np.argmax(s.loglik, axis=-1)
    c2f_cell = np.take_along_axis(s.cells, k[..., None], axis=-1)[..., 0]
    c2f_n = np.take_along_axis(s.dirs, k[..., None, None], axis=-2)[..., 0, :]
    m = view.mask
    assert np.mean(c2f_cell[m] == dense_cell[m]) >= 0.95
    diag = HemiGrid(s.level).cell_diagonal_deg()
    assert np.mean(angles_deg(c2f_n[m], dense_n[m]) <= diag + 1e-9) >= 0.95


def test_sample_set_invariants(glossy_samples):
    s, _ = glossy_samples
    m = s.mask
    valid = s.cells >= 0
    d = s.dirs[m][valid[m]]
    np.testing.assert_allclose(np.linalg.norm(d, axis=-1), 1.0, atol=1e-12)
    assert np.all(d[:, 2] > 0)
    lik = s.likelihood[m]
    assert np.all(np.isfinite(lik)) and np.all(lik >= 0)
    np.testing.assert_allclose(s.probabilities()[m].sum(axis=-1), 1.0, atol=1e-6)


def test_constant_env_lambertian_ridge():
    env = EnvironmentMap.constant((0.7, 0.6, 0.5), 32, 16)
    brdf = Lambertian(0.5)
    cam = arc_cameras(1, 16)[0]
    r = render_view(Scene(Sphere(), brdf), cam, env)
    top_k = 16
    s = coarse_to_fine_search(r.image, r.mask, env, brdf, cam, levels=2, top_k=top_k)
    m = s.mask
    lik = s.likelihood[m]
    near = lik >= 0.99 * lik.max(axis=1, keepdims=True)
    assert np.all(near.sum(axis=1) >= top_k)


def test_b_sweep_leaves_argmax_unchanged(glossy_view, sky, glossy):
    view, _ = glossy_view
    lat = build_lattices(sky, glossy, view.camera, 2)
    args = []
    for b in (0.05, 0.1, 0.3):
        s = coarse_to_fine_search(view.image, view.mask, sky, glossy, view.camera, levels=2, b=b, lattices=lat)
        k = np.argmax(s.loglik, axis=-1)
        args.append(np.take_along_axis(s.cells, k[..., None], axis=-1)[..., 0])
    assert np.array_equal(args[0], args[1]) and np.array_equal(args[1], args[2])


def test_all_zero_likelihood_is_degenerate_and_uniform():
    env = EnvironmentMap.constant(0.0, 16, 8)
    cam = arc_cameras(1, 8)[0]
    img = np.full((8, 8, 3), 0.3)
    mask = np.zeros((8, 8), dtype=bool)
    mask[3:5, 3:5] = True
    s = coarse_to_fine_search(img, mask, env, Lambertian(0.5), cam, levels=2, log_floor=-np.inf)
    assert np.array_equal(s.degenerate, mask)
    p = s.probabilities()[mask]
    valid = s.cells[mask] >= 0
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    for row, v in zip(p, valid):
        np.testing.assert_allclose(row[v], 1.0 / v.sum())


def test_aggregation_zero_iters_is_likelihood(glossy_samples, glossy_view):
    s, _ = glossy_samples
    view, _ = glossy_view
    f = aggregate_density(s, view.image, iters=0)
    np.testing.assert_array_equal(f.prob, s.probabilities())


def two_pixel_samples(loglik):
    grid = HemiGrid(0)
    cells = np.flatnonzero(grid.active().ravel())
    dirs = grid.directions().reshape(-1, 3)[cells]
    S = len(cells)
    return NormalSampleSet(np.broadcast_to(dirs, (1, 2, S, 3)).copy(), np.broadcast_to(cells, (1, 2, S)).copy(),
                           np.broadcast_to(loglik, (1, 2, S)).copy(), np.ones((1, 2), dtype=bool), 0,
                           np.zeros((1, 2), dtype=bool))


def test_aggregation_two_pixel_closed_form():
    rng = np.random.default_rng(3)
    S = int(HemiGrid(0).active().sum())
    ll = rng.normal(size=S)
    s = two_pixel_samples(ll)
    image = np.full((1, 2, 3), 0.4)
    p = np.exp(ll - ll.max()); p /= p.sum()
    for iters in (1, 2, 3):
        f = aggregate_density(s, image, iters=iters, radius=1, blur_cells=0)
        # each pixel's only neighbour is the other one, with identical densities:
        # q_t = p * q_{t-1} renormalised, hence q_t ∝ p^(t+1)
        want = p ** (iters + 1); want /= want.sum()
        np.testing.assert_allclose(f.prob[0, 0], want, rtol=1e-10)
        np.testing.assert_allclose(f.prob[0, 1], want, rtol=1e-10)


def test_aggregation_isolated_pixel_unchanged():
    S = int(HemiGrid(0).active().sum())
    s = two_pixel_samples(np.linspace(0, 1, S))
    s.mask[0, 1] = False
    f = aggregate_density(s, np.full((1, 2, 3), 0.4), iters=3, radius=1)
    np.testing.assert_allclose(f.prob[0, 0], s.probabilities()[0, 0])


def test_aggregation_does_not_increase_median_error(sky, glossy):
    # sphere rendered under the likelihood's own noise model: Laplace noise on log radiance
    cam = arc_cameras(1, 48)[0]
    r = render_view(Scene(Sphere(), glossy), cam, sky)
    gt = r.normal @ cam.to_viewer.T
    img = r.image * np.exp(np.random.default_rng(0).laplace(scale=0.03, size=r.image.shape))
    s = coarse_to_fine_search(img, r.mask, sky, glossy, cam, levels=3)
    m = s.mask
    e0 = np.median(angles_deg(aggregate_density(s, img, iters=0).argmax_normals()[m], gt[m]))
    e1 = np.median(angles_deg(aggregate_density(s, img, iters=3).argmax_normals()[m], gt[m]))
    assert e1 <= e0


def test_aggregation_noiseless_change_is_sub_cell(glossy_samples, glossy_view):
    s, _ = glossy_samples
    view, gt = glossy_view
    m = view.mask
    e0 = np.median(angles_deg(aggregate_density(s, view.image, iters=0).argmax_normals()[m], gt[m]))
    e1 = np.median(angles_deg(aggregate_density(s, view.image, iters=3).argmax_normals()[m], gt[m]))
    assert e1 - e0 < 0.1 * HemiGrid(s.level).cell_diagonal_deg()


def test_estimator_output_normalized(glossy_view, sky, glossy):
    view, _ = glossy_view
    f = ShapeFromShading(env=sky, brdf=glossy, levels=2).transform(view)
    np.testing.assert_allclose(f.prob[f.mask].sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(f.prob[~f.mask] == 0)
    n = f.argmax_normals()[f.mask]
    np.testing.assert_allclose(np.linalg.norm(n, axis=-1), 1.0, atol=1e-12)


def test_estimator_requires_env_and_brdf():
    with pytest.raises(ConfigError):
        ShapeFromShading().fit()
    with pytest.raises(ConfigError):
        ShapeFromShading(env=synthetic_sky(8, 4), brdf=Microfacet(0.1, 0.1, 0.3), b=0).fit()


def test_dark_percentile_masks_pixels(glossy_view, sky, glossy):
    view, _ = glossy_view
    s = ShapeFromShading(env=sky, brdf=glossy, levels=1, dark_percentile=20).search(view)
    assert s.mask.sum() < view.mask.sum()
    assert not np.any(s.mask & ~view.mask)
