import json
import struct

import numpy as np
import pytest

from radmvs.exceptions import ConfigError, FormatError
from radmvs.fusion import OrientedPointCloud
from radmvs.io import (SCENE_SCHEMA, generate_scene, load_scene, read_brdf_params, read_density, read_history,
                       read_mask, read_merl, read_pfm, read_ply_mesh, write_brdf_params, write_density,
                       write_history, write_mask, write_merl, write_pfm, write_ply)
from radmvs.radiometry import Lambertian, Microfacet
from radmvs.sfs import NormalDensityField


def test_pfm_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(5, 7, 3), (4, 9)]:
        img = rng.normal(size=shape).astype(np.float32) * 1e3
        write_pfm(tmp_path / "a.pfm", img)
        back = read_pfm(tmp_path / "a.pfm")
        assert back.dtype == np.float32 and back.shape == shape
        assert back.tobytes() == img.tobytes()


def test_pfm_header_arithmetic(tmp_path):
    vals = np.arange(12, dtype="<f4")
    (tmp_path / "b.pfm").write_bytes(b"PF\n2 2\n-1.0\n" + vals.tobytes())
    img = read_pfm(tmp_path / "b.pfm")
    assert img.shape == (2, 2, 3)
    # first stored row is the bottom image row
    np.testing.assert_array_equal(img[1, 0], [0, 1, 2])
    np.testing.assert_array_equal(img[0, 1], [9, 10, 11])


def reference_pfm_decode(data):
    """Scalar decoder written independently of the library reader."""
    lines = data.split(b"\n", 3)
    w, h = (int(x) for x in lines[1].split())
    scale = float(lines[2])
    fmt = "<f" if scale < 0 else ">f"
    payload = lines[3]
    ch = 3 if lines[0] == b"PF" else 1
    out = [[[0.0] * ch for _ in range(w)] for _ in range(h)]
    k = 0
    for row in range(h - 1, -1, -1):
        for col in range(w):
            for c in range(ch):
                out[row][col][c] = struct.unpack(fmt, payload[4 * k:4 * k + 4])[0]
                k += 1
    return out


def test_pfm_big_endian_matches_reference(tmp_path):
    rng = np.random.default_rng(1)
    vals = rng.normal(size=(3, 4, 3)).astype(">f4")
    data = b"PF\n4 3\n1.0\n" + vals.tobytes()
    (tmp_path / "c.pfm").write_bytes(data)
    np.testing.assert_array_equal(read_pfm(tmp_path / "c.pfm"), np.array(reference_pfm_decode(data)))


@pytest.mark.parametrize("data", [b"P6\n2 2\n-1.0\n" + bytes(48), b"PF\n2 2\n-1.0\n" + bytes(40),
                                  b"PF\n2 x\n-1.0\n" + bytes(48), b"PF\n2 2\n0\n" + bytes(48)])
def test_pfm_rejects_malformed(tmp_path, data):
    (tmp_path / "d.pfm").write_bytes(data)
    with pytest.raises(FormatError) as e:
        read_pfm(tmp_path / "d.pfm")
    assert e.value.category == "format"


def test_pfm_rejects_nonfinite(tmp_path):
    vals = np.array([1.0, np.nan, 2.0, 3.0], dtype="<f4")
    (tmp_path / "e.pfm").write_bytes(b"Pf\n2 2\n-1.0\n" + vals.tobytes())
    with pytest.raises(FormatError):
        read_pfm(tmp_path / "e.pfm")
    with pytest.raises(FormatError):
        write_pfm(tmp_path / "f.pfm", np.array([[np.inf]]))


def test_mask_roundtrip(tmp_path):
    m = np.random.default_rng(0).uniform(size=(7, 5)) > 0.5
    write_mask(tmp_path / "m.pgm", m)
    np.testing.assert_array_equal(read_mask(tmp_path / "m.pgm"), m)
    (tmp_path / "t.pgm").write_bytes(b"P5\n5 7\n255\n" + bytes(10))
    with pytest.raises(FormatError):
        read_mask(tmp_path / "t.pgm")


def test_merl_constant_file(tmp_path):
    write_merl(tmp_path / "c.binary", np.full((3, 90, 90, 180), 1500.0))
    t = read_merl(tmp_path / "c.binary").table
    assert np.all(t[..., 0] == 1.0)
    np.testing.assert_allclose(t[..., 1], 1.15)
    np.testing.assert_allclose(t[..., 2], 1.66)


def test_merl_rejects_bad_dims_and_short(tmp_path):
    (tmp_path / "a.binary").write_bytes(struct.pack("<3i", 90, 90, 90) + bytes(8 * 3 * 90 * 90 * 90))
    with pytest.raises(FormatError):
        read_merl(tmp_path / "a.binary")
    (tmp_path / "b.binary").write_bytes(struct.pack("<3i", 90, 90, 180) + bytes(1000))
    with pytest.raises(FormatError):
        read_merl(tmp_path / "b.binary")


def reference_merl(path):
    """Independent parser: header check, then per-sample scalar decoding."""
    scales = (1.0 / 1500.0, 1.15 / 1500.0, 1.66 / 1500.0)
    with open(path, "rb") as f:
        dims = struct.unpack("<3i", f.read(12))
        n = dims[0] * dims[1] * dims[2]
        raw = f.read()
    out = np.empty((90, 90, 180, 3))
    flat = out.reshape(-1, 3)
    for c in range(3):
        vals = struct.unpack(f"<{n}d", raw[8 * n * c:8 * n * (c + 1)])
        flat[:, c] = [v * scales[c] if v >= 0 else 0.0 for v in vals]
    return out


def test_merl_matches_reference_parser(tmp_path):
    rng = np.random.default_rng(7)
    raw = rng.uniform(-50, 3000, size=(3, 90, 90, 180))
    write_merl(tmp_path / "r.binary", raw)
    ours = read_merl(tmp_path / "r.binary").table
    np.testing.assert_array_equal(ours, reference_merl(tmp_path / "r.binary"))
    assert ours.min() == 0.0


def test_ply_loadable_by_trimesh(tmp_path):
    trimesh = pytest.importorskip("trimesh")
    rng = np.random.default_rng(0)
    n = rng.normal(size=(50, 3))
    cloud = OrientedPointCloud(rng.normal(size=(50, 3)), n / np.linalg.norm(n, axis=1, keepdims=True),
                               rng.uniform(size=(50, 3)))
    write_ply(tmp_path / "c.ply", cloud)
    loaded = trimesh.load(tmp_path / "c.ply")
    np.testing.assert_allclose(loaded.vertices, cloud.points.astype(np.float32), rtol=1e-6)


def test_ply_mesh_roundtrip(tmp_path):
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1.0]])
    f = np.array([[0, 1, 2], [0, 1, 3], [1, 2, 3]])
    write_ply(tmp_path / "m.ply", points=v, faces=f)
    v2, f2 = read_ply_mesh(tmp_path / "m.ply")
    np.testing.assert_array_equal(v2, v)
    np.testing.assert_array_equal(f2, f)
    (tmp_path / "a.ply").write_text("ply\nformat ascii 1.0\nelement vertex 3\nproperty float x\n"
                                    "property float y\nproperty float z\nelement face 1\n"
                                    "property list uchar int vertex_indices\nend_header\n"
                                    "0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n")
    v3, f3 = read_ply_mesh(tmp_path / "a.ply")
    assert v3.shape == (3, 3) and f3.tolist() == [[0, 1, 2]]
    with pytest.raises(ConfigError):
        read_ply_mesh(tmp_path / "missing.ply")


def test_density_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    d = rng.normal(size=(3, 4, 5, 3)); d /= np.linalg.norm(d, axis=-1, keepdims=True)
    p = rng.uniform(size=(3, 4, 5)); p /= p.sum(-1, keepdims=True)
    f = NormalDensityField(d, rng.integers(0, 100, (3, 4, 5)), p, rng.uniform(size=(3, 4)) > 0.3, 2)
    write_density(tmp_path / "d.ndf", f)
    g = read_density(tmp_path / "d.ndf")
    np.testing.assert_array_equal(g.dirs, d.astype(np.float32))
    np.testing.assert_array_equal(g.prob, p.astype(np.float32))
    np.testing.assert_array_equal(g.mask, f.mask)
    np.testing.assert_array_equal(g.cells, f.cells)
    assert g.level == 2
    (tmp_path / "bad.ndf").write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(FormatError):
        read_density(tmp_path / "bad.ndf")


def test_brdf_params_and_history(tmp_path):
    b = Microfacet((0.1, 0.2, 0.3), (0.4, 0.5, 0.6), 0.123456789)
    write_brdf_params(tmp_path / "b.txt", b)
    b2 = read_brdf_params(tmp_path / "b.txt")
    assert b2.to_params() == b.to_params()
    write_brdf_params(tmp_path / "l.txt", Lambertian(0.5))
    assert read_brdf_params(tmp_path / "l.txt").albedo.tolist() == [0.5, 0.5, 0.5]
    hist = [(1, "reflectance", 0.5), (2, "reflectance", 0.25)]
    write_history(tmp_path / "h.csv", hist)
    assert read_history(tmp_path / "h.csv") == hist


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("scene")
    desc = generate_scene(d, n_views=10, resolution=48, jitter_deg=0.0, seed=3)
    return d, desc


def test_generate_scene_azimuth_spacing(scene_dir):
    _, desc = scene_dir
    c = np.array([v.camera.center for v in desc.views])
    az = np.degrees(np.arctan2(c[:, 1], c[:, 0]))
    np.testing.assert_allclose(np.diff(np.unwrap(az, period=360)), 36.0, atol=1e-9)


def test_generate_scene_mask_area(scene_dir):
    d, desc = scene_dir
    scene = load_scene(d / "scene.json")
    for v in scene.load_views()[:3]:
        f = v.camera.K[0, 0]
        dist = np.linalg.norm(v.camera.center)
        area = np.pi * f ** 2 / (dist ** 2 - 1.0)
        assert abs(v.mask.sum() - area) / area < 0.02


def test_scene_reload_identical_cameras(scene_dir):
    d, desc = scene_dir
    scene = load_scene(d / "scene.json")
    for a, b in zip(desc.views, scene.views):
        assert np.array_equal(a.camera.K, b.camera.K)
        assert np.array_equal(a.camera.R, b.camera.R)
        assert np.array_equal(a.camera.t, b.camera.t)
    assert scene.bbox_diag == pytest.approx(2 * np.sqrt(3))
    gt = scene.load_ground_truth()
    assert len(gt) == 10 and gt[0].mask.any()


def test_scene_validation(tmp_path, scene_dir):
    d, _ = scene_dir
    doc = json.loads((d / "scene.json").read_text())
    assert doc["schema"] == SCENE_SCHEMA
    doc["env_map"] = "nope.pfm"
    (d / "broken.json").write_text(json.dumps(doc))
    with pytest.raises(ConfigError):
        load_scene(d / "broken.json")
    doc["schema"] = "other/0"
    (tmp_path / "s.json").write_text(json.dumps(doc))
    with pytest.raises(FormatError):
        load_scene(tmp_path / "s.json")
    (tmp_path / "j.json").write_text("{not json")
    with pytest.raises(FormatError):
        load_scene(tmp_path / "j.json")


def test_generate_scene_rejects_few_views_and_bad_shape(tmp_path):
    with pytest.raises(ConfigError):
        generate_scene(tmp_path, n_views=4)
    with pytest.raises(ConfigError):
        generate_scene(tmp_path / "x", shape=tmp_path / "missing.ply", n_views=5)
