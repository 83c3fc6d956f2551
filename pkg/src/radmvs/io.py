"""Readers and writers for every on-disk artifact, plus synthetic scene generation."""

import csv
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, FormatError
from .radiometry.brdf import MERL_RES, MERL_SCALE, MerlTabulated, brdf_from_params
from .radiometry.camera import Camera
from .radiometry.envmap import EnvironmentMap
from .views import DepthNormalMaps, View

SCENE_SCHEMA = "radmvs-scene/1"
NDF_MAGIC = b"RNDF"


# ---------------------------------------------------------------- PFM

def _read_token(f):
    tok = b""
    while True:
        c = f.read(1)
        if not c:
            break
        if c.isspace():
            if tok:
                break
            continue
        tok += c
        if len(tok) > 64:
            raise FormatError("PFM header token too long")
    return tok


def read_pfm(path):
    """Load a PFM file as float32 (H, W, 3) or (H, W)."""
    with open(path, "rb") as f:
        magic = _read_token(f)
        if magic not in (b"PF", b"Pf"):
            raise FormatError(f"{path}: bad PFM magic {magic[:8]!r}")
        try:
            w, h = int(_read_token(f)), int(_read_token(f))
            scale = float(_read_token(f))
        except ValueError as e:
            raise FormatError(f"{path}: malformed PFM header") from e
        if w <= 0 or h <= 0 or scale == 0 or not np.isfinite(scale):
            raise FormatError(f"{path}: invalid PFM dimensions or scale")
        ch = 3 if magic == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        n = w * h * ch
        payload = f.read(4 * n)
    if len(payload) < 4 * n:
        raise FormatError(f"{path}: truncated PFM payload ({len(payload)} of {4 * n} bytes)")
    data = np.frombuffer(payload, dtype=dtype).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: PFM contains non-finite values")
    shape = (h, w, 3) if ch == 3 else (h, w)
    return data.reshape(shape)[::-1].copy()


def write_pfm(path, image):
    """Write float data as little-endian PFM (rows stored bottom-up)."""
    a = np.asarray(image)
    if a.ndim == 3 and a.shape[2] == 3:
        magic = b"PF"
    elif a.ndim == 2:
        magic = b"Pf"
    else:
        raise FormatError(f"PFM needs (H, W) or (H, W, 3), got {a.shape}")
    a = a.astype("<f4")
    if not np.all(np.isfinite(a)):
        raise FormatError("refusing to write non-finite values to PFM")
    h, w = a.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n" + f"{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(a[::-1]).tobytes())


# ---------------------------------------------------------------- PGM masks

def write_mask(path, mask):
    m = np.asarray(mask, dtype=bool)
    h, w = m.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write((m.astype(np.uint8) * 255).tobytes())


def read_mask(path):
    with open(path, "rb") as f:
        if _read_token(f) != b"P5":
            raise FormatError(f"{path}: not a binary PGM")
        try:
            w, h, maxval = (int(_read_token(f)) for _ in range(3))
        except ValueError as e:
            raise FormatError(f"{path}: malformed PGM header") from e
        if maxval != 255 or w <= 0 or h <= 0:
            raise FormatError(f"{path}: only 8-bit PGM masks are supported")
        data = f.read(w * h)
    if len(data) < w * h:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w) > 127


# ---------------------------------------------------------------- MERL

MERL_SAMPLES = int(np.prod(MERL_RES))


def read_merl(path):
    """Load a MERL binary BRDF into a MerlTabulated (scaled, negatives zeroed)."""
    with open(path, "rb") as f:
        head = f.read(12)
        if len(head) < 12:
            raise FormatError(f"{path}: truncated MERL header")
        dims = struct.unpack("<3i", head)
        if dims != MERL_RES:
            raise FormatError(f"{path}: MERL dimensions {dims} != {MERL_RES}")
        payload = f.read(8 * 3 * MERL_SAMPLES)
    if len(payload) < 8 * 3 * MERL_SAMPLES:
        raise FormatError(f"{path}: truncated MERL payload")
    raw = np.frombuffer(payload, dtype="<f8").reshape(3, *MERL_RES)
    if not np.all(np.isfinite(raw)):
        raise FormatError(f"{path}: MERL table contains non-finite values")
    table = np.moveaxis(raw, 0, -1) * MERL_SCALE
    return MerlTabulated(np.where(table < 0, 0.0, table))


def write_merl(path, raw):
    """Write a raw (unscaled) table of shape (3, 90, 90, 180) in MERL layout."""
    raw = np.asarray(raw, dtype="<f8")
    if raw.shape != (3,) + MERL_RES:
        raise FormatError(f"MERL payload must have shape {(3,) + MERL_RES}")
    with open(path, "wb") as f:
        f.write(struct.pack("<3i", *MERL_RES))
        f.write(raw.tobytes())


# ---------------------------------------------------------------- PLY

def write_ply(path, cloud=None, points=None, normals=None, colors=None, faces=None):
    """Binary little-endian PLY with float32 xyz/normals and optional uchar colours and faces."""
    if cloud is not None:
        points, normals, colors = cloud.points, cloud.normals, cloud.colors
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cols = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if normals is not None:
        cols += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if colors is not None:
        cols += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    rec = np.empty(len(p), dtype=cols)
    rec["x"], rec["y"], rec["z"] = p.T
    if normals is not None:
        n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
        rec["nx"], rec["ny"], rec["nz"] = n.T
    if colors is not None:
        c = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        c8 = np.clip(np.round(c / max(c.max(), 1e-12) * 255.0), 0, 255).astype(np.uint8)
        rec["red"], rec["green"], rec["blue"] = c8.T
    types = {"<f4": "float", "u1": "uchar"}
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {len(p)}"]
    head += [f"property {types[t]} {name}" for name, t in cols]
    if faces is not None:
        faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        head += [f"element face {len(faces)}", "property list uchar int vertex_indices"]
    head.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(head) + "\n").encode("ascii"))
        f.write(rec.tobytes())
        if faces is not None:
            frec = np.empty(len(faces), dtype=[("n", "u1"), ("i", "<i4", (3,))])
            frec["n"] = 3
            frec["i"] = faces
            f.write(frec.tobytes())


_PLY_TYPES = {"char": "i1", "uchar": "u1", "short": "i2", "ushort": "u2", "int": "i4", "uint": "u4",
              "float": "f4", "double": "f8", "int8": "i1", "uint8": "u1", "int16": "i2", "uint16": "u2",
              "int32": "i4", "uint32": "u4", "float32": "f4", "float64": "f8"}


def read_ply_mesh(path):
    """Vertices and triangle faces from an ASCII or binary PLY (triangles only)."""
    try:
        f = open(path, "rb")
    except OSError as e:
        raise ConfigError(f"cannot open mesh {path}: {e}") from e
    with f:
        if f.readline().strip() != b"ply":
            raise FormatError(f"{path}: not a PLY file")
        fmt, elements = None, []
        while True:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: PLY header not terminated")
            tok = line.decode("ascii", "replace").split()
            if not tok or tok[0] in ("comment", "obj_info"):
                continue
            if tok[0] == "end_header":
                break
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                elements[-1][2].append(tok[1:])
        if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
            raise FormatError(f"{path}: unsupported PLY format {fmt}")
        end = "<" if fmt == "binary_little_endian" else ">"
        out = {}
        text = f.read().decode("ascii", "replace").split() if fmt == "ascii" else None
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = []
                for p in props:
                    if p[0] == "list":
                        ct, it = _PLY_TYPES[p[1]], _PLY_TYPES[p[2]]
                        if text is not None:
                            k = int(text[pos]); pos += 1
                            row.append([float(x) for x in text[pos:pos + k]]); pos += k
                        else:
                            k = int(np.frombuffer(f.read(np.dtype(ct).itemsize), end + ct)[0])
                            row.append(np.frombuffer(f.read(k * np.dtype(it).itemsize), end + it).tolist())
                    else:
                        if text is not None:
                            row.append(float(text[pos])); pos += 1
                        else:
                            t = _PLY_TYPES[p[0]]
                            row.append(float(np.frombuffer(f.read(np.dtype(t).itemsize), end + t)[0]))
                rows.append(row)
            out[name] = (props, rows)
    if "vertex" not in out or "face" not in out:
        raise FormatError(f"{path}: PLY mesh needs vertex and face elements")
    vprops = [p[-1] for p in out["vertex"][0]]
    try:
        ix = [vprops.index(k) for k in ("x", "y", "z")]
    except ValueError as e:
        raise FormatError(f"{path}: PLY vertices lack x/y/z") from e
    verts = np.array([[r[i] for i in ix] for r in out["vertex"][1]], dtype=np.float64)
    faces = [r[0] for r in out["face"][1]]
    if any(len(fc) != 3 for fc in faces):
        raise FormatError(f"{path}: only triangle meshes are supported")
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) and (faces.min() < 0 or faces.max() >= len(verts)):
        raise FormatError(f"{path}: face index out of range")
    return verts, faces


# ---------------------------------------------------------------- normal densities

def write_density(path, field_):
    """Binary normal-density file: magic, width, height, samples/pixel, level, mask, records."""
    H, W = field_.shape
    K = field_.samples_per_pixel
    rec = np.concatenate([field_.dirs, field_.prob[..., None]], axis=-1).astype("<f4")
    with open(path, "wb") as f:
        f.write(NDF_MAGIC + struct.pack("<4I", W, H, K, field_.level))
        f.write(field_.mask.astype(np.uint8).tobytes())
        f.write(np.asarray(field_.cells, dtype="<i4").tobytes())
        f.write(rec.tobytes())


def read_density(path):
    from .sfs import NormalDensityField
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != NDF_MAGIC or len(data) < 20:
        raise FormatError(f"{path}: not a normal-density file")
    W, H, K, level = struct.unpack("<4I", data[4:20])
    need = 20 + H * W + 4 * H * W * K + 16 * H * W * K
    if len(data) < need:
        raise FormatError(f"{path}: truncated normal-density payload")
    o = 20
    mask = np.frombuffer(data, np.uint8, H * W, o).reshape(H, W).astype(bool)
    o += H * W
    cells = np.frombuffer(data, "<i4", H * W * K, o).reshape(H, W, K).astype(np.int64)
    o += 4 * H * W * K
    rec = np.frombuffer(data, "<f4", 4 * H * W * K, o).reshape(H, W, K, 4).astype(np.float64)
    if not np.all(np.isfinite(rec)):
        raise FormatError(f"{path}: non-finite density records")
    return NormalDensityField(rec[..., :3].copy(), cells, rec[..., 3].copy(), mask, level)


# ---------------------------------------------------------------- BRDF params and history

def write_brdf_params(path, brdf):
    lines = [f"kind {brdf.kind}"]
    for k, v in brdf.to_params().items():
        vals = np.atleast_1d(np.asarray(v, dtype=np.float64))
        lines.append(k + " " + " ".join(repr(float(x)) for x in vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_brdf_params(path):
    kind, params = None, {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "kind":
            kind = tok[1]
            continue
        try:
            vals = [float(x) for x in tok[1:]]
        except ValueError as e:
            raise FormatError(f"{path}: bad value on line {line!r}") from e
        params[tok[0]] = vals[0] if len(vals) == 1 else vals
    if kind is None:
        raise FormatError(f"{path}: missing 'kind' line")
    return brdf_from_params(kind, params)


def write_history(path, history):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["round", "phase", "objective"])
        for r, phase, obj in history:
            w.writerow([r, phase, repr(float(obj))])


def read_history(path):
    with open(path, newline="", encoding="utf-8") as f:
        return [(int(r["round"]), r["phase"], float(r["objective"])) for r in csv.DictReader(f)]


# ---------------------------------------------------------------- scene description

@dataclass
class ViewEntry:
    name: str
    image: str
    camera: Camera
    mask: str = None
    gt_depth: str = None
    gt_normal: str = None


@dataclass
class SceneDescription:
    views: list
    env_map: str
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    ground_truth: dict = field(default_factory=dict)
    root: Path = field(default_factory=Path)

    @property
    def bbox_diag(self):
        return float(np.linalg.norm(np.asarray(self.bbox_max) - np.asarray(self.bbox_min)))

    @property
    def cameras(self):
        return [v.camera for v in self.views]

    def path(self, rel):
        return self.root / rel

    def load_env(self):
        return EnvironmentMap(read_pfm(self.path(self.env_map)).astype(np.float64))

    def load_views(self):
        out = []
        for v in self.views:
            img = read_pfm(self.path(v.image)).astype(np.float64)
            mask = read_mask(self.path(v.mask)) if v.mask else None
            out.append(View(img, v.camera, mask, v.name))
        return out

    @property
    def has_ground_truth(self):
        return all(v.gt_depth and v.gt_normal for v in self.views)

    def load_ground_truth(self):
        maps = []
        for v in self.views:
            d = read_pfm(self.path(v.gt_depth)).astype(np.float64)
            n = read_pfm(self.path(v.gt_normal)).astype(np.float64)
            m = read_mask(self.path(v.mask)) if v.mask else d > 0
            maps.append(DepthNormalMaps(d, n, m & (d > 0)))
        return maps


def _camera_to_json(c):
    return {"intrinsics": c.K.tolist(), "extrinsics": c.extrinsics.tolist(), "width": c.width, "height": c.height}


def save_scene(path, scene):
    doc = {
        "schema": SCENE_SCHEMA,
        "env_map": scene.env_map,
        "bbox": {"min": np.asarray(scene.bbox_min, float).tolist(), "max": np.asarray(scene.bbox_max, float).tolist()},
        "up": np.asarray(scene.up, float).tolist(),
        "ground_truth": scene.ground_truth,
        "views": [],
    }
    for v in scene.views:
        e = {"name": v.name, "image": v.image, **_camera_to_json(v.camera)}
        for k in ("mask", "gt_depth", "gt_normal"):
            if getattr(v, k):
                e[k] = getattr(v, k)
        doc["views"].append(e)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_scene(path, check_paths=True):
    """Parse and validate a scene file; relative paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ConfigError(f"cannot read scene file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from e
    if not isinstance(doc, dict) or doc.get("schema") != SCENE_SCHEMA:
        raise FormatError(f"{path}: expected schema {SCENE_SCHEMA!r}")
    try:
        views = []
        for i, e in enumerate(doc["views"]):
            Rt = np.array(e["extrinsics"], dtype=np.float64)
            if Rt.shape != (3, 4):
                raise ValueError("extrinsics must be 3x4")
            cam = Camera(np.array(e["intrinsics"], dtype=np.float64), Rt[:, :3], Rt[:, 3], int(e["width"]),
                         int(e["height"]))
            views.append(ViewEntry(e.get("name", f"view_{i:03d}"), e["image"], cam, e.get("mask"),
                                   e.get("gt_depth"), e.get("gt_normal")))
        scene = SceneDescription(views, doc["env_map"], np.array(doc["bbox"]["min"], dtype=np.float64),
                                 np.array(doc["bbox"]["max"], dtype=np.float64),
                                 np.array(doc.get("up", [0, 0, 1]), dtype=np.float64),
                                 doc.get("ground_truth", {}), path.parent)
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise FormatError(f"{path}: malformed scene entry ({e})") from e
    if not views:
        raise FormatError(f"{path}: scene has no views")
    if check_paths:
        rels = [scene.env_map] + [x for v in views for x in (v.image, v.mask, v.gt_depth, v.gt_normal) if x]
        for rel in rels:
            if not scene.path(rel).is_file():
                raise ConfigError(f"{path}: missing file {rel}")
    return scene


# ---------------------------------------------------------------- synthetic scenes

def make_shape(spec):
    """Build a renderable shape from a ground-truth description dict."""
    from .radiometry.shapes import Sphere, TriangleMesh, superellipsoid
    kind = spec.get("type")
    if kind == "sphere":
        return Sphere(spec.get("center", [0.0, 0.0, 0.0]), spec.get("radius", 1.0))
    if kind == "superellipsoid":
        return superellipsoid(spec.get("radii", [1.0, 1.0, 1.0]), spec.get("e1", 0.5), spec.get("e2", 0.5),
                              spec.get("center", [0.0, 0.0, 0.0]), spec.get("n_lat", 48), spec.get("n_lon", 96))
    if kind == "mesh":
        v, f = read_ply_mesh(spec["path"])
        return TriangleMesh(v, f)
    raise ConfigError(f"unknown shape type {kind!r}")


def ring_cameras(n_views, radius, resolution, target=(0.0, 0.0, 0.0), elevation_deg=15.0, jitter_deg=5.0,
                 seed=0, focal=None, up=(0.0, 0.0, 1.0)):
    """Cameras on a horizontal ring looking at ``target`` with uniform angular jitter."""
    rng = np.random.default_rng(seed)
    target = np.asarray(target, dtype=np.float64)
    az = 2.0 * np.pi * np.arange(n_views) / n_views
    el = np.full(n_views, np.radians(elevation_deg))
    if jitter_deg > 0:
        j = rng.uniform(-1.0, 1.0, size=(n_views, 2)) * np.radians(jitter_deg)
        az, el = az + j[:, 0], el + j[:, 1]
    f = focal if focal is not None else resolution * 1.74
    cams = []
    for a, e in zip(az, el):
        eye = target + radius * np.array([np.cos(a) * np.cos(e), np.sin(a) * np.cos(e), np.sin(e)])
        cams.append(Camera.look_at(eye, target, up, f, resolution, resolution))
    return cams


def generate_scene(out_dir, shape="sphere", brdf=None, env=None, n_views=10, ring_radius=4.0, resolution=64,
                   jitter_deg=5.0, elevation_deg=15.0, seed=0, focal=None, shape_params=None):
    """Render a ring of views and write images, masks, ground truth and ``scene.json``."""
    from .radiometry.brdf import Microfacet
    from .radiometry.envmap import synthetic_sky
    from .radiometry.render import Scene, render_view

    if n_views < 5:
        raise ConfigError("generate_scene needs at least 5 views")
    out = Path(out_dir)
    spec = dict(shape_params or {})
    if isinstance(shape, (str, os.PathLike)) and str(shape) not in ("sphere", "superellipsoid"):
        spec.update(type="mesh", path=str(Path(shape).resolve()))
    else:
        spec.setdefault("type", str(shape))
    geom = make_shape(spec)
    brdf = brdf if brdf is not None else Microfacet([0.3, 0.2, 0.1], [0.4, 0.4, 0.4], 0.25)
    env = env if env is not None else synthetic_sky(64, 32, seed=seed)
    bmin, bmax = geom.bbox()
    center = (np.asarray(bmin) + np.asarray(bmax)) / 2.0
    if focal is None:
        # the object's largest half-extent spans 90% of the half-width
        half = float(np.max(np.asarray(bmax) - np.asarray(bmin))) / 2.0
        focal = 0.45 * resolution / np.tan(np.arcsin(min(half / ring_radius, 0.99)))
    cams = ring_cameras(n_views, ring_radius, resolution, center, elevation_deg, jitter_deg, seed, focal)
    for d in ("images", "masks", "gt"):
        (out / d).mkdir(parents=True, exist_ok=True)
    write_pfm(out / "env.pfm", env.radiance)
    scene = Scene(geom, brdf)
    entries = []
    for i, cam in enumerate(cams):
        r = render_view(scene, cam, env)
        name = f"view_{i:03d}"
        write_pfm(out / "images" / f"{name}.pfm", r.image)
        write_mask(out / "masks" / f"{name}.pgm", r.mask)
        write_pfm(out / "gt" / f"depth_{i:03d}.pfm", r.depth)
        write_pfm(out / "gt" / f"normal_{i:03d}.pfm", r.maps(cam).normal)
        entries.append(ViewEntry(name, f"images/{name}.pfm", cam, f"masks/{name}.pgm", f"gt/depth_{i:03d}.pfm",
                                 f"gt/normal_{i:03d}.pfm"))
    gt = {"shape": spec, "brdf": {"kind": brdf.kind, **{k: np.asarray(v).tolist()
                                                         for k, v in brdf.to_params().items()}}}
    desc = SceneDescription(entries, "env.pfm", np.asarray(bmin, float), np.asarray(bmax, float),
                            np.array([0.0, 0.0, 1.0]), gt, out)
    save_scene(out / "scene.json", desc)
    return desc
