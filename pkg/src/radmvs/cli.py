"""Command-line front end: ``radmvs {render,sfs,mvs,joint,fuse,eval}``."""

import argparse
import logging
import os
import platform
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import ConfigError, RadMVSError
from .parallel import get_workers, set_workers

log = logging.getLogger("radmvs")


def _add_common(p):
    p.add_argument("--out", default=os.environ.get("RADMVS_OUTPUT_DIR"),
                   help="output directory (env RADMVS_OUTPUT_DIR)")
    p.add_argument("--workers", type=int, default=None, help="worker threads (env RADMVS_WORKERS)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-level", default="WARNING")


def _add_scene(p):
    p.add_argument("scene", help="scene description file (scene.json)")


def _add_sfs(p):
    g = p.add_argument_group("shape from shading")
    g.add_argument("--b", type=float, default=0.1, help="Laplace scale on log radiance")
    g.add_argument("--levels", type=int, default=4)
    g.add_argument("--top-k", type=int, default=16)
    g.add_argument("--sub-samples", type=int, default=4)
    g.add_argument("--aggregate-iters", type=int, default=3)
    g.add_argument("--aggregate-radius", type=int, default=2)
    g.add_argument("--color-sigma", type=float, default=0.1)
    g.add_argument("--match-level", type=int, default=2, help="grid level at which neighbour densities are matched")
    g.add_argument("--blur-cells", type=float, default=1.0, help="smoothing of neighbour densities, in cells")
    g.add_argument("--dark-percentile", type=float, default=None)


def _add_mvs(p):
    g = p.add_argument_group("plane sweep")
    g.add_argument("--dmin", type=float, default=None)
    g.add_argument("--dmax", type=float, default=None)
    g.add_argument("--num-hypotheses", type=int, default=64)
    g.add_argument("--alpha-photo", type=float, default=1.0)
    g.add_argument("--beta-normal", type=float, default=2.0)
    g.add_argument("--tau", type=float, default=0.1)
    g.add_argument("--filter-radius", type=int, default=2)
    g.add_argument("--depth-window", type=int, default=3)
    g.add_argument("--refine-weight", type=float, default=1e-3, help="depth anchor of the normal-guided refinement")
    g.add_argument("--brdf", default=None, help="BRDF parameter file (default: the scene's ground truth)")


def _add_joint(p):
    g = p.add_argument_group("reflectance")
    g.add_argument("--rounds", type=int, default=3)
    g.add_argument("--family", choices=["lambertian", "microfacet"], default="microfacet")
    g.add_argument("--budget", type=int, default=40, help="full renders per reflectance fit")
    g.add_argument("--blur-sigma", type=float, default=4.0)
    g.add_argument("--no-snap", action="store_true")
    g.add_argument("--cone-deg", type=float, default=15.0)


def _add_fuse(p):
    g = p.add_argument_group("fusion")
    g.add_argument("--maps", default=None, help="directory holding maps/ (default: --out)")
    g.add_argument("--voxel", type=float, default=None, help="default 0.5%% of the bbox diagonal")
    g.add_argument("--stride", type=int, default=1)
    g.add_argument("--min-confidence", type=float, default=None, help="default 2 / num-hypotheses")
    g.add_argument("--num-hypotheses", type=int, default=64)


def build_parser():
    parser = argparse.ArgumentParser(prog="radmvs", description=__doc__)
    parser.add_argument("--version", action="version", version=f"radmvs {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render a synthetic ring-of-views scene")
    _add_common(p)
    p.add_argument("--shape", default="sphere", help="sphere, superellipsoid or a PLY mesh path")
    p.add_argument("--views", type=int, default=10)
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--ring-radius", type=float, default=4.0)
    p.add_argument("--elevation", type=float, default=15.0)
    p.add_argument("--jitter", type=float, default=5.0, help="uniform angular jitter in degrees")
    p.add_argument("--env", default=None, help="environment map PFM (default: synthetic sky)")
    p.add_argument("--env-size", type=int, nargs=2, default=[64, 32], metavar=("W", "H"))
    p.add_argument("--brdf", default=None, help="BRDF parameter file (default: glossy microfacet)")

    p = sub.add_parser("sfs", help="per-view normal densities")
    _add_common(p)
    _add_scene(p)
    _add_sfs(p)
    p.add_argument("--brdf", default=None)

    p = sub.add_parser("mvs", help="depth and normal maps with a known BRDF")
    _add_common(p)
    _add_scene(p)
    _add_sfs(p)
    _add_mvs(p)

    p = sub.add_parser("joint", help="alternate geometry and reflectance estimation")
    _add_common(p)
    _add_scene(p)
    _add_sfs(p)
    _add_mvs(p)
    _add_joint(p)

    p = sub.add_parser("fuse", help="merge per-view maps into an oriented point cloud")
    _add_common(p)
    _add_scene(p)
    _add_fuse(p)

    p = sub.add_parser("eval", help="score maps (and optionally a cloud) against ground truth")
    _add_common(p)
    _add_scene(p)
    p.add_argument("--maps", default=None, help="directory holding maps/ (default: --out)")
    p.add_argument("--cloud", default=None, help="fused PLY to score against the ground-truth surface")
    return parser


def _validate(args):
    if args.out is None:
        raise ConfigError("no output directory: pass --out or set RADMVS_OUTPUT_DIR")
    for name in ("levels", "top_k", "sub_samples", "num_hypotheses", "rounds", "stride", "views", "resolution"):
        v = getattr(args, name, None)
        if v is not None and v < 1:
            raise ConfigError(f"--{name.replace('_', '-')} must be >= 1")
    for name in ("b", "tau", "voxel", "ring_radius"):
        v = getattr(args, name, None)
        if v is not None and v <= 0:
            raise ConfigError(f"--{name.replace('_', '-')} must be > 0")
    for name in ("filter_radius", "budget", "blur_sigma", "aggregate_iters", "beta_normal", "alpha_photo",
                 "match_level", "blur_cells", "refine_weight", "aggregate_radius", "color_sigma"):
        v = getattr(args, name, None)
        if v is not None and v < 0:
            raise ConfigError(f"--{name.replace('_', '-')} must be >= 0")
    if getattr(args, "views", None) is not None and args.views < 5:
        raise ConfigError("--views must be >= 5")
    if (getattr(args, "dmin", None) is None) != (getattr(args, "dmax", None) is None):
        raise ConfigError("--dmin and --dmax go together")
    for name in ("env", "brdf", "cloud"):
        v = getattr(args, name, None)
        if v is not None and not Path(v).is_file():
            raise ConfigError(f"--{name}: no such file {v}")


class _Timer:
    def __init__(self):
        self.stages = {}

    @contextmanager
    def stage(self, name):
        t = time.perf_counter()
        try:
            yield
        finally:
            self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - t
            log.info("stage %s: %.2fs", name, self.stages[name])


def _write_manifest(out, args, timer, wall, extra):
    import scipy
    import sklearn
    lines = [f"command={args.command}", f"argv={' '.join(sys.argv[1:])}", f"radmvs={__version__}",
             f"numpy={np.__version__}", f"scipy={scipy.__version__}", f"sklearn={sklearn.__version__}",
             f"python={platform.python_version()}"]
    for k, v in sorted(vars(args).items()):
        if k != "command":
            lines.append(f"param.{k}={v}")
    for k, v in extra.items():
        lines.append(f"{k}={v}")
    lines.append(f"workers={get_workers()}")
    for k, v in timer.stages.items():
        lines.append(f"time.{k}={v:.3f}")
    lines.append(f"wall_time={wall:.3f}")
    (out / f"manifest_{args.command}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _sfs_estimator(args):
    from .sfs import ShapeFromShading
    return ShapeFromShading(b=args.b, levels=args.levels, top_k=args.top_k, sub_samples=args.sub_samples,
                            aggregate_iters=args.aggregate_iters, aggregate_radius=args.aggregate_radius,
                            color_sigma=args.color_sigma, match_level=args.match_level,
                            blur_cells=args.blur_cells, dark_percentile=args.dark_percentile)


def _mvs_estimator(args, scene):
    from .mvs import PlaneSweepMVS
    return PlaneSweepMVS(dmin=args.dmin, dmax=args.dmax, num_hypotheses=args.num_hypotheses,
                         alpha_photo=args.alpha_photo, beta_normal=args.beta_normal, tau=args.tau,
                         filter_radius=args.filter_radius, depth_window=args.depth_window,
                         refine_weight=args.refine_weight, bbox=(scene.bbox_min, scene.bbox_max))


def _scene_brdf(args, scene):
    from .io import read_brdf_params
    from .radiometry.brdf import brdf_from_params
    if args.brdf:
        return read_brdf_params(args.brdf)
    gt = scene.ground_truth.get("brdf")
    if not gt:
        raise ConfigError("no --brdf given and the scene has no ground-truth BRDF")
    return brdf_from_params(gt["kind"], {k: v for k, v in gt.items() if k != "kind"})


def _write_maps(out, maps_list, scene):
    from .io import write_mask, write_pfm
    d = out / "maps"
    d.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(maps_list):
        write_pfm(d / f"depth_{i:03d}.pfm", m.depth)
        write_pfm(d / f"normal_{i:03d}.pfm", m.normal)
        write_mask(d / f"mask_{i:03d}.pgm", m.mask)
        if m.confidence is not None:
            write_pfm(d / f"confidence_{i:03d}.pfm", m.confidence)


def _read_maps(root, scene):
    from .io import read_mask, read_pfm
    from .views import DepthNormalMaps
    d = Path(root) / "maps"
    out = []
    for i in range(len(scene.views)):
        try:
            depth = read_pfm(d / f"depth_{i:03d}.pfm").astype(np.float64)
            normal = read_pfm(d / f"normal_{i:03d}.pfm").astype(np.float64)
            mask = read_mask(d / f"mask_{i:03d}.pgm")
        except FileNotFoundError as e:
            raise ConfigError(f"missing map file: {e.filename}") from e
        cpath = d / f"confidence_{i:03d}.pfm"
        conf = read_pfm(cpath).astype(np.float64) if cpath.is_file() else None
        out.append(DepthNormalMaps(depth, normal, mask, conf))
    return out


def _evaluate(out, scene, maps_list):
    from .metrics import EvalReport
    report = EvalReport.from_maps(maps_list, scene.load_ground_truth(), scene.bbox_diag)
    (out / "eval.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "eval.txt").write_text(report.to_text(), encoding="utf-8")
    return report


def surface_distances(scene, points):
    """Distances from world points to the scene's ground-truth surface."""
    from .io import make_shape
    from .metrics import MeshDistance
    spec = scene.ground_truth.get("shape")
    if not spec:
        raise ConfigError("scene has no ground-truth shape")
    if spec.get("type") == "sphere":
        c = np.asarray(spec.get("center", [0.0, 0.0, 0.0]), dtype=np.float64)
        return np.abs(np.linalg.norm(points - c, axis=1) - spec.get("radius", 1.0))
    shape = make_shape(spec)
    return MeshDistance(shape.vertices, shape.faces).distances(points)


def cmd_render(args, out, timer):
    from .io import generate_scene, read_brdf_params, read_pfm
    from .radiometry.envmap import EnvironmentMap, synthetic_sky
    env = EnvironmentMap(read_pfm(args.env).astype(np.float64)) if args.env else \
        synthetic_sky(args.env_size[0], args.env_size[1], seed=args.seed)
    brdf = read_brdf_params(args.brdf) if args.brdf else None
    out.mkdir(parents=True, exist_ok=True)
    with timer.stage("render"):
        generate_scene(out, args.shape, brdf, env, args.views, args.ring_radius, args.resolution, args.jitter,
                       args.elevation, args.seed)
    return {"scene": out / "scene.json"}


def cmd_sfs(args, scene, out, timer):
    from .io import write_density, write_pfm
    from .pipeline import estimate_densities
    brdf = _scene_brdf(args, scene)
    views = scene.load_views()
    env = scene.load_env()
    out.mkdir(parents=True, exist_ok=True)
    with timer.stage("sfs"):
        dens = estimate_densities(views, env, brdf, _sfs_estimator(args))
    d = out / "densities"
    d.mkdir(exist_ok=True)
    for i, f in enumerate(dens):
        write_density(d / f"density_{i:03d}.ndf", f)
        n = np.where(f.mask[..., None], f.argmax_normals(), 0.0)
        write_pfm(d / f"argmax_normal_{i:03d}.pfm", n)
    return {}


def cmd_mvs(args, scene, out, timer):
    from .io import write_brdf_params
    from .pipeline import estimate_densities, estimate_geometry
    brdf = _scene_brdf(args, scene)
    views = scene.load_views()
    env = scene.load_env()
    out.mkdir(parents=True, exist_ok=True)
    dens = None
    if args.beta_normal > 0:
        with timer.stage("sfs"):
            dens = estimate_densities(views, env, brdf, _sfs_estimator(args))
    with timer.stage("mvs"):
        maps_list = estimate_geometry(views, env, brdf, mvs=_mvs_estimator(args, scene), up=scene.up,
                                      densities=dens)
    _write_maps(out, maps_list, scene)
    write_brdf_params(out / "brdf.txt", brdf)
    extra = {}
    if scene.has_ground_truth:
        with timer.stage("eval"):
            extra["report"] = _evaluate(out, scene, maps_list)
    return extra


def cmd_joint(args, scene, out, timer):
    from .io import write_brdf_params, write_history
    from .pipeline import estimate_geometry
    from .reflectance import BrdfParams, alternate, initial_albedo
    views = scene.load_views()
    env = scene.load_env()
    out.mkdir(parents=True, exist_ok=True)
    sfs, mvs = _sfs_estimator(args), _mvs_estimator(args, scene)
    rounds_done = []

    def geometry(brdf):
        k = len(rounds_done) + 1
        with timer.stage(f"geometry.round{k}"):
            maps_list = estimate_geometry(views, env, brdf, sfs, mvs, scene.up)
        # per-round checkpoint so a stage can be rerun from here
        ck = out / f"round_{k}"
        _write_maps(ck, maps_list, scene)
        write_brdf_params(ck / "brdf_in.txt", brdf)
        rounds_done.append(k)
        return maps_list

    init = BrdfParams("lambertian", initial_albedo(views, env))
    with timer.stage("joint"):
        state = alternate(views, env, args.rounds, geometry, args.family, args.budget, args.blur_sigma,
                          not args.no_snap, args.cone_deg, init=init)
    _write_maps(out, state.maps, scene)
    write_brdf_params(out / "brdf.txt", state.params.to_brdf())
    write_history(out / "history.csv", state.history)
    extra = {"best_round": state.best_round}
    if scene.has_ground_truth:
        with timer.stage("eval"):
            extra["report"] = _evaluate(out, scene, state.maps)
    return extra


def cmd_fuse(args, scene, out, timer):
    from .fusion import backproject, default_voxel, merge_clouds
    from .io import write_ply
    maps_list = _read_maps(args.maps or out, scene)
    voxel = args.voxel if args.voxel is not None else default_voxel(scene.bbox_min, scene.bbox_max)
    min_conf = args.min_confidence if args.min_confidence is not None else 2.0 / args.num_hypotheses
    views = scene.load_views()
    out.mkdir(parents=True, exist_ok=True)
    with timer.stage("fuse"):
        clouds = [backproject(m, v.camera, args.stride, min_conf, v.image) for m, v in zip(maps_list, views)]
        cloud = merge_clouds(clouds, voxel)
    write_ply(out / "cloud.ply", cloud)
    return {"points": len(cloud), "voxel": voxel, "min_confidence": min_conf}


def cmd_eval(args, scene, out, timer):
    from .io import read_ply_mesh  # noqa: F401  (mesh ground truth is read lazily)
    out.mkdir(parents=True, exist_ok=True)
    maps_list = _read_maps(args.maps or out, scene)
    with timer.stage("eval"):
        report = _evaluate(out, scene, maps_list)
        if args.cloud:
            pts = _read_ply_points(args.cloud)
            d = surface_distances(scene, pts)
            report.mesh_rms_pct = float(np.sqrt(np.mean(d ** 2)) / scene.bbox_diag * 100.0)
            (out / "eval.csv").write_text(report.to_csv(), encoding="utf-8")
            (out / "eval.txt").write_text(report.to_text(), encoding="utf-8")
    sys.stdout.write(report.to_text())
    return {"report": report}


def _read_ply_points(path):
    from .exceptions import FormatError
    with open(path, "rb") as f:
        head = []
        while True:
            line = f.readline()
            if not line:
                raise FormatError(f"{path}: PLY header not terminated")
            head.append(line.decode("ascii", "replace").strip())
            if head[-1] == "end_header":
                break
        if "format binary_little_endian 1.0" not in head:
            raise FormatError(f"{path}: expected a binary little-endian PLY")
        n = next(int(h.split()[2]) for h in head if h.startswith("element vertex"))
        props = []
        started = False
        for h in head:
            if h.startswith("element"):
                started = h.startswith("element vertex")
            elif h.startswith("property") and started:
                props.append((h.split()[2], {"float": "<f4", "uchar": "u1"}[h.split()[1]]))
        rec = np.frombuffer(f.read(n * np.dtype(props).itemsize), dtype=props, count=n)
    return np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)


COMMANDS = {"sfs": cmd_sfs, "mvs": cmd_mvs, "joint": cmd_joint, "fuse": cmd_fuse, "eval": cmd_eval}


def run(argv=None):
    """Parse, validate, execute; returns the process exit status."""
    from .io import load_scene
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    timer = _Timer()
    try:
        _validate(args)
        if args.workers is None and os.environ.get("RADMVS_WORKERS"):
            try:
                args.workers = int(os.environ["RADMVS_WORKERS"])
            except ValueError:
                raise ConfigError("RADMVS_WORKERS must be an integer") from None
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        set_workers(args.workers)
        np.random.seed(args.seed)
        out = Path(args.out)
        if args.command == "render":
            extra = cmd_render(args, out, timer)
        else:
            # resolves every referenced path before any artifact is written
            scene = load_scene(args.scene)
            extra = COMMANDS[args.command](args, scene, out, timer)
        extra = {k: v for k, v in extra.items() if k != "report"}
        _write_manifest(out, args, timer, time.perf_counter() - t0, extra)
    except RadMVSError as e:
        sys.stderr.write(f"radmvs: {e.category} error: {e}\n")
        return e.exit_code
    return 0


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
