"""Command-line entry points.

Settings resolve in three layers: built-in defaults, then an optional
key=value config file, then explicit flags. Every value a config file can
set has a flag of the same name, and unknown config keys are rejected
rather than ignored.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .errors import (
    ConfigError,
    FormatError,
    OctfieldError,
    SceneError,
)
from .field import FEATURE_DIM, HIDDEN_DIM, new_field
from .geometry import AnalyticOracle, MeshOracle, load_obj, parse_scene
from .metrics import bench_frame, evaluate, write_bench_csv
from .modelio import load_model, save_model, serialized_bytes
from .octree import DEFAULT_R0, build_octree, storage_bytes
from .render import (
    Camera,
    RenderConfig,
    depth_image,
    normal_image,
    render,
    write_ppm,
)
from .sampling import surface_points
from .trainer import SCHEDULES, TrainConfig, train

ENV_WORKERS = "OCTFIELD_WORKERS"


def _parse_int(s: str) -> int:
    try:
        return int(s)
    except ValueError:
        raise ConfigError(f"expected an integer, got {s!r}")


def _parse_float(s: str) -> float:
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"expected a number, got {s!r}")


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_vec3(s: str) -> np.ndarray:
    parts = s.split(",")
    if len(parts) != 3:
        raise ConfigError(f"expected x,y,z, got {s!r}")
    return np.array([_parse_float(p) for p in parts])


def _parse_floats(s: str) -> list:
    return [_parse_float(p) for p in s.split(",") if p.strip()]


def _parse_ints(s: str) -> list:
    return [_parse_int(p) for p in s.split(",") if p.strip()]


def default_workers() -> int:
    env = os.environ.get(ENV_WORKERS)
    if env is not None:
        n = _parse_int(env)
        if n < 1:
            raise ConfigError(f"{ENV_WORKERS} must be >= 1")
        return n
    return os.cpu_count() or 1


# Option tables. Each entry: name, parser, default, help. The same parser
# handles both the flag string and a config-file value, so the two layers
# cannot drift apart.

_FIT_OPTS = [
    ("scene", str, None, "scene file with one s-expression shape"),
    ("mesh", str, None, "OBJ mesh file (normalized into the domain)"),
    ("out", str, None, "output model path (required)"),
    ("log", str, None, "training log CSV (default: <out>.train.csv)"),
    ("max-level", _parse_int, 4, "finest octree level"),
    ("r0", _parse_int, DEFAULT_R0, "level-0 grid resolution"),
    ("feature-dim", _parse_int, FEATURE_DIM, "feature vector width"),
    ("hidden-dim", _parse_int, HIDDEN_DIM, "decoder hidden width"),
    ("build-samples", _parse_int, 2**17, "surface samples for occupancy"),
    ("corner-test", _parse_bool, True, "also allocate voxels by corner distance"),
    ("epochs", _parse_int, 30, "training epochs"),
    ("points-per-epoch", _parse_int, 500_000, "resampled training points per epoch"),
    ("batch-size", _parse_int, 512, "minibatch size"),
    ("learning-rate", _parse_float, 1e-3, "Adam step size"),
    ("schedule", str, "joint", f"one of {', '.join(SCHEDULES)}"),
    ("progressive-interval", _parse_int, 100, "epochs per added level (progressive)"),
    ("seed", _parse_int, 0, "seed for init and sampling"),
    ("checkpoint-every", _parse_int, 0, "epochs between checkpoints (0 = off)"),
    ("checkpoint-dir", str, None, "directory for checkpoint models"),
    ("workers", _parse_int, None, "worker threads (default: machine parallelism)"),
]

_CAMERA_OPTS = [
    ("cam-pos", _parse_vec3, np.array([0.0, 0.0, 4.0]), "camera position x,y,z"),
    ("look-at", _parse_vec3, np.zeros(3), "aim point x,y,z"),
    ("up", _parse_vec3, np.array([0.0, 1.0, 0.0]), "up hint x,y,z"),
    ("fov", _parse_float, 30.0, "vertical field of view, degrees"),
    ("width", _parse_int, 256, "image width in pixels"),
    ("height", _parse_int, 256, "image height in pixels"),
]

_RENDER_OPTS = _CAMERA_OPTS + [
    ("out", str, None, "output PPM path (required)"),
    ("normal-out", str, None, "also write a normal-map PPM here"),
    ("depth-out", str, None, "also write a depth PPM here"),
    ("lod", _parse_float, None, "detail level, fractional allowed"),
    ("lod-thresholds", _parse_floats, None,
     "distance breakpoints for automatic detail selection"),
    ("max-lod", _parse_int, None, "truncate the model to this level on load"),
    ("delta", _parse_float, 3e-4, "surface hit threshold"),
    ("far", _parse_float, 5.0, "far plane"),
    ("max-iters", _parse_int, 200, "sphere-trace step cap"),
    ("workers", _parse_int, None, "worker threads (default: machine parallelism)"),
]

_EVAL_OPTS = [
    ("scene", str, None, "reference scene file"),
    ("mesh", str, None, "reference OBJ file"),
    ("out-csv", str, None, "metrics CSV path (required)"),
    ("max-lod", _parse_int, None, "truncate the model to this level on load"),
    ("chamfer-points", _parse_int, 2**14, "surface samples per Chamfer side"),
    ("giou-points", _parse_int, 2**14, "uniform samples for volumetric IoU"),
    ("cameras", _parse_int, 8, "view count for image metrics"),
    ("resolution", _parse_int, 128, "image metric resolution"),
    ("seed", _parse_int, 0, "sampling seed"),
    ("workers", _parse_int, None, "worker threads (default: machine parallelism)"),
]

_BENCH_OPTS = _CAMERA_OPTS + [
    ("out", str, None, "benchmark CSV path (required)"),
    ("resolutions", _parse_ints, [64, 128, 256], "image sizes to time"),
    ("lods", _parse_floats, None, "detail levels to time (default: finest only)"),
    ("runs", _parse_int, 5, "timing repetitions per row"),
    ("max-lod", _parse_int, None, "truncate the model to this level on load"),
    ("workers", _parse_int, None, "worker threads (default: machine parallelism)"),
]

_INSPECT_OPTS = [
    ("max-lod", _parse_int, None, "truncate the model to this level on load"),
]


def _add_options(sub: argparse.ArgumentParser, opts) -> None:
    sub.add_argument("--config", default=None, help="key=value settings file")
    for name, _, default, help_text in opts:
        shown = default if default is None or np.isscalar(default) else list(np.ravel(default))
        sub.add_argument(
            f"--{name}", default=None, metavar="V",
            help=f"{help_text} (default: {shown})",
        )


def _read_config_file(path) -> dict:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    out: dict = {}
    with open(path) as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{ln}: expected key=value")
            key, val = (part.strip() for part in line.split("=", 1))
            if key in out:
                raise ConfigError(f"{path}:{ln}: duplicate key {key!r}")
            out[key] = val
    return out


def _resolve(args: argparse.Namespace, opts) -> dict:
    """Layer defaults, config file, and flags into one settings dict."""
    file_vals = _read_config_file(args.config) if args.config else {}
    known = {name for name, _, _, _ in opts}
    unknown = set(file_vals) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    out: dict = {}
    for name, parse, default, _ in opts:
        flag = getattr(args, name.replace("-", "_"))
        if flag is not None:
            out[name] = parse(flag)
        elif name in file_vals:
            out[name] = parse(file_vals[name])
        else:
            out[name] = default
    return out


def _require(cfg: dict, key: str) -> None:
    if cfg[key] is None:
        raise ConfigError(f"--{key} is required")


def _workers(cfg: dict) -> int:
    return cfg["workers"] if cfg["workers"] is not None else default_workers()


def _load_oracle(cfg: dict):
    scene, mesh = cfg["scene"], cfg["mesh"]
    if (scene is None) == (mesh is None):
        raise ConfigError("give exactly one of --scene or --mesh")
    if scene is not None:
        if not os.path.isfile(scene):
            raise ConfigError(f"scene file not found: {scene}")
        with open(scene) as fh:
            return AnalyticOracle(parse_scene(fh.read()))
    if not os.path.isfile(mesh):
        raise ConfigError(f"mesh file not found: {mesh}")
    return MeshOracle(load_obj(mesh))


def _camera(cfg: dict) -> Camera:
    return Camera(
        cfg["cam-pos"], cfg["look-at"], cfg["up"],
        cfg["fov"], cfg["width"], cfg["height"],
    )


def _load_field(path, max_lod):
    if not os.path.isfile(path):
        raise ConfigError(f"model file not found: {path}")
    return load_model(path, max_lod=max_lod)


def cmd_fit(args: argparse.Namespace) -> int:
    cfg = _resolve(args, _FIT_OPTS)
    _require(cfg, "out")
    oracle = _load_oracle(cfg)
    samples = surface_points(oracle, cfg["build-samples"], cfg["seed"])
    svo = build_octree(
        oracle, cfg["max-level"], samples, r0=cfg["r0"],
        corner_test=cfg["corner-test"],
    )
    fld = new_field(svo, m=cfg["feature-dim"], h=cfg["hidden-dim"], seed=cfg["seed"])
    log_path = cfg["log"] if cfg["log"] is not None else cfg["out"] + ".train.csv"
    tc = TrainConfig(
        epochs=cfg["epochs"],
        points_per_epoch=cfg["points-per-epoch"],
        batch_size=cfg["batch-size"],
        learning_rate=cfg["learning-rate"],
        schedule=cfg["schedule"],
        progressive_interval=cfg["progressive-interval"],
        rng_seed=cfg["seed"],
        workers=_workers(cfg),
        log_path=log_path,
        checkpoint_every=cfg["checkpoint-every"],
        checkpoint_dir=cfg["checkpoint-dir"],
    )
    work, history = train(oracle, fld, tc)
    save_model(cfg["out"], work)
    last = history[-1].level_losses if history else []
    shown = ", ".join("-" if np.isnan(v) else f"{v:.3g}" for v in last)
    print(f"model written to {cfg['out']}")
    print(f"final per-level losses: [{shown}]  (log: {log_path})")
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    cfg = _resolve(args, _RENDER_OPTS)
    _require(cfg, "out")
    fld = _load_field(args.model, cfg["max-lod"])
    rc = RenderConfig(
        delta=cfg["delta"],
        max_iters=cfg["max-iters"],
        far_plane=cfg["far"],
        lod=cfg["lod"],
        lod_thresholds=cfg["lod-thresholds"],
        workers=_workers(cfg),
    )
    fb, report = render(_camera(cfg), fld, rc)
    write_ppm(cfg["out"], fb.color)
    if cfg["normal-out"] is not None:
        write_ppm(cfg["normal-out"], normal_image(fb))
    if cfg["depth-out"] is not None:
        write_ppm(cfg["depth-out"], depth_image(fb, rc.far_plane))
    print(
        f"{cfg['out']}: lod {report.lod:g}, {report.visible} hit pixels, "
        f"{report.evals} decoder evals, trace {report.ms_trace:.1f} ms, "
        f"normals {report.ms_normals:.1f} ms"
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _resolve(args, _EVAL_OPTS)
    _require(cfg, "out-csv")
    fld = _load_field(args.model, cfg["max-lod"])
    oracle = _load_oracle(cfg)
    rc = RenderConfig(workers=_workers(cfg))
    report = evaluate(
        fld, oracle,
        chamfer_points=cfg["chamfer-points"],
        giou_points=cfg["giou-points"],
        n_cameras=cfg["cameras"],
        image_resolution=cfg["resolution"],
        rng_seed=cfg["seed"],
        config=rc,
    )
    report.write_csv(cfg["out-csv"])
    print(report.to_text())
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    cfg = _resolve(args, _BENCH_OPTS)
    _require(cfg, "out")
    fld = _load_field(args.model, cfg["max-lod"])
    rc = RenderConfig(workers=_workers(cfg))
    rows = bench_frame(
        fld, _camera(cfg), cfg["resolutions"],
        lods=cfg["lods"], runs=cfg["runs"], config=rc,
    )
    write_bench_csv(cfg["out"], rows)
    print(f"benchmark written to {cfg['out']} ({len(rows)} rows)")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    cfg = _resolve(args, _INSPECT_OPTS)
    fld = _load_field(args.model, cfg["max-lod"])
    svo = fld.svo
    print(f"model: {args.model}")
    print(
        f"r0 {svo.r0}, levels 0..{svo.max_level}, "
        f"feature dim {fld.feature_dim}, hidden dim {fld.hidden_dim}"
    )
    for ell in range(svo.max_level + 1):
        res = svo.resolution(ell)
        print(f"  level {ell}: {svo.voxel_count(ell):>8} voxels at {res}^3")
    print(f"corner features: {svo.corner_count}")
    print(f"storage estimate (m+1)|V|: {storage_bytes(svo, fld.feature_dim)} values")
    print(f"file size: {serialized_bytes(fld)} bytes")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="octfield",
        description="Fit, render, and evaluate sparse-octree neural distance fields.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="train a model on a scene or mesh")
    _add_options(p, _FIT_OPTS)
    p.set_defaults(run=cmd_fit)

    p = sub.add_parser("render", help="sphere-trace a model to a PPM image")
    p.add_argument("model", help="model file")
    _add_options(p, _RENDER_OPTS)
    p.set_defaults(run=cmd_render)

    p = sub.add_parser("eval", help="geometry and image metrics against ground truth")
    p.add_argument("model", help="model file")
    _add_options(p, _EVAL_OPTS)
    p.set_defaults(run=cmd_eval)

    p = sub.add_parser("bench", help="frame timing table")
    p.add_argument("model", help="model file")
    _add_options(p, _BENCH_OPTS)
    p.set_defaults(run=cmd_bench)

    p = sub.add_parser("inspect", help="print a model file's header and sizes")
    p.add_argument("model", help="model file")
    _add_options(p, _INSPECT_OPTS)
    p.set_defaults(run=cmd_inspect)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.run(args)
    except (ConfigError, SceneError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OctfieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
