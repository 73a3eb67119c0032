"""The octfield command line: subcommands, config layering, exit codes."""

import subprocess
import sys

import numpy as np
import pytest

from octfield.cli import main
from octfield.field import empty_space_value
from octfield.modelio import load_model, save_model
from octfield.render import query_field

PPM = "P6\n{w} {h}\n255\n"


def _ppm_ok(path, w, h):
    buf = path.read_bytes()
    head = PPM.format(w=w, h=h).encode()
    return buf.startswith(head) and len(buf) == len(head) + w * h * 3


@pytest.fixture(scope="module")
def work_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def sphere_scene(work_dir):
    path = work_dir / "sphere.scene"
    path.write_text("; unit test shape\n(sphere 0.5)\n")
    return path


@pytest.fixture(scope="module")
def model_path(work_dir, quick_sphere):
    """The trained session sphere, saved where the CLI can load it."""
    path = work_dir / "sphere.nsdf"
    save_model(path, quick_sphere)
    return path


@pytest.fixture(scope="module")
def fit_result(work_dir):
    scene = work_dir / "small.scene"
    scene.write_text("(sphere 0.45)\n")
    out = work_dir / "fit.nsdf"
    rc = main([
        "fit", "--scene", str(scene), "--out", str(out),
        "--max-level", "2", "--build-samples", "2048",
        "--epochs", "2", "--points-per-epoch", "1500",
        "--seed", "1", "--workers", "1",
    ])
    return {"rc": rc, "scene": scene, "out": out}


# ---------------------------------------------------------------------------
# fit


def test_fit_writes_model_and_log(fit_result):
    assert fit_result["rc"] == 0
    fld = load_model(fit_result["out"])
    assert fld.max_level == 2
    # the domain center lies outside every level-2 shell voxel, so a
    # renderer query falls back to the (always positive) empty-space value
    center = np.zeros((1, 3))
    got = query_field(fld, center, 2.0)
    assert np.array_equal(got, empty_space_value(fld.svo, center))
    assert got[0] > 0.0
    log = fit_result["out"].with_name(fit_result["out"].name + ".train.csv")
    lines = log.read_text().strip().splitlines()
    assert lines[0] == "epoch,loss_l1,loss_l2,seconds"
    assert len(lines) == 3


def test_fit_same_seed_is_bit_identical(fit_result, work_dir):
    out2 = work_dir / "fit-again.nsdf"
    rc = main([
        "fit", "--scene", str(fit_result["scene"]), "--out", str(out2),
        "--max-level", "2", "--build-samples", "2048",
        "--epochs", "2", "--points-per-epoch", "1500",
        "--seed", "1", "--workers", "1",
    ])
    assert rc == 0
    assert out2.read_bytes() == fit_result["out"].read_bytes()


def test_fit_on_mesh(work_dir, mesh_obj_path):
    out = work_dir / "mesh.nsdf"
    rc = main([
        "fit", "--mesh", str(mesh_obj_path), "--out", str(out),
        "--max-level", "2", "--build-samples", "1024",
        "--epochs", "1", "--points-per-epoch", "1000",
        "--seed", "2", "--workers", "1",
    ])
    assert rc == 0
    assert load_model(out).max_level == 2


def test_fit_usage_errors(work_dir, sphere_scene, mesh_obj_path):
    out = str(work_dir / "unused.nsdf")
    # no output path
    assert main(["fit", "--scene", str(sphere_scene)]) == 2
    # neither or both shape sources
    assert main(["fit", "--out", out]) == 2
    assert main([
        "fit", "--scene", str(sphere_scene), "--mesh", str(mesh_obj_path),
        "--out", out,
    ]) == 2
    # nonexistent inputs
    assert main(["fit", "--scene", str(work_dir / "no.scene"), "--out", out]) == 2
    assert main(["fit", "--mesh", str(work_dir / "no.obj"), "--out", out]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_fit_divergence_is_runtime_failure(work_dir, sphere_scene):
    rc = main([
        "fit", "--scene", str(sphere_scene), "--out", str(work_dir / "div.nsdf"),
        "--max-level", "2", "--build-samples", "1024",
        "--epochs", "1", "--points-per-epoch", "1000",
        "--learning-rate", "1e200", "--workers", "1",
    ])
    assert rc == 1


def test_fit_rejects_bad_schedule(work_dir, sphere_scene):
    rc = main([
        "fit", "--scene", str(sphere_scene), "--out", str(work_dir / "x.nsdf"),
        "--schedule", "sideways",
    ])
    assert rc == 2


# ---------------------------------------------------------------------------
# render


def test_render_writes_ppm(work_dir, model_path):
    out = work_dir / "frame.ppm"
    rc = main([
        "render", str(model_path), "--out", str(out),
        "--width", "32", "--height", "32", "--workers", "1",
    ])
    assert rc == 0
    assert _ppm_ok(out, 32, 32)


def test_render_lod_integer_and_float_agree(work_dir, model_path):
    a = work_dir / "lod-int.ppm"
    b = work_dir / "lod-float.ppm"
    base = ["render", str(model_path), "--width", "24", "--height", "24",
            "--workers", "1"]
    assert main(base + ["--out", str(a), "--lod", "2"]) == 0
    assert main(base + ["--out", str(b), "--lod", "2.0"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_render_is_deterministic(work_dir, model_path):
    a = work_dir / "rep1.ppm"
    b = work_dir / "rep2.ppm"
    base = ["render", str(model_path), "--width", "24", "--height", "24",
            "--workers", "1"]
    assert main(base + ["--out", str(a)]) == 0
    assert main(base + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_render_aux_images(work_dir, model_path):
    out = work_dir / "main.ppm"
    nrm = work_dir / "nrm.ppm"
    dep = work_dir / "dep.ppm"
    rc = main([
        "render", str(model_path), "--out", str(out),
        "--normal-out", str(nrm), "--depth-out", str(dep),
        "--width", "20", "--height", "16", "--workers", "1",
    ])
    assert rc == 0
    for path in (out, nrm, dep):
        assert _ppm_ok(path, 20, 16)


def test_render_lod_out_of_range(work_dir, model_path):
    rc = main([
        "render", str(model_path), "--out", str(work_dir / "x.ppm"),
        "--lod", "9", "--width", "16", "--height", "16", "--workers", "1",
    ])
    assert rc == 2


def test_render_missing_or_broken_model(work_dir):
    out = str(work_dir / "x.ppm")
    assert main(["render", str(work_dir / "no.nsdf"), "--out", out]) == 2
    broken = work_dir / "broken.nsdf"
    broken.write_bytes(b"not a model at all")
    assert main(["render", str(broken), "--out", out]) == 2


def test_render_max_lod_truncates(work_dir, model_path, capsys):
    out = work_dir / "coarse.ppm"
    rc = main([
        "render", str(model_path), "--out", str(out), "--max-lod", "1",
        "--width", "16", "--height", "16", "--workers", "1",
    ])
    assert rc == 0
    assert "lod 1" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# eval and bench


def test_eval_writes_metrics_csv(work_dir, model_path, sphere_scene):
    out = work_dir / "metrics.csv"
    rc = main([
        "eval", str(model_path), "--scene", str(sphere_scene),
        "--out-csv", str(out), "--chamfer-points", "256",
        "--giou-points", "512", "--cameras", "1", "--resolution", "24",
        "--workers", "1",
    ])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "level,chamfer_l1_x1000,accuracy_x1000,giou,iiou,normal_l2,storage"
    assert len(lines) == 4  # one row per level 1..3


def test_eval_needs_exactly_one_reference(work_dir, model_path, sphere_scene,
                                          mesh_obj_path):
    out = str(work_dir / "m.csv")
    assert main(["eval", str(model_path), "--out-csv", out]) == 2
    assert main([
        "eval", str(model_path), "--scene", str(sphere_scene),
        "--mesh", str(mesh_obj_path), "--out-csv", out,
    ]) == 2


def test_bench_writes_csv(work_dir, model_path):
    out = work_dir / "bench.csv"
    rc = main([
        "bench", str(model_path), "--out", str(out),
        "--resolutions", "16,24", "--runs", "5",
        "--workers", "1",
    ])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "resolution,pixels,ms_trace,ms_normals,evals"
    assert len(lines) == 3


def test_bench_rejects_few_runs(work_dir, model_path):
    rc = main([
        "bench", str(model_path), "--out", str(work_dir / "b.csv"),
        "--resolutions", "16", "--runs", "3", "--workers", "1",
    ])
    assert rc == 2


def test_inspect_prints_summary(model_path, capsys):
    assert main(["inspect", str(model_path)]) == 0
    out = capsys.readouterr().out
    assert "levels 0..3" in out
    assert "storage estimate" in out
    assert "file size" in out


# ---------------------------------------------------------------------------
# config files and environment


def test_config_file_layers_under_flags(work_dir, model_path):
    cfg = work_dir / "render.cfg"
    cfg.write_text("width = 24\nheight = 24  # both small\nworkers = 1\n")
    out = work_dir / "layered.ppm"
    rc = main([
        "render", str(model_path), "--config", str(cfg),
        "--out", str(out), "--width", "48",
    ])
    assert rc == 0
    assert _ppm_ok(out, 48, 24)  # flag beats file, file beats default


def test_config_file_errors(work_dir, model_path):
    out = str(work_dir / "x.ppm")
    unknown = work_dir / "unknown.cfg"
    unknown.write_text("widht = 24\n")
    assert main(["render", str(model_path), "--config", str(unknown),
                 "--out", out]) == 2

    duped = work_dir / "duped.cfg"
    duped.write_text("width = 24\nwidth = 32\n")
    assert main(["render", str(model_path), "--config", str(duped),
                 "--out", out]) == 2

    noeq = work_dir / "noeq.cfg"
    noeq.write_text("width 24\n")
    assert main(["render", str(model_path), "--config", str(noeq),
                 "--out", out]) == 2

    assert main(["render", str(model_path),
                 "--config", str(work_dir / "missing.cfg"), "--out", out]) == 2


def test_workers_env_validation(work_dir, model_path, monkeypatch):
    out = work_dir / "env.ppm"
    args = ["render", str(model_path), "--out", str(out),
            "--width", "16", "--height", "16"]
    monkeypatch.setenv("OCTFIELD_WORKERS", "0")
    assert main(args) == 2
    monkeypatch.setenv("OCTFIELD_WORKERS", "two")
    assert main(args) == 2
    monkeypatch.setenv("OCTFIELD_WORKERS", "2")
    assert main(args) == 0
    assert _ppm_ok(out, 16, 16)


# ---------------------------------------------------------------------------
# the installed entry point


def test_module_invocation_usage_error():
    proc = subprocess.run(
        [sys.executable, "-m", "octfield.cli"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2  # argparse: a subcommand is required


def test_module_invocation_render_error(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "octfield.cli", "render",
         str(tmp_path / "no.nsdf"), "--out", str(tmp_path / "x.ppm")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 2
    assert "model file not found" in proc.stderr
