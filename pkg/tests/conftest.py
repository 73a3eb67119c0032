"""Shared fixtures.

The trained models are session-scoped because they are the expensive part
of the suite: every shape follows the same desk-scale recipe (octree level
4, 50k points per epoch, 30 epochs), and several test modules reuse them.
Cheap throwaway octrees and fields stay function-scoped.
"""

import time

import numpy as np
import pytest

import meshes
from octfield.field import NeuralField, new_field
from octfield.geometry import (
    AnalyticOracle,
    MeshOracle,
    box,
    difference,
    load_obj,
    sphere,
    torus,
)
from octfield.octree import build_octree
from octfield.sampling import surface_points
from octfield.trainer import TrainConfig, train

DESK_EPOCHS = 30
DESK_POINTS = 50_000
BUILD_SAMPLES = 2**15

# ---------------------------------------------------------------- reporting

_criterion_lines = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion, then assert."""

    def record(num: int, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {num:2d}: {detail}"
        _criterion_lines[num] = line
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for num in sorted(_criterion_lines):
            terminalreporter.write_line(_criterion_lines[num])


# ------------------------------------------------------------------ oracles


@pytest.fixture(scope="session")
def sphere_oracle():
    return AnalyticOracle(sphere(0.5))


@pytest.fixture(scope="session")
def torus_oracle():
    return AnalyticOracle(torus(0.5, 0.2))


@pytest.fixture(scope="session")
def csg_oracle():
    return AnalyticOracle(difference(box(0.4, 0.4, 0.4), sphere(0.5)))


@pytest.fixture(scope="session")
def mesh_obj_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("mesh") / "icosphere.obj"
    meshes.write_obj(path, meshes.icosphere(radius=0.55, subdiv=1))
    return path


@pytest.fixture(scope="session")
def mesh_oracle(mesh_obj_path):
    return MeshOracle(load_obj(mesh_obj_path))


# ----------------------------------------------------------- trained models


def desk_train(oracle, *, seed=0, epochs=DESK_EPOCHS, points=DESK_POINTS,
               schedule="joint", donor_decoders=None, max_level=4, label=""):
    """The one training recipe every fixture shape goes through."""
    t0 = time.time()
    pts = surface_points(oracle, BUILD_SAMPLES, rng_seed=seed)
    svo = build_octree(oracle, max_level, pts)
    fld = new_field(svo, seed=seed)
    if donor_decoders is not None:
        fld = NeuralField(svo, fld.Z, [d.astype(np.float64) for d in donor_decoders])
    cfg = TrainConfig(
        epochs=epochs,
        points_per_epoch=points,
        batch_size=512,
        learning_rate=1e-3,
        schedule=schedule,
        rng_seed=seed,
        workers=1,
    )
    work, history = train(oracle, fld, cfg)
    print(f"[fixture] {label or 'model'}: {time.time() - t0:.0f}s "
          f"({epochs} epochs x {points} points)")
    return work, history, time.time() - t0


@pytest.fixture(scope="session")
def desk_sphere(sphere_oracle):
    fld, history, elapsed = desk_train(sphere_oracle, label="sphere")
    return {"fld": fld, "history": history, "oracle": sphere_oracle,
            "seconds": elapsed, "analytic": True, "name": "sphere"}


@pytest.fixture(scope="session")
def desk_torus(torus_oracle):
    fld, history, elapsed = desk_train(torus_oracle, label="torus")
    return {"fld": fld, "history": history, "oracle": torus_oracle,
            "seconds": elapsed, "analytic": True, "name": "torus"}


@pytest.fixture(scope="session")
def desk_csg(csg_oracle):
    fld, history, elapsed = desk_train(csg_oracle, label="box-minus-sphere")
    return {"fld": fld, "history": history, "oracle": csg_oracle,
            "seconds": elapsed, "analytic": True, "name": "box-minus-sphere"}


@pytest.fixture(scope="session")
def desk_mesh(mesh_oracle):
    fld, history, elapsed = desk_train(mesh_oracle, label="obj mesh")
    return {"fld": fld, "history": history, "oracle": mesh_oracle,
            "seconds": elapsed, "analytic": False, "name": "obj mesh"}


@pytest.fixture(scope="session")
def desk_shapes(desk_sphere, desk_torus, desk_csg, desk_mesh):
    return [desk_sphere, desk_torus, desk_csg, desk_mesh]


@pytest.fixture(scope="session")
def frozen_torus(desk_sphere, torus_oracle):
    """Features-only torus run reusing the sphere model's decoders."""
    fld, history, elapsed = desk_train(
        torus_oracle,
        schedule="frozen_decoder",
        donor_decoders=desk_sphere["fld"].decoders,
        label="frozen-decoder torus",
    )
    return {"fld": fld, "history": history, "oracle": torus_oracle,
            "seconds": elapsed, "donor": desk_sphere["fld"].decoders}


@pytest.fixture(scope="session")
def ref_sphere(sphere_oracle):
    """Sphere model the renderer accuracy check is graded against.

    Two stages: the usual fit, then a short 10x-lower-rate polish. Adam at
    a fixed rate leaves each surface point jittering about its optimum at
    an amplitude set by the rate, not by data volume (30x150k points trains
    no closer), and the polish is what brings that floor under the hit
    tolerance. One extra octree level over the desk recipe gives the grid
    the resolution to benefit."""
    t0 = time.time()
    pts = surface_points(sphere_oracle, BUILD_SAMPLES, rng_seed=0)
    svo = build_octree(sphere_oracle, 5, pts)
    fld = new_field(svo, seed=0)
    work, history = train(sphere_oracle, fld, TrainConfig(
        epochs=30, points_per_epoch=DESK_POINTS, rng_seed=0, workers=1))
    # resume from the serialized weights, as a saved run would
    work = NeuralField(work.svo, work.Z.astype(np.float32),
                       [d.astype(np.float32) for d in work.decoders])
    work, _ = train(sphere_oracle, work, TrainConfig(
        epochs=10, points_per_epoch=DESK_POINTS, learning_rate=1e-4,
        rng_seed=100, workers=1))
    elapsed = time.time() - t0
    print(f"[fixture] reference sphere: {elapsed:.0f}s (30+10 epochs)")
    return {"fld": work, "history": history, "oracle": sphere_oracle,
            "seconds": elapsed}


# -------------------------------------------------------------- small stuff


@pytest.fixture(scope="session")
def tiny_field(sphere_oracle):
    """Untrained level-2 sphere field, small feature/hidden dims. Enough
    structure for mechanics tests without any training cost."""
    pts = surface_points(sphere_oracle, 4096, rng_seed=3)
    svo = build_octree(sphere_oracle, 2, pts)
    return new_field(svo, m=8, h=16, seed=3)


@pytest.fixture(scope="session")
def quick_sphere(sphere_oracle):
    """Small level-3 sphere field trained in under a minute: accurate
    enough for render and metric checks with real tolerances, far cheaper
    than the full-size desk models."""
    pts = surface_points(sphere_oracle, 4096, rng_seed=1)
    svo = build_octree(sphere_oracle, 3, pts)
    fld = new_field(svo, m=8, h=16, seed=1)
    work, _ = train(
        sphere_oracle, fld,
        TrainConfig(epochs=40, points_per_epoch=20_000, rng_seed=1, workers=1),
    )
    return work
