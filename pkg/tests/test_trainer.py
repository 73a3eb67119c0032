"""Loss, Adam, schedules, determinism, and the training loop."""

import csv

import numpy as np
import pytest

from octfield.errors import ConfigError, TrainingDiverged
from octfield.field import Decoder, new_field
from octfield.geometry import AnalyticOracle, sphere
from octfield.octree import build_octree, morton_decode
from octfield.sampling import SampleSet, surface_points
from octfield.trainer import (
    AdamState,
    TrainConfig,
    active_levels_for,
    adam_step,
    loss_batch,
    train,
)


def _tiny_setup(seed=0, max_level=2, m=4, h=8):
    oracle = AnalyticOracle(sphere(0.5))
    surf = surface_points(oracle, 1024, rng_seed=seed)
    svo = build_octree(oracle, max_level, surf)
    fld = new_field(svo, m=m, h=h, seed=seed)
    return oracle, fld


def _work_copy(fld):
    from octfield.field import NeuralField

    return NeuralField(
        fld.svo, fld.Z.astype(np.float64), [d.astype(np.float64) for d in fld.decoders]
    )


# ---------------------------------------------------------------------- loss


def test_loss_zero_when_prediction_matches():
    oracle, fld = _tiny_setup()
    pts = surface_points(oracle, 64, rng_seed=1)
    target = oracle(pts)
    samples = SampleSet(pts, target, np.zeros(len(pts), dtype=np.int8))
    work = _work_copy(fld)
    loss, _, sums = loss_batch(
        work, samples, [1, 2], predict_fn=lambda x, L: target.copy()
    )
    assert loss == 0.0


def test_loss_hand_computed_value():
    # one voxel, m=1, h=2, every number chosen by hand
    svo = build_octree(None, 1, np.array([[0.125, 0.125, 0.125]]))
    assert svo.corner_count == 8
    lv = svo.levels[1]
    # feature value j at the corner whose lattice offset is corner j
    Z = np.zeros((8, 1))
    for j in range(8):
        Z[lv.corners[0, j], 0] = float(j)
    dec = Decoder(
        W1=np.array([[1.0, 1.0, 1.0, 2.0], [0.0, 0.0, 0.0, 0.0]]),
        b1=np.array([0.1, -10.0]),
        W2=np.array([[2.0, 5.0]]),
        b2=np.array([0.25]),
    )
    from octfield.field import NeuralField

    fld = NeuralField(svo, Z, [dec])
    # query at the voxel center: psi = mean(0..7) = 3.5
    # pre_1 = 0.125*3 + 2*3.5 + 0.1 = 7.475, unit 2 is dead (b1 = -10)
    # out = 2*7.475 + 0.25 = 15.2; target 0.2 -> residual 15.0 -> loss 225
    pts = np.array([[0.125, 0.125, 0.125]])
    samples = SampleSet(pts, np.array([0.2]), np.zeros(1, dtype=np.int8))
    loss, grads, sums = loss_batch(fld, samples, [1])
    assert loss == pytest.approx(225.0, abs=1e-9)
    assert sums[0] == pytest.approx(225.0, abs=1e-9)


def test_loss_level_additivity():
    oracle, fld = _tiny_setup(seed=2)
    work = _work_copy(fld)
    pts = surface_points(oracle, 128, rng_seed=3)
    samples = SampleSet(pts, oracle(pts), np.zeros(len(pts), dtype=np.int8))
    loss_both, _, sums_both = loss_batch(work, samples, [1, 2])
    loss_1, _, _ = loss_batch(work, samples, [1])
    loss_2, _, _ = loss_batch(work, samples, [2])
    assert loss_both == pytest.approx(loss_1 + loss_2, rel=1e-12)
    n = len(pts)
    assert loss_both == pytest.approx((sums_both[0] + sums_both[1]) / n, rel=1e-12)


def test_loss_rejects_bad_level_sets():
    oracle, fld = _tiny_setup(seed=4)
    work = _work_copy(fld)
    pts = surface_points(oracle, 16, rng_seed=5)
    samples = SampleSet(pts, oracle(pts), np.zeros(len(pts), dtype=np.int8))
    with pytest.raises(ConfigError):
        loss_batch(work, samples, [])
    with pytest.raises(ConfigError):
        loss_batch(work, samples, [0, 1])
    with pytest.raises(ConfigError):
        loss_batch(work, samples, [1, 3])


def test_loss_gradients_match_finite_differences():
    oracle, fld = _tiny_setup(seed=6)
    work = _work_copy(fld)
    pts = surface_points(oracle, 32, rng_seed=7)
    samples = SampleSet(pts, oracle(pts), np.zeros(len(pts), dtype=np.int8))
    from octfield.field import FieldGradients

    grads = FieldGradients.zeros(work.Z, 2)
    loss, grads, _ = loss_batch(work, samples, [1, 2], grads=grads)
    rng = np.random.default_rng(8)
    step = 1e-6
    touched = np.flatnonzero(np.abs(grads.dZ).sum(axis=1) > 0)
    for _ in range(6):
        r = int(rng.choice(touched))
        c = int(rng.integers(work.Z.shape[1]))
        saved = work.Z[r, c]
        work.Z[r, c] = saved + step
        up, _, _ = loss_batch(work, samples, [1, 2])
        work.Z[r, c] = saved - step
        down, _, _ = loss_batch(work, samples, [1, 2])
        work.Z[r, c] = saved
        fd = (up - down) / (2 * step)
        assert grads.dZ[r, c] == pytest.approx(fd, rel=1e-4, abs=1e-7)


# ---------------------------------------------------------------------- adam


def test_adam_zero_gradient_keeps_params():
    params = {"a": np.ones((3, 2)), "b": np.full(4, 2.0)}
    grads = {"a": np.zeros((3, 2)), "b": np.zeros(4)}
    state = AdamState.for_params(params)
    adam_step(params, grads, state, lr=0.1)
    np.testing.assert_array_equal(params["a"], 1.0)
    np.testing.assert_array_equal(params["b"], 2.0)
    assert state.step == 1


def test_adam_skips_params_without_gradients():
    params = {"a": np.ones(2), "b": np.full(2, 5.0)}
    state = AdamState.for_params(params)
    adam_step(params, {"a": np.ones(2)}, state, lr=0.1)
    assert not np.array_equal(params["a"], 1.0)
    np.testing.assert_array_equal(params["b"], 5.0)


def test_adam_matches_scalar_reference():
    # five steps of textbook Adam on a single scalar with constant gradient
    beta1, beta2, eps, lr = 0.9, 0.999, 1e-8, 0.001
    params = {"x": np.array([1.0])}
    state = AdamState.for_params(params)
    m = v = 0.0
    ref = 1.0
    for t in range(1, 6):
        g = 3.0
        adam_step(params, {"x": np.array([g])}, state, lr=lr)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        ref -= lr * mhat / (np.sqrt(vhat) + eps)
        assert params["x"][0] == pytest.approx(ref, abs=1e-12)


def test_adam_rejects_non_finite():
    params = {"x": np.ones(2)}
    state = AdamState.for_params(params)
    with pytest.raises(TrainingDiverged):
        adam_step(params, {"x": np.array([np.nan, 0.0])}, state, lr=0.1)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_detects_divergence():
    oracle, fld = _tiny_setup(seed=9)
    config = TrainConfig(epochs=2, points_per_epoch=700, learning_rate=1e200, rng_seed=9)
    with pytest.raises(TrainingDiverged):
        train(oracle, fld, config)


# ----------------------------------------------------------------- schedules


def test_active_levels_for_schedules():
    assert active_levels_for("joint", 0, 100, 4) == [1, 2, 3, 4]
    assert active_levels_for("joint", 57, 100, 4) == [1, 2, 3, 4]
    assert active_levels_for("frozen_decoder", 3, 100, 4) == [1, 2, 3, 4]
    # progressive starts with the finest level and adds coarser ones
    assert active_levels_for("progressive", 0, 2, 4) == [4]
    assert active_levels_for("progressive", 1, 2, 4) == [4]
    assert active_levels_for("progressive", 2, 2, 4) == [3, 4]
    assert active_levels_for("progressive", 4, 2, 4) == [2, 3, 4]
    assert active_levels_for("progressive", 99, 2, 4) == [1, 2, 3, 4]


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=-1)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=1, points_per_epoch=0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=1, batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=1, learning_rate=0.0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=1, schedule="fancy")
    with pytest.raises(ConfigError):
        TrainConfig(epochs=1, schedule="progressive", progressive_interval=0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=1, workers=0)
    with pytest.raises(ConfigError):
        TrainConfig(epochs=1, checkpoint_every=1)  # needs a directory


# ------------------------------------------------------------------ training


def test_train_is_deterministic():
    oracle, fld = _tiny_setup(seed=10)
    config = TrainConfig(epochs=2, points_per_epoch=600, rng_seed=10)
    work_a, hist_a = train(oracle, fld, config)
    work_b, hist_b = train(oracle, fld, config)
    np.testing.assert_array_equal(work_a.Z, work_b.Z)
    for da, db in zip(work_a.decoders, work_b.decoders):
        np.testing.assert_array_equal(da.W1, db.W1)
        np.testing.assert_array_equal(da.b2, db.b2)
    for ha, hb in zip(hist_a, hist_b):
        np.testing.assert_array_equal(ha.level_losses, hb.level_losses)
    # a different seed moves the numbers
    work_c, _ = train(oracle, fld, TrainConfig(epochs=2, points_per_epoch=600, rng_seed=11))
    assert not np.array_equal(work_a.Z, work_c.Z)


def test_train_zero_epochs_returns_copy():
    oracle, fld = _tiny_setup(seed=12)
    work, hist = train(oracle, fld, TrainConfig(epochs=0, points_per_epoch=100))
    assert hist == []
    np.testing.assert_array_equal(work.Z, fld.Z.astype(np.float64))
    assert work.Z.dtype == np.float64
    work.Z[:] = 0.0
    assert not np.array_equal(work.Z, fld.Z.astype(np.float64))  # a copy, not a view


def test_train_loss_decreases():
    oracle, fld = _tiny_setup(seed=13)
    config = TrainConfig(epochs=25, points_per_epoch=4000, rng_seed=13)
    work, hist = train(oracle, fld, config)
    first = np.nansum(hist[0].level_losses)
    last = np.nansum(hist[-1].level_losses)
    assert last < 0.05 * first


def test_progressive_freezes_inactive_levels():
    oracle, fld = _tiny_setup(seed=14)
    config = TrainConfig(
        epochs=3,
        points_per_epoch=500,
        schedule="progressive",
        progressive_interval=2,
        rng_seed=14,
    )
    work, hist = train(oracle, fld, config)
    # epochs 0-1 train level 2 only; epoch 2 adds level 1. The level-1
    # decoder must therefore differ from init (trained during epoch 2)
    # while its history rows for the first two epochs carry no loss.
    assert np.isnan(hist[0].level_losses[0])
    assert np.isnan(hist[1].level_losses[0])
    assert not np.isnan(hist[2].level_losses[0])
    assert not np.isnan(hist[0].level_losses[1])


def test_progressive_two_epochs_only_touches_finest():
    oracle, fld = _tiny_setup(seed=15)
    config = TrainConfig(
        epochs=2,
        points_per_epoch=500,
        schedule="progressive",
        progressive_interval=2,
        rng_seed=15,
    )
    work, _ = train(oracle, fld, config)
    # level-1 decoder is untouched while only level 2 is active
    np.testing.assert_array_equal(work.decoders[0].W1, fld.decoders[0].W1.astype(np.float64))
    np.testing.assert_array_equal(work.decoders[0].b2, fld.decoders[0].b2.astype(np.float64))
    assert not np.array_equal(work.decoders[1].W1, fld.decoders[1].W1.astype(np.float64))
    # level-1 features DO move: the level-2 feature sum includes them, so
    # the active loss reaches every contributing corner
    cut = fld.svo.corner_offsets[2]
    assert not np.array_equal(work.Z[:cut], fld.Z[:cut].astype(np.float64))
    assert not np.array_equal(work.Z[cut:], fld.Z[cut:].astype(np.float64))


def test_frozen_decoder_trains_features_only():
    oracle, fld = _tiny_setup(seed=16)
    donor_oracle, donor_fld = _tiny_setup(seed=17)
    pre, _ = train(donor_oracle, donor_fld, TrainConfig(epochs=3, points_per_epoch=1500, rng_seed=17))
    fld.decoders = [d.astype(np.float32) for d in pre.decoders]
    config = TrainConfig(
        epochs=5, points_per_epoch=1500, schedule="frozen_decoder", rng_seed=16
    )
    work, hist = train(oracle, fld, config)
    for trained, frozen in zip(work.decoders, fld.decoders):
        np.testing.assert_array_equal(trained.W1, frozen.W1.astype(np.float64))
        np.testing.assert_array_equal(trained.W2, frozen.W2.astype(np.float64))
    assert not np.array_equal(work.Z, fld.Z.astype(np.float64))
    assert np.nansum(hist[-1].level_losses) < np.nansum(hist[0].level_losses)


def test_workers_do_not_change_results():
    oracle, fld = _tiny_setup(seed=18)
    base = TrainConfig(epochs=2, points_per_epoch=700, rng_seed=18, workers=1)
    multi = TrainConfig(epochs=2, points_per_epoch=700, rng_seed=18, workers=2)
    work_a, hist_a = train(oracle, fld, base)
    work_b, hist_b = train(oracle, fld, multi)
    np.testing.assert_array_equal(work_a.Z, work_b.Z)
    np.testing.assert_array_equal(work_a.decoders[1].W1, work_b.decoders[1].W1)
    for ha, hb in zip(hist_a, hist_b):
        np.testing.assert_array_equal(ha.level_losses, hb.level_losses)


def test_train_log_file(tmp_path):
    oracle, fld = _tiny_setup(seed=19)
    log = tmp_path / "train.csv"
    config = TrainConfig(epochs=3, points_per_epoch=500, rng_seed=19, log_path=log)
    train(oracle, fld, config)
    with open(log, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "loss_l1", "loss_l2", "seconds"]
    assert len(rows) == 4
    assert [r[0] for r in rows[1:]] == ["0", "1", "2"]
    for r in rows[1:]:
        float(r[1]), float(r[2]), float(r[3])


def test_checkpoints(tmp_path):
    from octfield.modelio import load_model

    oracle, fld = _tiny_setup(seed=20)
    config = TrainConfig(
        epochs=4,
        points_per_epoch=500,
        rng_seed=20,
        checkpoint_every=2,
        checkpoint_dir=tmp_path,
    )
    work, _ = train(oracle, fld, config)
    files = sorted(p.name for p in tmp_path.glob("*.nsdf"))
    assert files == ["checkpoint_epoch2.nsdf", "checkpoint_epoch4.nsdf"]
    last = load_model(tmp_path / "checkpoint_epoch4.nsdf")
    np.testing.assert_array_equal(last.Z, work.Z.astype(np.float32))


def test_history_entries():
    oracle, fld = _tiny_setup(seed=21)
    work, hist = train(oracle, fld, TrainConfig(epochs=2, points_per_epoch=400, rng_seed=21))
    assert len(hist) == 2
    for i, h in enumerate(hist):
        assert h.epoch == i
        assert h.seconds > 0.0
        assert len(h.level_losses) == 2
        assert np.isfinite(h.level_losses).all()
