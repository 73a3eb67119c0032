"""Optimization of the field against a ground-truth oracle.

Each epoch draws a fresh 2:2:1 surface/near/uniform sample mixture, shuffles
it, and runs Adam over mini-batches. The per-batch loss sums squared errors
across the active detail levels, skipping a level's term for points that no
voxel at that level contains.

Batches are processed in fixed 128-row chunks regardless of the worker
count; chunk results merge in chunk order, so the trained parameters are
bit-identical for any number of workers.
"""

from __future__ import annotations

import csv
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TrainingDiverged
from .field import DecoderGrads, FieldGradients, NeuralField, backward, trilinear
from .sampling import SampleSet, build_epoch_set

SCHEDULES = ("joint", "progressive", "frozen_decoder")

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_CHUNK = 128  # fixed shard size so results never depend on worker count


@dataclass
class TrainConfig:
    epochs: int
    points_per_epoch: int = 500_000
    batch_size: int = 512
    learning_rate: float = 0.001
    schedule: str = "joint"
    progressive_interval: int = 100
    rng_seed: int = 0
    workers: int = 1
    log_path: str | None = None
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        for name in ("points_per_epoch", "batch_size", "progressive_interval", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning_rate must be positive")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")
        if self.checkpoint_every and not self.checkpoint_dir:
            raise ConfigError("checkpoint_every needs checkpoint_dir")


@dataclass
class AdamState:
    """First/second moment buffers mirroring the parameter dict."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros(p.shape) for k, p in params.items()},
            v={k: np.zeros(p.shape) for k, p in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place. Parameters without a
    gradient entry are untouched."""
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def loss_batch(
    fld: NeuralField,
    samples: SampleSet,
    active_levels,
    grads: FieldGradients | None = None,
    denom: int | None = None,
    predict_fn=None,
):
    """Squared-error loss over a batch, summed across active levels.

    Returns (loss, grads, level_sums) where level_sums holds the raw
    per-level residual sums before division by denom (default: the batch
    length). A point skips a level's term when no voxel at that level
    contains it. predict_fn(points, L) substitutes the predictor for
    loss-only checks; gradients are skipped in that case.
    """
    active = sorted(set(int(L) for L in active_levels))
    if not active:
        raise ConfigError("active level set is empty")
    if active[0] < 1 or active[-1] > fld.max_level:
        raise ConfigError(f"active levels {active} outside 1..{fld.max_level}")
    pts = samples.points
    d = samples.distances
    n = len(samples) if denom is None else denom
    level_sums = np.zeros(fld.max_level)
    want_grads = predict_fn is None
    if want_grads and grads is None:
        grads = FieldGradients.zeros(fld.Z, fld.max_level)
    for L in active:
        if want_grads:
            out, cache = fld.forward(pts, L)
            mask = cache.recs[L - 1].mask
        else:
            out = np.asarray(predict_fn(pts, L), dtype=np.float64)
            _, mask = trilinear(fld.svo, fld.Z, pts, L)
        resid = np.where(mask, out - d, 0.0)
        level_sums[L - 1] = float(resid @ resid)
        if want_grads:
            backward(cache, (2.0 / n) * resid, grads)
    loss = float(level_sums[np.array(active) - 1].sum() / n)
    return loss, (grads if want_grads else None), level_sums


@dataclass
class EpochStats:
    epoch: int
    level_losses: np.ndarray  # (max_level,); nan where the level was inactive
    seconds: float


def active_levels_for(schedule: str, epoch: int, interval: int, max_level: int) -> list:
    """Level set for one epoch. Progressive training starts with only the
    finest level and adds the next-coarser one every interval epochs; added
    levels stay active."""
    if schedule == "progressive":
        n = min(1 + epoch // interval, max_level)
        return list(range(max_level - n + 1, max_level + 1))
    return list(range(1, max_level + 1))


def train(oracle, fld: NeuralField, config: TrainConfig):
    """Optimize a copy of the field; returns (trained field, epoch stats).

    The returned field holds float64 master weights; serialization casts
    them down. Training is deterministic given the config, including
    across worker counts.
    """
    work = NeuralField(
        fld.svo,
        fld.Z.astype(np.float64),
        [dec.astype(np.float64) for dec in fld.decoders],
    )
    history: list = []
    if config.epochs == 0:
        return work, history

    params = {"Z": work.Z}
    for i, dec in enumerate(work.decoders):
        params[f"decoder{i + 1}.W1"] = dec.W1
        params[f"decoder{i + 1}.b1"] = dec.b1
        params[f"decoder{i + 1}.W2"] = dec.W2
        params[f"decoder{i + 1}.b2"] = dec.b2
    state = AdamState.for_params(params)
    update_decoders = config.schedule != "frozen_decoder"

    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    log_fh = open(config.log_path, "w", newline="") if config.log_path else None
    try:
        writer = None
        if log_fh is not None:
            writer = csv.writer(log_fh)
            writer.writerow(
                ["epoch"]
                + [f"loss_l{L}" for L in range(1, fld.max_level + 1)]
                + ["seconds"]
            )
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            seeds = np.random.SeedSequence([config.rng_seed, epoch]).generate_state(2)
            samples = build_epoch_set(oracle, config.points_per_epoch, int(seeds[0]))
            perm = np.random.default_rng(int(seeds[1])).permutation(len(samples))
            pts = samples.points[perm]
            dists = samples.distances[perm]
            tags = samples.scheme_tags[perm]
            active = active_levels_for(
                config.schedule, epoch, config.progressive_interval, fld.max_level
            )

            epoch_sums = np.zeros(fld.max_level)
            for start in range(0, len(pts), config.batch_size):
                stop = min(start + config.batch_size, len(pts))
                batch = SampleSet(pts[start:stop], dists[start:stop], tags[start:stop])
                loss, grads, sums = _batch_pass(work, batch, active, pool)
                epoch_sums += sums
                if not np.isfinite(loss):
                    raise TrainingDiverged(
                        f"epoch {epoch}, batch at {start}: loss {loss}"
                    )
                adam_step(
                    params,
                    _grads_dict(grads, update_decoders),
                    state,
                    config.learning_rate,
                )

            losses = np.full(fld.max_level, np.nan)
            idx = np.array(active) - 1
            losses[idx] = epoch_sums[idx] / len(pts)
            stats = EpochStats(epoch, losses, time.perf_counter() - t0)
            history.append(stats)
            if writer is not None:
                writer.writerow(
                    [epoch] + [f"{x:.8g}" for x in losses] + [f"{stats.seconds:.3f}"]
                )
                log_fh.flush()
            if config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                from . import modelio

                path = os.path.join(
                    config.checkpoint_dir, f"checkpoint_epoch{epoch + 1}.nsdf"
                )
                modelio.save_model(path, work)
    finally:
        if pool is not None:
            pool.shutdown()
        if log_fh is not None:
            log_fh.close()
    return work, history


def _batch_pass(work: NeuralField, batch: SampleSet, active, pool):
    """Chunked loss/gradient evaluation with an order-fixed merge."""
    n = len(batch)
    slices = [slice(s, min(s + _CHUNK, n)) for s in range(0, n, _CHUNK)]

    def run(sl):
        part = SampleSet(
            batch.points[sl], batch.distances[sl], batch.scheme_tags[sl]
        )
        g = FieldGradients.zeros(work.Z, work.max_level)
        loss, _, sums = loss_batch(work, part, active, grads=g, denom=n)
        return loss, g, sums

    if pool is None:
        results = [run(sl) for sl in slices]
    else:
        results = list(pool.map(run, slices))

    total = FieldGradients.zeros(work.Z, work.max_level)
    loss = 0.0
    sums = np.zeros(work.max_level)
    for part_loss, g, part_sums in results:
        loss += part_loss
        sums += part_sums
        _merge_grads(total, g)
    return loss, total, sums


def _merge_grads(total: FieldGradients, part: FieldGradients):
    total.dZ += part.dZ
    for i, g in enumerate(part.decoders):
        if g is None:
            continue
        t = total.decoders[i]
        if t is None:
            total.decoders[i] = DecoderGrads(
                g.W1.copy(), g.b1.copy(), g.W2.copy(), g.b2.copy()
            )
        else:
            t.W1 += g.W1
            t.b1 += g.b1
            t.W2 += g.W2
            t.b2 += g.b2


def _grads_dict(grads: FieldGradients, include_decoders: bool) -> dict:
    out = {"Z": grads.dZ}
    if include_decoders:
        for i, g in enumerate(grads.decoders):
            if g is None:
                continue
            out[f"decoder{i + 1}.W1"] = g.W1
            out[f"decoder{i + 1}.b1"] = g.b1
            out[f"decoder{i + 1}.W2"] = g.W2
            out[f"decoder{i + 1}.b2"] = g.b2
    return out
