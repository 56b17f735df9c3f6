"""Timing harness comparing Bayesian and learned orientation estimation.

Every timing is the median wall-clock time over ``reps`` repetitions after
one discarded warm-up repetition.
"""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .dwi import PhantomSpec, default_table, generate_phantom
from .dti import fit_volume
from .estimator import network as net
from .estimator.patches import extract_patches, pad_volume
from .tracking import LikelihoodCache, TrackerConfig, TrackingSession, posterior, run_probabilistic


@dataclass
class BenchRow:
    metric: str
    value: float
    unit: str
    note: str = ""


def median_time(fn, reps=5):
    """Median seconds per call of ``fn`` over ``reps`` timed runs (one warm-up)."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def _fiber_voxels(truth, rng, n):
    vox = np.argwhere(truth.mask)
    return vox[rng.choice(len(vox), size=min(n, len(vox)), replace=False)]


def run_bench(size=32, table="six", reps=5, n_voxels=64, n_fibers=50, threads=1,
              params=None, net_config=None, seed=0, sphere_level=4):
    """Measure the benchmark metrics on a straight-fiber phantom.

    Returns a list of :class:`BenchRow`. ``params`` defaults to a freshly
    initialised reference network for the table's shell count (timings do
    not depend on the weight values).
    """
    tab = default_table(table)
    volume, truth = generate_phantom(PhantomSpec("straight", 0.02, rng_seed=seed),
                                     (size,) * 3, tab)
    field = fit_volume(volume)
    rng = np.random.default_rng(seed)
    voxels = _fiber_voxels(truth, rng, n_voxels)
    cfg = TrackerConfig(sphere_level=sphere_level, rng_seed=seed, threads=threads)
    session = TrackingSession(volume, cfg, field=field, cache=LikelihoodCache(enabled=False))
    n_points = len(session.sphere)
    e1 = field.v1[tuple(voxels[0])]

    def bayes():
        for v in voxels:
            posterior(session.compute_likelihoods(v), e1, session.sphere)

    t_post = median_time(bayes, reps) / len(voxels)

    if net_config is None:
        net_config = net.NetworkConfig.table1(len(tab))
    if params is None:
        params = net.init_params(net_config, np.random.default_rng(seed), np.float32)
    dtype = next(iter(params.values())).dtype
    padded = pad_volume(volume.data.astype(np.float64), net_config.patch // 2)

    def forward_batched():
        views = extract_patches(padded, voxels, "log", net_config.patch).astype(dtype)
        net.forward(params, net_config, views)

    def forward_single():
        for v in voxels[:8]:
            views = extract_patches(padded, v[None], "log", net_config.patch).astype(dtype)
            net.forward(params, net_config, views)

    t_net = median_time(forward_batched, reps) / len(voxels)
    t_net_single = median_time(forward_single, reps) / 8

    seed_vox = [tuple(voxels[0])]
    fibers_cfg = TrackerConfig(sphere_level=sphere_level, rng_seed=seed, threads=threads,
                               samples_per_seed=n_fibers)

    def track(cache_on):
        def go():
            s = TrackingSession(volume, fibers_cfg, field=field,
                                cache=LikelihoodCache(enabled=cache_on))
            out = run_probabilistic(s, seed_vox)
            go.session, go.out = s, out
        return go

    cached, uncached = track(True), track(False)
    t_cached = median_time(cached, reps) / n_fibers
    t_uncached = median_time(uncached, reps) / n_fibers
    c = cached.session.cache
    revisit = c.hits / max(c.hits + c.computations, 1)

    return [
        BenchRow("posterior_per_voxel", t_post, "s", f"{n_points}-point sphere, {len(tab)} shells"),
        BenchRow("network_forward_per_voxel", t_net, "s", f"batch of {len(voxels)}, {dtype}"),
        BenchRow("network_forward_single_voxel", t_net_single, "s", "batch of 1"),
        BenchRow("forward_vs_posterior_ratio", t_net / t_post, "x", "< 1 means network faster"),
        BenchRow("fiber_time_cached", t_cached, "s", f"{n_fibers} fibers from one seed"),
        BenchRow("fiber_time_uncached", t_uncached, "s", ""),
        BenchRow("cache_speedup", t_uncached / t_cached, "x", ""),
        BenchRow("revisit_fraction", revisit, "", "cache hits / voxel visits"),
        BenchRow("fibers_per_second", 1.0 / t_cached, "1/s", f"threads={threads}, cached"),
    ]


def to_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value", "unit", "note"])
    for r in rows:
        w.writerow([r.metric, f"{r.value:.6g}", r.unit, r.note])
    return buf.getvalue()


def to_text(rows):
    width = max(len(r.metric) for r in rows)
    lines = [f"{'metric':<{width}}  {'value':>12}  unit  note"]
    for r in rows:
        lines.append(f"{r.metric:<{width}}  {r.value:>12.6g}  {r.unit:<4}  {r.note}")
    return "\n".join(lines) + "\n"
