"""Bayesian orientation model and voxel-lattice fiber tracking.

Both trackers move from voxel centre to voxel centre; the next voxel is the
neighbour chosen by the rhombicuboctahedron router for the current
direction. Every streamline is built from two half-fibers launched in
opposite directions at the seed.
"""
from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .dti import fit_volume
from .errors import (ConfigurationError, DeadEndError, DegenerateModelError,
                     DomainError, SeedRejectedError)
from .sphere import build_router, icosphere

LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TrackerConfig:
    """Tracking parameters.

    ``sigma_floor`` bounds the per-voxel log-domain noise estimate from
    below (noiseless voxels would otherwise give a degenerate likelihood);
    ``sigma`` overrides the estimate for every voxel when set.
    """

    fa_stop: float = 0.15
    max_steps: int = 2000
    samples_per_seed: int = 1
    rng_seed: int = 0
    prior_mode: str = "clamped-linear"
    sphere_level: int = 4
    sigma_floor: float = 0.02
    sigma: float | None = None
    threads: int = 1

    def __post_init__(self):
        if not 0.0 <= self.fa_stop <= 1.0:
            raise ConfigurationError("fa_stop must lie in [0, 1]")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if self.samples_per_seed < 1:
            raise ConfigurationError("samples_per_seed must be >= 1")
        if self.prior_mode != "clamped-linear":
            raise ConfigurationError(f"unsupported prior_mode {self.prior_mode!r}")
        if not 0 <= self.sphere_level <= 4:
            raise ConfigurationError("sphere_level must be in 0..4")
        if self.sigma_floor <= 0 and self.sigma is None:
            raise ConfigurationError("sigma_floor must be positive")
        if self.sigma is not None and not self.sigma > 0:
            raise ConfigurationError("sigma must be positive")
        if self.threads < 1:
            raise ConfigurationError("threads must be >= 1")


@dataclass(frozen=True)
class OrientationDistribution:
    """Probabilities over the points of a sphere point set."""

    sphere: object
    probs: np.ndarray

    def __post_init__(self):
        p = self.probs
        if p.shape != (len(self.sphere.points),) or np.any(p < 0):
            raise DomainError("probabilities must be nonnegative, one per sphere point")
        if abs(float(p.sum()) - 1.0) > 1e-12:
            raise DomainError(f"probabilities sum to {float(p.sum())!r}, not 1")


@dataclass
class Streamline:
    """Voxel indices visited by a tracked fiber, in order."""

    voxels: np.ndarray
    voxel_size: tuple = (1.0, 1.0, 1.0)

    def __len__(self):
        return len(self.voxels)

    @property
    def points(self):
        """Millimetre coordinates of the voxel centres (TrackVis convention)."""
        return (np.asarray(self.voxels, float) + 0.5) * np.asarray(self.voxel_size)


@dataclass
class ConnectivityMap:
    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())


# -- model -------------------------------------------------------------------

def log_likelihood_vector(signals, params, directions, table):
    """Log-likelihood of a voxel's signals for every row of ``directions``.

    The constrained model ``mu_j = mu0 exp(-alpha b_j - beta b_j (g_j.v)^2)``
    is evaluated entirely in the log domain.
    """
    if not params.sigma > 0:
        raise DegenerateModelError("likelihood needs sigma > 0")
    signals = np.asarray(signals, dtype=np.float64)
    if np.any(signals <= 0):
        raise DomainError("signals must be positive")
    z = np.log(signals)
    b = table.bvals
    proj = np.asarray(directions, float) @ table.bvecs.T
    log_mu = math.log(params.mu0) - params.alpha * b - params.beta * b * proj * proj
    mu = np.exp(log_mu)
    resid = z - log_mu
    const = len(b) * (math.log(params.sigma) + LOG_SQRT_2PI)
    return (log_mu - (mu * mu) / (2.0 * params.sigma ** 2) * resid * resid).sum(axis=-1) - const


def log_likelihood(signals, params, v, table):
    """Log-likelihood for a single direction ``v``."""
    return float(log_likelihood_vector(signals, params, np.asarray(v, float)[None, :], table)[0])


def prior_weight(v, v_prev):
    """Clamped-linear direction prior ``max(v . v_prev, 0)``."""
    return max(float(np.dot(v, v_prev)), 0.0)


def posterior(log_likes, v_prev, sphere):
    """Normalised posterior over ``sphere`` given the previous direction.

    ``v_prev=None`` uses a uniform prior over the whole sphere. Backward
    points get exactly zero mass.
    """
    log_likes = np.asarray(log_likes, dtype=np.float64)
    if v_prev is None:
        prior = np.ones(len(log_likes))
    else:
        prior = sphere.points @ np.asarray(v_prev, dtype=float)
    support = (prior > 0) & np.isfinite(log_likes)
    if not support.any():
        raise DeadEndError("no sphere point with positive prior and finite likelihood")
    ll = log_likes[support]
    w = np.exp(ll - ll.max()) * prior[support]
    total = w.sum()
    if not total > 0:
        raise DeadEndError("posterior has no mass in the forward hemisphere")
    probs = np.zeros(len(log_likes))
    probs[support] = w / total
    return OrientationDistribution(sphere, probs)


def sample_direction(dist, rng, size=None):
    """Inverse-CDF draw of point indices in the fixed sphere order."""
    cdf = np.cumsum(dist.probs)
    u = rng.random(size) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    last = int(np.flatnonzero(dist.probs)[-1])
    idx = np.minimum(idx, last)
    return int(idx) if size is None else idx


# -- cache ---------------------------------------------------------------------

class LikelihoodCache:
    """Per-voxel memo of log-likelihood vectors.

    Lookups and inserts are thread-safe; concurrent requests for a voxel
    that is being computed wait for the first computation, so each voxel is
    computed at most once while the cache is enabled. With ``enabled=False``
    every request recomputes.
    """

    def __init__(self, enabled=True):
        self.enabled = enabled
        self._data = {}
        self._pending = {}
        self._lock = threading.Lock()
        self.computations = 0
        self.hits = 0

    def __len__(self):
        return len(self._data)

    def __contains__(self, key):
        return key in self._data

    def clear(self):
        with self._lock:
            self._data.clear()
            self.computations = 0
            self.hits = 0

    def get_or_compute(self, key, compute):
        if not self.enabled:
            with self._lock:
                self.computations += 1
            return compute()
        while True:
            with self._lock:
                if key in self._data:
                    self.hits += 1
                    return self._data[key]
                event = self._pending.get(key)
                if event is None:
                    event = self._pending[key] = threading.Event()
                    owner = True
                else:
                    owner = False
            if not owner:
                event.wait()
                continue
            try:
                value = compute()
                value.setflags(write=False)
                with self._lock:
                    self._data[key] = value
                    self.computations += 1
                return value
            finally:
                with self._lock:
                    del self._pending[key]
                event.set()


# -- tracking --------------------------------------------------------------------

class TrackingSession:
    """Shared read-only state for tracking in one volume.

    Parameters
    ----------
    volume : DwiVolume
    config : TrackerConfig
    field : TensorField, optional
        Precomputed fit of ``volume``; computed when omitted.
    cache : LikelihoodCache, optional
    observer : callable, optional
        Called as ``observer(voxel, distribution, v_prev)`` after every
        posterior evaluation (diagnostics and tests).
    """

    def __init__(self, volume=None, config=None, field=None, cache=None, observer=None):
        if volume is None and field is None:
            raise ConfigurationError("a tracking session needs a volume or a tensor field")
        self.volume = volume
        self.config = config or TrackerConfig()
        self.field = field if field is not None else fit_volume(volume)
        self.cache = cache if cache is not None else LikelihoodCache()
        self.sphere = icosphere(self.config.sphere_level)
        self.router = build_router()
        self.observer = observer
        self.voxel_size = volume.voxel_size if volume is not None else (1.0, 1.0, 1.0)
        self._route_w = self.router.normals / self.router.distances[:, None]

    # model pieces
    def voxel_params(self, voxel):
        c = self.config
        return self.field.voxel_params(voxel, c.sigma_floor, c.sigma)

    def compute_likelihoods(self, voxel):
        voxel = tuple(int(v) for v in voxel)
        return log_likelihood_vector(self.volume.data[voxel], self.voxel_params(voxel),
                                     self.sphere.points, self.volume.table)

    def likelihoods(self, voxel):
        voxel = tuple(int(v) for v in voxel)
        return self.cache.get_or_compute(voxel, lambda: self.compute_likelihoods(voxel))

    def route(self, v):
        return self.router.offsets[int(np.argmax(self._route_w @ v))]

    def _inside(self, voxel):
        return all(0 <= voxel[k] < self.field.shape[k] for k in range(3))

    def _continues(self, voxel):
        return self._inside(voxel) and self.field.fa[tuple(voxel)] >= self.config.fa_stop

    def check_seed(self, seed):
        seed = np.asarray(seed, dtype=np.int64)
        if seed.shape != (3,) or not self._inside(seed):
            raise SeedRejectedError(f"seed {tuple(seed)} lies outside the volume")
        fa = self.field.fa[tuple(seed)]
        if fa < self.config.fa_stop:
            raise SeedRejectedError(
                f"seed {tuple(seed)} has FA {fa:.3f} below fa_stop {self.config.fa_stop}")
        return seed

    # probabilistic
    def _posterior(self, voxel, v_prev):
        dist = posterior(self.likelihoods(voxel), v_prev, self.sphere)
        if self.observer is not None:
            self.observer(tuple(int(c) for c in voxel), dist, v_prev)
        return dist

    def _walk_probabilistic(self, seed, v, rng):
        path = []
        pos = seed + self.route(v)
        while len(path) < self.config.max_steps and self._continues(pos):
            path.append(pos)
            try:
                dist = self._posterior(pos, v)
            except DeadEndError:
                break
            v = self.sphere.points[sample_direction(dist, rng)]
            pos = pos + self.route(v)
        return path

    def track_probabilistic(self, seed, rng):
        """One probabilistic streamline from ``seed`` using generator ``rng``."""
        seed = self.check_seed(seed)
        first = self._posterior(seed, None)
        v0 = self.sphere.points[sample_direction(first, rng)]
        forward = self._walk_probabilistic(seed, v0, rng)
        backward = self._walk_probabilistic(seed, -v0, rng)
        return self._join(backward, seed, forward)

    # deterministic
    def _walk_deterministic(self, seed, v):
        path = []
        pos = seed + self.route(v)
        while len(path) < self.config.max_steps and self._continues(pos):
            path.append(pos)
            e1 = self.field.v1[tuple(pos)]
            v = e1 if float(e1 @ v) >= 0 else -e1
            pos = pos + self.route(v)
        return path

    def track_deterministic(self, seed):
        seed = self.check_seed(seed)
        e1 = self.field.v1[tuple(seed)]
        return self._join(self._walk_deterministic(seed, -e1), seed,
                          self._walk_deterministic(seed, e1))

    def _join(self, backward, seed, forward):
        voxels = np.array(backward[::-1] + [seed] + forward, dtype=np.int64).reshape(-1, 3)
        return Streamline(voxels, self.voxel_size)


def streamline_rng(rng_seed, seed_index, sample_index):
    """Independent generator for one (seed, sample) pair."""
    return np.random.default_rng([int(rng_seed), int(seed_index), int(sample_index)])


def track_probabilistic(seed_voxel, volume, config=None, cache=None, *,
                        seed_index=0, sample_index=0, session=None):
    """Track one probabilistic streamline (see :class:`TrackingSession`)."""
    session = session or TrackingSession(volume, config, cache=cache)
    rng = streamline_rng(session.config.rng_seed, seed_index, sample_index)
    return session.track_probabilistic(seed_voxel, rng)


def track_deterministic(seed_voxel, tensor_field, config=None, *, volume=None, session=None):
    """Follow the principal eigenvector field from ``seed_voxel``."""
    session = session or TrackingSession(volume, config, field=tensor_field)
    return session.track_deterministic(seed_voxel)


def run_probabilistic(session, seeds, samples_per_seed=None, threads=None):
    """Track ``samples_per_seed`` streamlines from every seed.

    Work items are independent (each has its own RNG stream), so results
    do not depend on scheduling; they are returned in ``(seed, sample)``
    order. Rejected seeds yield ``None`` entries.
    """
    cfg = session.config
    n_samples = samples_per_seed or cfg.samples_per_seed
    threads = threads or cfg.threads
    jobs = [(i, s) for i in range(len(seeds)) for s in range(n_samples)]

    def work(job):
        i, s = job
        try:
            return session.track_probabilistic(
                seeds[i], streamline_rng(cfg.rng_seed, i, s))
        except SeedRejectedError:
            return None

    if threads == 1:
        return [work(j) for j in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(work, jobs))


def accumulate_counts(streamlines, shape):
    counts = np.zeros(shape, dtype=np.int64)
    for sl in streamlines:
        if sl is not None:
            np.add.at(counts, tuple(sl.voxels.T), 1)
    return ConnectivityMap(counts)


def connectivity_map(seeds, volume, config=None, *, session=None, return_streamlines=False):
    """Visit counts of ``samples_per_seed`` probabilistic tracks per seed."""
    if len(seeds) < 1:
        raise ConfigurationError("connectivity_map needs at least one seed")
    session = session or TrackingSession(volume, config)
    streamlines = run_probabilistic(session, seeds)
    cmap = accumulate_counts(streamlines, volume.shape3)
    if return_streamlines:
        return cmap, [s for s in streamlines if s is not None]
    return cmap
