import math

import numpy as np
import pytest
from scipy.ndimage import binary_dilation

from fibertrack.dti import VoxelModelParams, eigendecompose, fit_tensor, nuisance_params
from fibertrack.dwi import (DwiVolume, PhantomSpec, arc_tangent, default_table, fiber_tensor,
                            generate_phantom, synthesize_signals)
from fibertrack.errors import (ConfigurationError, DeadEndError, DegenerateModelError,
                               SeedRejectedError)
from fibertrack.sphere import angular_spacing, build_router, icosphere, nearest_point, route
from fibertrack.tracking import (LikelihoodCache, OrientationDistribution, Streamline,
                                 TrackerConfig, TrackingSession, accumulate_counts, connectivity_map,
                                 log_likelihood, log_likelihood_vector, posterior,
                                 prior_weight, run_probabilistic, sample_direction,
                                 track_deterministic, track_probabilistic)
from oracles import normalize_exp, random_unit, scalar_log_likelihood

EIGS = (1.7e-3, 0.2e-3, 0.2e-3)
SIX = default_table("six")


def single_fiber(direction, table=SIX, S0=100.0):
    comps = fiber_tensor(np.asarray(direction)[None], EIGS)
    return synthesize_signals(comps, np.array([S0]), table)[0]


def voxel_model(signals, table=SIX, sigma_log=0.02):
    t, S0, _ = fit_tensor(signals, table)
    dec = eigendecompose(t.matrix)
    return nuisance_params(dec, S0, sigma_log), dec


@pytest.fixture(scope="module")
def straight():
    return generate_phantom(PhantomSpec("straight-fiber", 0.0), (32, 32, 32), SIX)


@pytest.fixture(scope="module")
def straight_session(straight):
    return TrackingSession(straight[0], TrackerConfig())


@pytest.fixture(scope="module")
def arc():
    return generate_phantom(PhantomSpec("quarter-arc", 0.0), (32, 32, 32), SIX)


class TestLikelihood:
    def test_scalar_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            d = random_unit(rng, 1)[0]
            sig = single_fiber(d) * np.exp(rng.normal(0, 0.03, len(SIX)))
            p = VoxelModelParams(rng.uniform(50, 150), rng.uniform(1e-4, 5e-4),
                                 rng.uniform(5e-4, 2e-3), d, rng.uniform(0.5, 5))
            for v in random_unit(rng, 5):
                ref = scalar_log_likelihood(sig, p.mu0, p.alpha, p.beta, p.sigma, v,
                                            SIX.bvals, SIX.bvecs)
                assert log_likelihood(sig, p, v, SIX) == pytest.approx(ref, rel=1e-12)

    def test_beta_zero_uninformative(self):
        rng = np.random.default_rng(1)
        p = VoxelModelParams(100.0, 7e-4, 0.0, np.array([1.0, 0, 0]), 2.0)
        sig = single_fiber([0, 1.0, 0])
        ll = log_likelihood_vector(sig, p, random_unit(rng, 50), SIX)
        assert np.all(ll == ll[0])

    def test_exact_signal(self):
        v = np.array([0.0, 0.6, 0.8])
        p = VoxelModelParams(90.0, 3e-4, 1.2e-3, v, 1.5)
        log_mu = math.log(90.0) - p.alpha * SIX.bvals - p.beta * SIX.bvals * (SIX.bvecs @ v) ** 2
        expected = float(np.sum(log_mu - math.log(1.5 * math.sqrt(2 * math.pi))))
        assert log_likelihood(np.exp(log_mu), p, v, SIX) == pytest.approx(expected, rel=1e-13)

    def test_sigma_zero(self):
        p = VoxelModelParams(100.0, 3e-4, 1e-3, np.array([1.0, 0, 0]), 0.0)
        with pytest.raises(DegenerateModelError):
            log_likelihood(single_fiber([1.0, 0, 0]), p, [1.0, 0, 0], SIX)

    def test_argmax_brute_force(self):
        rng = np.random.default_rng(2)
        s = icosphere(4)
        for d in random_unit(rng, 3):
            sig = single_fiber(d)
            p, dec = voxel_model(sig)
            ll = log_likelihood_vector(sig, p, s.points, SIX)
            ref = [scalar_log_likelihood(sig, p.mu0, p.alpha, p.beta, p.sigma, v,
                                         SIX.bvals, SIX.bvecs) for v in s.points]
            assert np.argmax(ll) == np.argmax(ref)
            np.testing.assert_allclose(ll, ref, rtol=1e-11)

    @pytest.mark.parametrize("table", ["six", "dense"])
    def test_map_alignment(self, table):
        # the likelihood is even in v, so compare axially
        tab = default_table(table)
        s = icosphere(4)
        spacing = angular_spacing(s)
        rng = np.random.default_rng(3)
        exact = 0
        for d in random_unit(rng, 200):
            sig = single_fiber(d, tab)
            p, dec = voxel_model(sig, tab)
            post = posterior(log_likelihood_vector(sig, p, s.points, tab), None, s)
            k = int(np.argmax(post.probs))
            e1 = dec.eigenvectors[0] * np.sign(s.points[k] @ dec.eigenvectors[0])
            n = nearest_point(e1, s)
            exact += k == n
            assert math.acos(min(1.0, s.points[k] @ e1)) <= spacing
            assert math.acos(min(1.0, s.points[k] @ s.points[n])) <= spacing + 1e-12
        assert exact >= 180


class TestPrior:
    def test_examples(self):
        v = np.array([1.0, 0, 0])
        assert prior_weight(v, v) == 1.0
        assert prior_weight(v, [0, 1.0, 0]) == 0.0
        assert prior_weight(v, -v) == 0.0
        w = np.array([1.0, 1.0, 0]) / math.sqrt(2)
        assert prior_weight(v, w) == pytest.approx(math.sqrt(2) / 2, rel=1e-15)


class TestPosterior:
    def test_uniform_likelihood(self):
        s = icosphere(3)
        v_prev = random_unit(np.random.default_rng(4), 1)[0]
        post = posterior(np.full(len(s), -7.5), v_prev, s)
        direct = np.array([prior_weight(p, v_prev) for p in s.points])
        np.testing.assert_allclose(post.probs, direct / direct.sum(), rtol=1e-13, atol=0)

    def test_delta(self):
        s = icosphere(2)
        v_prev = np.array([0.0, 0.0, 1.0])
        ll = np.zeros(len(s))
        k = int(np.argmax(s.points @ v_prev))
        ll[k] = 50.0
        assert posterior(ll, v_prev, s).probs[k] > 1 - 1e-12

    def test_twelve_point_oracle(self):
        s = icosphere(0)
        rng = np.random.default_rng(5)
        for _ in range(200):
            ll = rng.normal(0, 20, 12)
            v_prev = random_unit(rng, 1)[0]
            prior = [prior_weight(p, v_prev) for p in s.points]
            ref = normalize_exp(list(ll), prior)
            np.testing.assert_allclose(posterior(ll, v_prev, s).probs, ref, atol=1e-14, rtol=0)

    def test_backward_exactly_zero(self):
        s = icosphere(4)
        rng = np.random.default_rng(6)
        for v_prev in random_unit(rng, 20):
            probs = posterior(rng.normal(0, 5, len(s)), v_prev, s).probs
            assert np.all(probs[s.points @ v_prev < 0] == 0.0)
            assert abs(probs.sum() - 1) <= 1e-12

    def test_dead_end(self):
        s = icosphere(1)
        v_prev = np.array([1.0, 0, 0])
        ll = np.where(s.points @ v_prev > 0, -np.inf, 0.0)
        with pytest.raises(DeadEndError):
            posterior(ll, v_prev, s)

    def test_distribution_invariants(self):
        s = icosphere(0)
        with pytest.raises(ValueError):
            OrientationDistribution(s, np.full(12, 0.1))
        with pytest.raises(ValueError):
            OrientationDistribution(s, np.r_[-0.1, np.full(11, 1.1 / 11)])


class TestSampling:
    def test_single_atom(self):
        s = icosphere(0)
        p = np.zeros(12)
        p[7] = 1.0
        dist = OrientationDistribution(s, p)
        rng = np.random.default_rng(7)
        assert all(sample_direction(dist, rng) == 7 for _ in range(1000))

    def test_two_atoms(self):
        s = icosphere(0)
        p = np.zeros(12)
        p[[3, 9]] = 0.5
        draws = sample_direction(OrientationDistribution(s, p), np.random.default_rng(8), 1_000_000)
        assert set(np.unique(draws)) == {3, 9}
        assert abs(np.mean(draws == 3) - 0.5) < 0.002

    def test_deterministic(self):
        s = icosphere(2)
        p = np.random.default_rng(9).random(len(s))
        dist = OrientationDistribution(s, p / p.sum())
        a = [sample_direction(dist, np.random.default_rng(10)) for _ in range(3)]
        b = sample_direction(dist, np.random.default_rng(10), 50)
        c = sample_direction(dist, np.random.default_rng(10), 50)
        assert len(set(a)) == 1
        np.testing.assert_array_equal(b, c)


class TestTrackerConfig:
    @pytest.mark.parametrize("kw", [dict(fa_stop=1.5), dict(max_steps=0), dict(sphere_level=5),
                                    dict(prior_mode="power"), dict(samples_per_seed=0),
                                    dict(sigma=0.0), dict(sigma_floor=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            TrackerConfig(**kw)


class TestProbabilistic:
    def test_straight_end_to_end(self, straight, straight_session):
        seen = []
        sess = TrackingSession(straight[0], TrackerConfig(),
                               observer=lambda vox, dist, v: seen.append(dist.probs.sum()))
        sl = sess.track_probabilistic((16, 16, 16), np.random.default_rng(11))
        assert len(sl) == 32
        assert sorted(sl.voxels[:, 0].tolist()) == list(range(32))
        assert np.hypot(sl.voxels[:, 1] - 16, sl.voxels[:, 2] - 16).max() < 1
        assert np.all(np.abs(np.diff(sl.voxels, axis=0)) == [1, 0, 0])
        assert len(seen) == 32 and max(abs(t - 1) for t in seen) <= 1e-12

    def test_points_in_mm(self, straight_session):
        sl = straight_session.track_probabilistic((16, 16, 16), np.random.default_rng(0))
        np.testing.assert_allclose(sl.points[0], (np.array([0, 16, 16]) + 0.5) * 1.5)

    def test_isotropic_rejected(self):
        data = np.full((16, 16, 16, len(SIX)), 100.0)
        data[..., 1:] *= math.exp(-1000 * 7e-4)
        vol = DwiVolume(data, (1, 1, 1), SIX)
        with pytest.raises(SeedRejectedError):
            track_probabilistic((8, 8, 8), vol)

    def test_outside_rejected(self, straight_session):
        with pytest.raises(SeedRejectedError):
            straight_session.track_probabilistic((40, 0, 0), np.random.default_rng(0))

    def test_cache_transparent(self):
        vol, _ = generate_phantom(PhantomSpec("crossing", 0.05, rng_seed=3), (24, 24, 24), SIX)
        cfg = TrackerConfig(rng_seed=5)
        cold = TrackingSession(vol, cfg)
        off = TrackingSession(vol, cfg, field=cold.field, cache=LikelihoodCache(enabled=False))
        runs = [run_probabilistic(s, [(12, 12, 12), (5, 12, 12)], 20) for s in (cold, off)]
        warm = run_probabilistic(cold, [(12, 12, 12), (5, 12, 12)], 20)
        for a, b, c in zip(runs[0], runs[1], warm):
            np.testing.assert_array_equal(a.voxels, b.voxels)
            np.testing.assert_array_equal(a.voxels, c.voxels)
        for key in list(cold.cache._data)[:10]:
            np.testing.assert_array_equal(cold.cache._data[key], off.compute_likelihoods(key))

    def test_threads_invariant(self):
        vol, _ = generate_phantom(PhantomSpec("straight-fiber", 0.08, rng_seed=1), (20, 20, 20), SIX)
        cfg = TrackerConfig(rng_seed=2)
        a = run_probabilistic(TrackingSession(vol, cfg), [(10, 10, 10)], 12, threads=1)
        b = run_probabilistic(TrackingSession(vol, cfg), [(10, 10, 10)], 12, threads=4)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.voxels, y.voxels)

    def test_max_steps(self, straight):
        sess = TrackingSession(straight[0], TrackerConfig(max_steps=3))
        assert len(sess.track_probabilistic((16, 16, 16), np.random.default_rng(0))) == 7


class TestDeterministic:
    def test_straight(self, straight):
        vol, truth = straight
        sess = TrackingSession(vol, TrackerConfig())
        sl = track_deterministic((10, 16, 16), sess.field, session=sess)
        expected = np.stack([np.arange(32), np.full(32, 16), np.full(32, 16)], axis=1)
        np.testing.assert_array_equal(sl.voxels, expected)

    def test_seed_at_end(self, straight):
        sess = TrackingSession(straight[0], TrackerConfig())
        sl = sess.track_deterministic((0, 16, 16))
        assert len(sl) == 32
        assert sl.voxels[0].tolist() == [0, 16, 16] and sl.voxels[-1].tolist() == [31, 16, 16]
        sl = sess.track_deterministic((31, 16, 16))
        assert sl.voxels[0].tolist() == [0, 16, 16] and len(sl) == 32

    def test_quarter_arc(self, arc):
        vol, truth = arc
        sess = TrackingSession(vol, TrackerConfig())
        router = build_router()
        R = 0.55 * 32
        seed = (round(R / math.sqrt(2)), round(R / math.sqrt(2)), 16)
        sl = sess.track_deterministic(seed)
        assert len(sl) >= 20
        steps = np.diff(sl.voxels, axis=0)
        for vox, step in zip(sl.voxels[:-1], steps):
            t = arc_tangent(vox)
            t = t if t @ step >= 0 else -t
            assert router.adjacent(tuple(step), route(t)), (vox, step)
        assert truth.mask[tuple(sl.voxels.T)].all()

    def test_rejected(self, straight):
        sess = TrackingSession(straight[0], TrackerConfig())
        with pytest.raises(SeedRejectedError):
            sess.track_deterministic((16, 2, 2))


class TestConnectivity:
    def test_single_occupancy(self, straight):
        vol, _ = straight
        cfg = TrackerConfig(samples_per_seed=1, rng_seed=4)
        cmap, sls = connectivity_map([(16, 16, 16)], vol, cfg, return_streamlines=True)
        occ = np.zeros(vol.shape3, np.int64)
        for v in sls[0].voxels:
            occ[tuple(v)] += 1
        np.testing.assert_array_equal(cmap.counts, occ)

    def test_mask_overlap(self, straight):
        vol, truth = straight
        sess = TrackingSession(vol, TrackerConfig(samples_per_seed=1000))
        cmap, sls = connectivity_map([(16, 16, 16)], vol, session=sess, return_streamlines=True)
        inside = cmap.counts[binary_dilation(truth.mask)].sum()
        assert inside >= 0.95 * cmap.total
        assert cmap.total == sum(len(s) for s in sls)
        assert sess.cache.computations <= len({tuple(v) for s in sls for v in s.voxels})

    def test_noisy_overlap(self):
        vol, truth = generate_phantom(PhantomSpec("straight-fiber", 0.04, rng_seed=8),
                                      (24, 24, 24), SIX)
        cmap, sls = connectivity_map([(12, 12, 12)], vol, TrackerConfig(samples_per_seed=300),
                                     return_streamlines=True)
        assert cmap.counts[binary_dilation(truth.mask)].sum() >= 0.95 * cmap.total
        assert cmap.total == sum(len(s) for s in sls)

    def test_rejected_seed_contributes_zero(self, straight):
        cfg = TrackerConfig(samples_per_seed=3)
        cmap, sls = connectivity_map([(2, 2, 2), (16, 16, 16)], straight[0], cfg,
                                     return_streamlines=True)
        assert len(sls) == 3 and cmap.total == sum(len(s) for s in sls)

    def test_empty(self, straight):
        with pytest.raises(ConfigurationError):
            connectivity_map([], straight[0])

    def test_accumulate_counts(self):
        rng = np.random.default_rng(12)
        sls = [Streamline(rng.integers(0, 5, size=(rng.integers(1, 30), 3))) for _ in range(40)]
        cmap = accumulate_counts(sls + [None], (5, 5, 5))
        assert cmap.total == sum(len(s) for s in sls)
        assert cmap.counts.min() >= 0


class TestCache:
    def test_one_computation_per_voxel(self):
        vol, _ = generate_phantom(PhantomSpec("crossing", 0.03, rng_seed=2), (24, 24, 24), SIX)
        sess = TrackingSession(vol, TrackerConfig(rng_seed=1))
        seeds = [(12, 12, 12), (4, 12, 12), (12, 4, 12)]
        sls = run_probabilistic(sess, seeds, 40, threads=3)
        visited = {tuple(v) for s in sls if s is not None for v in s.voxels}
        assert sess.cache.computations == len(sess.cache) <= len(visited)
        assert sess.cache.hits > sess.cache.computations

    def test_disabled_recomputes(self, straight):
        cache = LikelihoodCache(enabled=False)
        sess = TrackingSession(straight[0], TrackerConfig(), cache=cache)
        a = sess.likelihoods((5, 16, 16))
        b = sess.likelihoods((5, 16, 16))
        assert cache.computations == 2 and len(cache) == 0
        np.testing.assert_array_equal(a, b)

    def test_read_only(self, straight_session):
        ll = straight_session.likelihoods((3, 16, 16))
        with pytest.raises(ValueError):
            ll[0] = 0.0
