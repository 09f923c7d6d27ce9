import math

import numpy as np
import pytest
from conftest import seeds
from hypothesis import given
from hypothesis import strategies as st
from oracles import random_quats
from scipy.stats import chi

from measync.datagen import (
    ESTIMATE_TO_TRUTH,
    TRUTH_TO_ESTIMATE,
    GroundTruth,
    NoiseModel,
    add_noise,
    avg_min_geodesic,
    generate_ground_truth,
    relative_measures_from_truth,
    sinkhorn_error,
)
from measync.manifold import IDENTITY, exp_map, geo_distance
from measync.measures import HE, LE, AbsoluteBelief, JointCoupling
from measync.sync import SyncConfig, SyncState, total_loss


def truth_of(beliefs):
    return GroundTruth(beliefs, len(beliefs), len(beliefs[0]))


def uniform_belief(cam, particles):
    particles = np.asarray(particles, dtype=float)
    return AbsoluteBelief(cam, particles, np.full(len(particles), 1 / math.sqrt(len(particles))))


class TestGroundTruth:
    def test_protocol_shape(self):
        truth = generate_ground_truth(10, 3, np.random.default_rng(0))
        assert truth.n == 10 and len(truth.beliefs) == 10
        for b in truth.beliefs:
            assert len(b) == 3
            np.testing.assert_allclose(b.weights, [1 / 3] * 3, atol=1e-15)
            assert np.all(b.particles[:, 0] >= 0)

    def test_single_particle_gauge_identity(self):
        truth = generate_ground_truth(2, 1, np.random.default_rng(1))
        np.testing.assert_array_equal(truth.gauge.particles, [IDENTITY])
        assert len(truth.beliefs) == 2

    def test_reproducible(self):
        a = generate_ground_truth(4, 2, np.random.default_rng(2))
        b = generate_ground_truth(4, 2, np.random.default_rng(2))
        for x, y in zip(a.beliefs, b.beliefs):
            np.testing.assert_array_equal(x.particles, y.particles)

    def test_invalid(self):
        with pytest.raises(ValueError):
            generate_ground_truth(1, 3, np.random.default_rng(0))
        with pytest.raises(ValueError):
            generate_ground_truth(3, 0, np.random.default_rng(0))


class TestRelativeMeasures:
    def test_he_atoms(self):
        rng = np.random.default_rng(3)
        g = relative_measures_from_truth(generate_ground_truth(5, 3, rng), HE, 1.0, rng)
        assert all(len(mu) == 9 and mu.probability for _, _, mu in g.edges)

    def test_le_atoms(self):
        rng = np.random.default_rng(4)
        g = relative_measures_from_truth(generate_ground_truth(5, 3, rng), LE, 1.0, rng)
        assert all(len(mu) == 3 for _, _, mu in g.edges)

    def test_complete(self):
        rng = np.random.default_rng(5)
        g = relative_measures_from_truth(generate_ground_truth(10, 1, rng), HE, 1.0, rng)
        assert len(g.edges) == 45

    @given(seeds, st.integers(3, 8), st.floats(0.3, 1.0))
    def test_connected_and_sized(self, seed, n, completeness):
        rng = np.random.default_rng(seed)
        truth = generate_ground_truth(n, 1, rng)
        try:
            g = relative_measures_from_truth(truth, HE, completeness, rng)
        except ValueError:
            return
        assert g.is_connected()
        assert len(g.edges) == round(completeness * n * (n - 1) / 2)
        assert all(i < j for i, j, _ in g.edges)

    def test_impossible_connectivity(self):
        rng = np.random.default_rng(6)
        with pytest.raises(ValueError, match="connected"):
            relative_measures_from_truth(generate_ground_truth(10, 1, rng), HE, 0.1, rng)

    @pytest.mark.parametrize("mode", [HE, LE])
    def test_consistent_with_loss(self, mode):
        rng = np.random.default_rng(7)
        truth = generate_ground_truth(4, 2, rng)
        g = relative_measures_from_truth(truth, mode, 1.0, rng)
        state = SyncState.from_coupling(truth.coupling(mode))
        cfg = SyncConfig(mode=mode, loss="mmd", constrained=False, lam=0.2)
        assert total_loss(state, g, cfg) <= 0.2 * 4 + 1e-6


class TestNoise:
    def test_zero_sigma_identity(self):
        rng = np.random.default_rng(8)
        g = relative_measures_from_truth(generate_ground_truth(4, 2, rng), HE, 1.0, rng)
        out = add_noise(g, NoiseModel(0.0), rng)
        for (i, j, a), (k, l, b) in zip(g.edges, out.edges):
            assert (i, j) == (k, l)
            np.testing.assert_array_equal(a.atoms, b.atoms)
            np.testing.assert_array_equal(a.weights, b.weights)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            NoiseModel(-0.1)

    def test_mean_displacement(self):
        rng = np.random.default_rng(9)
        truth = generate_ground_truth(2, 1, rng)
        base = relative_measures_from_truth(truth, HE, 1.0, rng)
        disp = []
        for _ in range(10_000):
            noisy = add_noise(base, NoiseModel(0.01), rng)
            disp.append(geo_distance(base.edges[0][2].atoms[0], noisy.edges[0][2].atoms[0]))
        expect = 0.01 * chi(3).mean()
        assert np.mean(disp) == pytest.approx(expect, rel=0.1)

    def test_unit_canonical_weights_kept(self):
        rng = np.random.default_rng(10)
        g = relative_measures_from_truth(generate_ground_truth(4, 3, rng), HE, 1.0, rng)
        out = add_noise(g, NoiseModel(0.3), rng)
        for (_, _, a), (_, _, b) in zip(g.edges, out.edges):
            np.testing.assert_allclose(np.linalg.norm(b.atoms, axis=1), 1.0, atol=1e-12)
            assert np.all(b.atoms[:, 0] >= 0)
            np.testing.assert_array_equal(a.weights, b.weights)

    def test_loss_grows_continuously(self):
        rng = np.random.default_rng(11)
        truth = generate_ground_truth(4, 2, rng)
        g = relative_measures_from_truth(truth, HE, 1.0, rng)
        state = SyncState.from_coupling(truth.coupling(HE))
        losses = [total_loss(state, add_noise(g, NoiseModel(s), np.random.default_rng(0)), SyncConfig())
                  for s in (0.0, 1e-3, 1e-2)]
        assert abs(losses[0]) < 1e-9
        assert losses[0] < losses[1] < losses[2]
        assert losses[1] < 0.1 * losses[2]


class TestAvgMin:
    def test_truth_zero(self):
        truth = generate_ground_truth(4, 3, np.random.default_rng(12))
        est = truth.coupling(HE)
        assert avg_min_geodesic(est, truth) == 0.0
        assert avg_min_geodesic(est, truth, ESTIMATE_TO_TRUTH) == 0.0

    def test_coverage_direction(self):
        stray = random_quats(np.random.default_rng(13), 1)[0]
        truth = truth_of([uniform_belief(0, [IDENTITY]), uniform_belief(1, [IDENTITY])])
        est = JointCoupling(HE, [uniform_belief(0, [IDENTITY]), uniform_belief(1, [IDENTITY, stray])])
        assert avg_min_geodesic(est, truth, TRUTH_TO_ESTIMATE) == 0.0
        assert avg_min_geodesic(est, truth, ESTIMATE_TO_TRUTH) == pytest.approx(
            geo_distance(IDENTITY, stray) / 2)

    def test_first_order_shift(self):
        truth = generate_ground_truth(4, 3, np.random.default_rng(14))
        eps = 1e-4
        moved = [uniform_belief(b.camera_id, exp_map(b.particles, [eps, 0, 0])) for b in truth.beliefs]
        assert avg_min_geodesic(JointCoupling(HE, moved), truth) == pytest.approx(eps, rel=1e-6)

    @given(seeds)
    def test_sign_flip_invariance(self, seed):
        rng = np.random.default_rng(seed)
        truth = generate_ground_truth(3, 2, rng)
        est = [random_quats(rng, 3) for _ in range(3)]
        a = avg_min_geodesic(JointCoupling(HE, [uniform_belief(i, q) for i, q in enumerate(est)]), truth)
        flipped = [q * rng.choice([-1.0, 1.0], size=(3, 1)) for q in est]
        b = avg_min_geodesic(JointCoupling(HE, [AbsoluteBelief(i, q, np.ones(3) / math.sqrt(3))
                                                 for i, q in enumerate(flipped)]), truth)
        assert a == pytest.approx(b, abs=1e-12)

    def test_camera_mismatch(self):
        truth = generate_ground_truth(3, 1, np.random.default_rng(15))
        with pytest.raises(ValueError):
            avg_min_geodesic(JointCoupling(HE, truth.beliefs[:2]), truth)


class TestSinkhornError:
    def test_truth_zero(self):
        truth = generate_ground_truth(4, 3, np.random.default_rng(16))
        assert abs(sinkhorn_error(truth.coupling(HE), truth)) < 1e-6

    def test_monotone_in_perturbation(self):
        truth = generate_ground_truth(4, 3, np.random.default_rng(17))
        axis = np.array([0.3, -0.5, 0.8]) / np.linalg.norm([0.3, -0.5, 0.8])
        errs = []
        for t in (0.0, 0.05, 0.1, 0.2):
            moved = [uniform_belief(b.camera_id, exp_map(b.particles, t * axis)) for b in truth.beliefs]
            errs.append(sinkhorn_error(JointCoupling(HE, moved), truth))
        assert np.all(np.diff(errs) > 0)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(18)
        truth = generate_ground_truth(3, 3, rng)
        est = [random_quats(rng, 4) for _ in range(3)]
        perm = rng.permutation(4)
        a = sinkhorn_error(JointCoupling(HE, [uniform_belief(i, q) for i, q in enumerate(est)]), truth)
        b = sinkhorn_error(JointCoupling(HE, [uniform_belief(i, q[perm]) for i, q in enumerate(est)]), truth)
        assert a == pytest.approx(b, abs=1e-9)
