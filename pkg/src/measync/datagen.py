"""Synthetic ground truth, relative measurements, noise and evaluation metrics."""

import itertools
from dataclasses import dataclass
from typing import List

import numpy as np

from .divergences import GroundCost, sinkhorn_divergence
from .manifold import IDENTITY, canonicalize, exp_map, geo_distance, sample_uniform
from .measures import AbsoluteBelief, DiscreteMeasure, JointCoupling, pushforward_relative
from .sync import RotationGraph

TRUTH_TO_ESTIMATE = "truth2est"
ESTIMATE_TO_TRUTH = "est2truth"


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """True per-camera measures with uniform weights; camera 0 is the gauge."""

    beliefs: List[AbsoluteBelief]
    n: int
    K: int

    @property
    def gauge(self):
        return self.beliefs[0]

    def coupling(self, mode):
        return JointCoupling(mode, self.beliefs)


@dataclass(frozen=True)
class NoiseModel:
    """Isotropic tangent-space perturbation with standard deviation ``sigma`` (radians)."""

    sigma: float = 0.0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")


def generate_ground_truth(n, K, rng):
    """Random truth: ``K`` uniform particles per camera, camera 0 at the identity if ``K = 1``."""
    if n < 2 or K < 1:
        raise ValueError(f"need n >= 2 and K >= 1, got n={n}, K={K}")
    beta = np.full(K, 1.0 / np.sqrt(K))
    beliefs = []
    for i in range(n):
        if i == 0 and K == 1:
            particles = IDENTITY[None].copy()
        else:
            particles = sample_uniform(rng, K)
        beliefs.append(AbsoluteBelief(i, particles, beta))
    return GroundTruth(beliefs, n, K)


def relative_measures_from_truth(truth, mode, completeness, rng, max_attempts=100):
    """Edge measures pushed forward from the truth on a random connected edge subset.

    ``round(completeness * n (n - 1) / 2)`` edges are drawn uniformly without
    replacement, redrawing until the graph is connected.
    """
    if not 0 < completeness <= 1:
        raise ValueError(f"completeness must lie in (0, 1], got {completeness}")
    coupling = truth.coupling(mode)
    pairs = list(itertools.combinations(range(truth.n), 2))
    n_keep = max(1, int(round(completeness * len(pairs))))
    for _ in range(max_attempts):
        chosen = sorted(rng.choice(len(pairs), size=n_keep, replace=False))
        edges = []
        for idx in chosen:
            i, j = pairs[idx]
            mu = pushforward_relative(coupling, i, j, probability=False)
            edges.append((i, j, mu.normalized()))
        graph = RotationGraph(truth.n, edges)
        if graph.is_connected():
            return graph
    raise ValueError(
        f"no connected graph with completeness {completeness} after {max_attempts} draws"
    )


def add_noise(graph, noise, rng):
    """Perturb every edge atom by ``exp_map(q, xi)`` with ``xi ~ N(0, sigma^2 I_3)``."""
    if noise.sigma == 0:
        return RotationGraph(graph.n_cameras, list(graph.edges))
    edges = []
    for i, j, mu in graph.edges:
        xi = rng.normal(0.0, noise.sigma, size=(len(mu), 3))
        atoms = canonicalize(exp_map(mu.atoms, xi))
        edges.append((i, j, DiscreteMeasure(atoms, mu.weights, probability=mu.probability)))
    return RotationGraph(graph.n_cameras, edges)


def _particles(estimate):
    if hasattr(estimate, "particles"):
        return list(estimate.particles)
    return [b.particles for b in estimate.beliefs]


def _weights(estimate):
    if hasattr(estimate, "particles"):
        return [estimate.weights(i) for i in range(estimate.n_cameras)]
    return [b.weights for b in estimate.beliefs]


def avg_min_geodesic(estimate, truth, direction=TRUTH_TO_ESTIMATE):
    """Mean nearest-particle geodesic distance over the non-gauge cameras.

    ``truth2est`` averages, over every true particle, the distance to its
    closest estimated particle (a missed mode is penalized). ``est2truth``
    swaps the roles (a stray estimated particle is penalized).
    """
    est = _particles(estimate)
    if len(est) != truth.n:
        raise ValueError(f"estimate has {len(est)} cameras, truth has {truth.n}")
    dists = []
    for i in range(1, truth.n):
        D = geo_distance(truth.beliefs[i].particles[:, None, :], est[i][None, :, :])
        if direction == TRUTH_TO_ESTIMATE:
            dists.append(D.min(axis=1))
        elif direction == ESTIMATE_TO_TRUTH:
            dists.append(D.min(axis=0))
        else:
            raise ValueError(f"unknown direction {direction!r}")
    return float(np.mean(np.concatenate(dists)))


def sinkhorn_error(estimate, truth, cost=GroundCost(), alpha=0.05):
    """Mean Sinkhorn divergence between estimated and true beliefs, non-gauge cameras."""
    est, w = _particles(estimate), _weights(estimate)
    if len(est) != truth.n:
        raise ValueError(f"estimate has {len(est)} cameras, truth has {truth.n}")
    values = []
    for i in range(1, truth.n):
        mu = DiscreteMeasure(est[i], w[i], probability=False).normalized()
        values.append(sinkhorn_divergence(mu, truth.beliefs[i].measure(probability=True), cost, alpha))
    return float(np.mean(values))
