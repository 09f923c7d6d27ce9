"""Discrete measures on unit quaternions and the joint couplings built from them."""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .manifold import canonicalize, conjugate, quat_mul

HE = "he"
LE = "le"


class StructureError(ValueError):
    """A coupling or measure whose shapes are inconsistent with its mode."""


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Weighted atoms ``sum_k w_k delta_{q_k}``.

    ``atoms`` has shape ``(n, 4)`` (or ``(n, ..., 4)`` on product spaces) and
    is sign-canonicalized on construction. With ``probability=True`` the
    weights must sum to one; otherwise any nonnegative mass is allowed.
    Duplicate atoms are kept as they are.
    """

    atoms: np.ndarray
    weights: np.ndarray
    probability: bool = True

    def __post_init__(self):
        atoms = canonicalize(np.array(self.atoms, dtype=float))
        weights = np.array(self.weights, dtype=float).reshape(-1)
        if atoms.ndim < 2 or atoms.shape[-1] != 4:
            raise StructureError(f"atoms must have shape (n, ..., 4), got {atoms.shape}")
        if len(atoms) == 0 or len(atoms) != len(weights):
            raise StructureError(
                f"{len(atoms)} atoms but {len(weights)} weights (need equal and >= 1)"
            )
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise ValueError("weights must be finite and nonnegative")
        if self.probability and abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"probability weights sum to {weights.sum()!r}, expected 1")
        atoms.flags.writeable = False
        weights.flags.writeable = False
        object.__setattr__(self, "atoms", atoms)
        object.__setattr__(self, "weights", weights)

    def __len__(self):
        return len(self.weights)

    @property
    def mass(self):
        return float(self.weights.sum())

    def normalized(self):
        return DiscreteMeasure(self.atoms, self.weights / self.weights.sum())


def weights_from_beta(beta):
    return np.square(np.asarray(beta, dtype=float))


@dataclass(frozen=True, eq=False)
class AbsoluteBelief:
    """Particles of one camera with weight parameters ``beta`` (``w = beta**2``)."""

    camera_id: int
    particles: np.ndarray
    beta: np.ndarray

    def __post_init__(self):
        particles = canonicalize(np.array(self.particles, dtype=float).reshape(-1, 4))
        beta = np.array(self.beta, dtype=float).reshape(-1)
        if len(particles) != len(beta) or len(beta) == 0:
            raise StructureError(
                f"camera {self.camera_id}: {len(particles)} particles, {len(beta)} betas"
            )
        object.__setattr__(self, "particles", particles)
        object.__setattr__(self, "beta", beta)

    @property
    def weights(self):
        return weights_from_beta(self.beta)

    def __len__(self):
        return len(self.beta)

    def measure(self, probability=False):
        w = self.weights
        if probability:
            w = w / w.sum()
        return DiscreteMeasure(self.particles, w, probability=probability)


@dataclass(frozen=True, eq=False)
class JointCoupling:
    """Joint measure over all cameras, factorized (HE) or index-aligned (LE).

    The HE joint is never materialized. In LE every camera carries the same
    number of particles and the same weights, given by ``shared_beta``.
    """

    mode: str
    beliefs: List[AbsoluteBelief]
    shared_beta: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if self.mode not in (HE, LE):
            raise StructureError(f"unknown coupling mode {self.mode!r}")
        if self.mode == LE:
            sizes = {len(b) for b in self.beliefs}
            if len(sizes) != 1:
                raise StructureError(f"LE coupling needs equal particle counts, got {sorted(sizes)}")
            shared = self.shared_beta
            if shared is None:
                shared = self.beliefs[0].beta
            shared = np.array(shared, dtype=float).reshape(-1)
            if len(shared) != len(self.beliefs[0]):
                raise StructureError("shared_beta length differs from particle count")
            # the LE constraint w_i = w_j is enforced by construction
            beliefs = [AbsoluteBelief(b.camera_id, b.particles, shared) for b in self.beliefs]
            object.__setattr__(self, "beliefs", beliefs)
            object.__setattr__(self, "shared_beta", shared)

    @property
    def n_cameras(self):
        return len(self.beliefs)


def product_measure(mu, nu):
    """Product measure on the product space.

    Each atom is a tuple of quaternions with shape ``(k, 4)``; factors of an
    input that is itself a product are concatenated, so the output atoms have
    shape ``(n_mu * n_nu, k_mu + k_nu, 4)`` and the product is associative.
    """
    n, m = len(mu), len(nu)
    a = mu.atoms.reshape(n, -1, 4)
    b = nu.atoms.reshape(m, -1, 4)
    atoms = np.concatenate(
        [np.repeat(a, m, axis=0), np.tile(b, (n, 1, 1))], axis=1
    )
    weights = np.outer(mu.weights, nu.weights).reshape(-1)
    return DiscreteMeasure(atoms, weights, probability=mu.probability and nu.probability)


def pushforward_relative(coupling, i, j, probability=None):
    """Estimated relative measure ``g_ij(mu)`` with atoms ``q_i * conj(q_j)``.

    HE pairs every particle of ``i`` with every particle of ``j`` (``K_i K_j``
    atoms, product weights); LE pairs equal indices only. ``probability``
    defaults to whether the resulting weights sum to one.
    """
    if i == j:
        raise StructureError("composition needs two distinct cameras")
    bi, bj = coupling.beliefs[i], coupling.beliefs[j]
    if coupling.mode == HE:
        atoms = quat_mul(bi.particles[:, None, :], conjugate(bj.particles)[None, :, :])
        atoms = atoms.reshape(-1, 4)
        weights = np.outer(bi.weights, bj.weights).reshape(-1)
    else:
        if len(bi) != len(bj):
            raise StructureError(f"LE cameras {i} and {j} have {len(bi)} vs {len(bj)} particles")
        atoms = quat_mul(bi.particles, conjugate(bj.particles))
        weights = weights_from_beta(coupling.shared_beta)
    if probability is None:
        probability = abs(weights.sum() - 1.0) <= 1e-9
    return DiscreteMeasure(atoms, weights, probability=probability)


def invert_measure(mu):
    """Measure of inverse rotations (``mu_ji`` from ``mu_ij``)."""
    return DiscreteMeasure(conjugate(mu.atoms), mu.weights, probability=mu.probability)
