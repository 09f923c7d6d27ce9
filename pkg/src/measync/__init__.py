"""Synchronization of probability measures over 3D rotations."""

from .divergences import (
    GEODESIC,
    MMD,
    SINKHORN,
    SQEUCLIDEAN,
    Divergence,
    GroundCost,
    SinkhornNotConverged,
    mmd_squared,
    sinkhorn_distance,
    sinkhorn_divergence,
    wasserstein_lp_oracle,
)
from .measures import HE, LE, AbsoluteBelief, DiscreteMeasure, JointCoupling, pushforward_relative
from .sync import RotationGraph, SyncConfig, SyncState, run, total_loss

__version__ = "0.1.0"

__all__ = [
    "GEODESIC", "MMD", "SINKHORN", "SQEUCLIDEAN", "Divergence", "GroundCost",
    "SinkhornNotConverged", "mmd_squared", "sinkhorn_distance", "sinkhorn_divergence",
    "wasserstein_lp_oracle", "HE", "LE", "AbsoluteBelief", "DiscreteMeasure", "JointCoupling",
    "pushforward_relative", "RotationGraph", "SyncConfig", "SyncState", "run", "total_loss",
]
