"""JSON graph and result files, CSV traces.

Reals are written with ``repr`` precision (17 significant digits), so every
float survives a save/load cycle bit for bit.
"""

import csv
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .manifold import canonicalize, normalize
from .measures import HE, AbsoluteBelief, DiscreteMeasure, JointCoupling
from .sync import RotationGraph

GRAPH_WEIGHT_TOL = 1e-6


class FileFormatError(ValueError):
    pass


def _dump(doc, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, allow_nan=True)
        fh.write("\n")


def _load(path):
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise FileFormatError(f"{path}: not valid JSON ({exc})") from None


def _quats(rows, where):
    q = np.asarray(rows, dtype=float)
    if q.ndim != 2 or q.shape[1] != 4:
        raise FileFormatError(f"{where}: expected a list of [w, x, y, z] quaternions")
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0) or not np.all(np.isfinite(q)):
        raise FileFormatError(f"{where}: zero or non-finite quaternion")
    return canonicalize(normalize(q))


def save_graph(path, graph, metadata=None):
    edges = []
    for i, j, mu in graph.oriented().edges:
        edges.append(
            {"i": i, "j": j, "atoms": mu.atoms.tolist(), "weights": mu.weights.tolist()}
        )
    _dump({"n_cameras": graph.n_cameras, "edges": edges, "metadata": metadata or {}}, path)


def load_graph(path):
    """Read a graph file; returns ``(graph, metadata)``.

    Quaternions are renormalized and sign-canonicalized, weights rescaled to
    sum to one (they must already do so within ``1e-6``).
    """
    doc = _load(path)
    try:
        n = int(doc["n_cameras"])
        raw_edges = doc["edges"]
    except (KeyError, TypeError, ValueError):
        raise FileFormatError(f"{path}: missing n_cameras or edges") from None
    edges = []
    for k, e in enumerate(raw_edges):
        where = f"{path}: edge {k}"
        try:
            i, j = int(e["i"]), int(e["j"])
            atoms = _quats(e["atoms"], where)
            w = np.asarray(e["weights"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise FileFormatError(f"{where}: {exc}") from None
        if not 0 <= i < j < n:
            raise FileFormatError(f"{where}: need 0 <= i < j < {n}, got ({i}, {j})")
        if w.shape != (len(atoms),):
            raise FileFormatError(f"{where}: {len(atoms)} atoms but {w.size} weights")
        if np.any(w < 0) or abs(w.sum() - 1.0) > GRAPH_WEIGHT_TOL:
            raise FileFormatError(f"{where}: weights must be >= 0 and sum to 1")
        edges.append((i, j, DiscreteMeasure(atoms, w / w.sum())))
    try:
        graph = RotationGraph(n, edges)
    except ValueError as exc:
        raise FileFormatError(f"{path}: {exc}") from None
    if not graph.is_connected():
        raise FileFormatError(f"{path}: rotation graph is not connected")
    return graph, doc.get("metadata", {})


@dataclass
class ResultData:
    """Contents of a result (or ground-truth) file."""

    coupling: JointCoupling
    config: dict
    final_loss: Optional[float]
    iterations: int
    converged_flags: list
    extra: dict

    @property
    def n_cameras(self):
        return self.coupling.n_cameras

    @property
    def gauge(self):
        return self.coupling.beliefs[0]


def save_result(path, coupling, config=None, final_loss=None, iterations=0,
                converged_flags=(), extra=None):
    cameras = []
    for b in coupling.beliefs:
        cameras.append(
            {
                "id": b.camera_id,
                "particles": b.particles.tolist(),
                "weights": b.weights.tolist(),
                "beta": b.beta.tolist(),
            }
        )
    doc = {
        "config": config or {},
        "mode": coupling.mode,
        "cameras": cameras,
        "final_loss": None if final_loss is None else float(final_loss),
        "iterations": int(iterations),
        "converged_flags": [bool(f) for f in converged_flags],
    }
    if extra:
        doc["extra"] = extra
    _dump(doc, path)


def load_result(path):
    doc = _load(path)
    try:
        mode = doc.get("mode", HE)
        beliefs = []
        for k, cam in enumerate(doc["cameras"]):
            where = f"{path}: camera {k}"
            particles = _quats(cam["particles"], where)
            if "beta" in cam:
                beta = np.asarray(cam["beta"], dtype=float)
            else:
                beta = np.sqrt(np.asarray(cam["weights"], dtype=float))
            beliefs.append(AbsoluteBelief(int(cam["id"]), particles, beta))
        coupling = JointCoupling(mode, beliefs)
    except (KeyError, TypeError, ValueError) as exc:
        raise FileFormatError(f"{path}: {exc}") from None
    return ResultData(
        coupling,
        doc.get("config", {}),
        doc.get("final_loss"),
        int(doc.get("iterations", 0)),
        list(doc.get("converged_flags", [])),
        doc.get("extra", {}),
    )


def write_trace(path, trace, wallclock):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(["iteration", "loss", "wallclock_s"])
        for (it, loss), t in zip(trace, wallclock):
            out.writerow([it, repr(float(loss)), f"{t:.6f}"])


def read_trace(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["iteration"]), float(r["loss"]), float(r["wallclock_s"])) for r in rows]
