"""Measure synchronization: graph, loss assembly and Riemannian particle descent.

Every camera ``i`` carries particles ``q_i^(k)`` with weights ``w_i^(k) =
(beta_i^(k))**2``. For each observed edge ``(i, j, mu_ij)`` the current beliefs
are pushed forward to relative rotations ``q_i conj(q_j)`` and compared with
``mu_ij`` by a Sinkhorn divergence or MMD. Camera 0 is held at a gauge
reference throughout.
"""

import time
from collections import deque
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np

from .divergences import MMD, SINKHORN, Divergence, GroundCost, _Warm
from .manifold import IDENTITY, canonicalize, conjugate, exp_map, quat_mul, rotate_vector
from .manifold import sample_uniform, sphere_exp
from .measures import HE, LE, AbsoluteBelief, DiscreteMeasure, JointCoupling, invert_measure

CONSTANT = "constant"
INVERSE_WEIGHT = "inverse_weight"

GAUGE_CAMERA = 0
# floor on the weight in the inverse-weight step size
WEIGHT_FLOOR = 1e-6


class DisconnectedGraphError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class ConstraintViolation(AssertionError):
    pass


@dataclass
class RotationGraph:
    """Cameras ``0..n-1`` and observed relative measures on undirected edges.

    Each edge ``(i, j, mu_ij)`` also stands for ``(j, i, invert(mu_ij))``.
    """

    n_cameras: int
    edges: List[tuple]

    def __post_init__(self):
        seen = set()
        for i, j, mu in self.edges:
            if i == j:
                raise ValueError(f"self-loop at camera {i}")
            if not (0 <= i < self.n_cameras and 0 <= j < self.n_cameras):
                raise ValueError(f"edge ({i}, {j}) outside 0..{self.n_cameras - 1}")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
            if not isinstance(mu, DiscreteMeasure):
                raise TypeError("edge measures must be DiscreteMeasure")

    def is_connected(self):
        parent = list(range(self.n_cameras))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for i, j, _ in self.edges:
            parent[find(i)] = find(j)
        return len({find(a) for a in range(self.n_cameras)}) == 1

    def check_connected(self):
        if not self.is_connected():
            raise DisconnectedGraphError("rotation graph is not connected")

    def oriented(self):
        """Copy with every edge stored as ``i < j``."""
        edges = []
        for i, j, mu in self.edges:
            edges.append((i, j, mu) if i < j else (j, i, invert_measure(mu)))
        return RotationGraph(self.n_cameras, sorted(edges, key=lambda e: (e[0], e[1])))


@dataclass(frozen=True)
class SyncConfig:
    """Optimizer settings.

    Sinkhorn-Sync keeps weights on the simplex (``constrained=True``, constant
    step); MMD-Sync may drop the constraint, in which case ``lam > 0``
    penalizes total mass and the inverse-weight step rule becomes available.
    """

    loss: str = SINKHORN
    mode: str = HE
    constrained: bool = True
    cost: GroundCost = GroundCost()
    alpha: float = 0.05
    lam: float = 0.0
    eta_q: float = 0.01
    eta_beta: Optional[float] = None
    step_rule: str = CONSTANT
    max_iter: int = 10000
    seed: int = 0
    K: int = 1
    trace_stride: int = 10
    update_weights: bool = True
    squared: bool = False
    sinkhorn_tol: float = 1e-9
    sinkhorn_max_iter: int = 500
    early_stop_window: int = 200
    early_stop_rtol: float = 1e-10
    debug: bool = False

    def __post_init__(self):
        if self.eta_beta is None:
            object.__setattr__(self, "eta_beta", 0.1 * self.eta_q)
        self.validate()

    def validate(self):
        if self.loss not in (SINKHORN, MMD):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.mode not in (HE, LE):
            raise ValueError(f"unknown coupling mode {self.mode!r}")
        if self.step_rule not in (CONSTANT, INVERSE_WEIGHT):
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if self.loss == SINKHORN and self.step_rule != CONSTANT:
            raise ValueError("Sinkhorn-Sync uses the constant step rule")
        if self.loss == SINKHORN and not self.constrained:
            raise ValueError("Sinkhorn-Sync runs with weights constrained to the simplex")
        if not self.constrained and not self.lam > 0:
            raise ValueError("unconstrained weights need a positive mass penalty lam")
        if self.lam < 0 or self.eta_q <= 0 or self.eta_beta <= 0:
            raise ValueError("lam must be >= 0 and step sizes > 0")
        if self.K < 1 or self.max_iter < 0 or self.trace_stride < 1:
            raise ValueError("K >= 1, max_iter >= 0 and trace_stride >= 1 required")

    @property
    def divergence(self):
        return Divergence(
            self.loss, self.cost, self.alpha, self.sinkhorn_tol, self.sinkhorn_max_iter, self.squared
        )


@dataclass
class SyncState:
    """Evolving beliefs plus bookkeeping.

    ``beta`` holds one array per camera; in LE mode they are all the shared
    weight parameters. ``loss_trace`` lists ``(iteration, loss)`` pairs.
    """

    mode: str
    particles: List[np.ndarray]
    beta: List[np.ndarray]
    iteration: int = 0
    loss_trace: list = field(default_factory=list)
    trace_wallclock: list = field(default_factory=list)
    last_loss: float = float("nan")
    gauge: Optional[AbsoluteBelief] = None
    edge_converged: Optional[np.ndarray] = None
    unconverged_counts: Optional[np.ndarray] = None
    ever_converged: Optional[np.ndarray] = None
    max_norm_error: float = 0.0
    max_sphere_error: float = 0.0
    rng_state: Optional[dict] = None
    started: float = field(default_factory=time.perf_counter, repr=False, compare=False)
    engine: object = field(default=None, repr=False, compare=False)

    @property
    def n_cameras(self):
        return len(self.particles)

    def weights(self, i):
        return self.beta[i] ** 2

    @property
    def coupling(self):
        beliefs = [AbsoluteBelief(i, q, b) for i, (q, b) in enumerate(zip(self.particles, self.beta))]
        shared = self.beta[0] if self.mode == LE else None
        return JointCoupling(self.mode, beliefs, shared)

    @classmethod
    def from_coupling(cls, coupling):
        return cls(
            coupling.mode,
            [b.particles.copy() for b in coupling.beliefs],
            [b.beta.copy() for b in coupling.beliefs],
        )


@dataclass
class Gradients:
    loss: float
    position: List[np.ndarray]
    weight: List[np.ndarray]
    beta: List[np.ndarray]
    edge_values: np.ndarray
    edge_converged: np.ndarray


class _EdgeGroup:
    """Edges whose pushforwards share one shape, evaluated as a single batch."""

    def __init__(self, edge_ids, graph, divergence):
        self.edge_ids = list(edge_ids)
        self.i = [graph.edges[e][0] for e in self.edge_ids]
        self.j = [graph.edges[e][1] for e in self.edge_ids]
        self.Y = np.stack([graph.edges[e][2].atoms for e in self.edge_ids])
        self.wy = np.stack([graph.edges[e][2].weights for e in self.edge_ids])
        self.target_self = divergence.target_self_term(self.Y, self.wy)
        self.warm = _Warm()


class _Engine:
    """Loss and gradient evaluation for one (graph, config, particle layout)."""

    def __init__(self, graph, config, sizes):
        self.graph = graph
        self.config = config
        self.sizes = tuple(sizes)
        self.divergence = config.divergence
        groups = {}
        for e, (i, j, mu) in enumerate(graph.edges):
            key = (sizes[i], sizes[j], len(mu))
            groups.setdefault(key, []).append(e)
        self.groups = [_EdgeGroup(ids, graph, self.divergence) for ids in groups.values()]

    def matches(self, graph, config, sizes):
        return self.graph is graph and self.config == config and self.sizes == tuple(sizes)

    def evaluate(self, state, need_grad=True, zero_gauge=True):
        cfg = self.config
        n_edges = len(self.graph.edges)
        values = np.zeros(n_edges)
        converged = np.ones(n_edges, dtype=bool)
        contrib = [None] * n_edges
        weights = [state.weights(i) for i in range(state.n_cameras)]
        for grp in self.groups:
            Qi = np.stack([state.particles[i] for i in grp.i])
            Qj = np.stack([state.particles[j] for j in grp.j])
            Wi = np.stack([weights[i] for i in grp.i])
            Wj = np.stack([weights[j] for j in grp.j])
            if state.mode == HE:
                X = quat_mul(Qi[:, :, None, :], conjugate(Qj)[:, None, :, :]).reshape(len(grp.i), -1, 4)
                wx = (Wi[:, :, None] * Wj[:, None, :]).reshape(len(grp.i), -1)
            else:
                X = quat_mul(Qi, conjugate(Qj))
                wx = Wi
            res = self.divergence.evaluate(
                X, wx, grp.Y, grp.wy, grp.target_self, grp.warm, need_grad=need_grad
            )
            for b, e in enumerate(grp.edge_ids):
                values[e] = res.value[b]
                converged[e] = res.converged[b]
            if not need_grad:
                continue
            G, F = res.position_grad, res.weight_grad
            if state.mode == HE:
                B, Ki, Kj = len(grp.i), Qi.shape[1], Qj.shape[1]
                R = rotate_vector(conjugate(Qj)[:, None, :, :], G.reshape(B, Ki, Kj, 3))
                F = F.reshape(B, Ki, Kj)
                for b, e in enumerate(grp.edge_ids):
                    contrib[e] = (
                        R[b].sum(axis=1),
                        -R[b].sum(axis=0),
                        (F[b] * Wj[b][None, :]).sum(axis=1),
                        (F[b] * Wi[b][:, None]).sum(axis=0),
                    )
            else:
                R = rotate_vector(conjugate(Qj), G)
                for b, e in enumerate(grp.edge_ids):
                    contrib[e] = (R[b], -R[b], F[b], None)
        for e in range(n_edges):
            if not np.isfinite(values[e]):
                i, j, _ = self.graph.edges[e]
                raise NonFiniteGradientError(f"non-finite loss on edge {e} ({i}, {j})")

        total = float(np.sum(values))
        if not cfg.constrained:
            total += cfg.lam * sum(float(np.sum(w)) for w in weights)
        if not need_grad:
            return total, values, converged

        gq = [np.zeros_like(q[:, 1:]) for q in state.particles]
        gw = [np.zeros_like(w) for w in weights]
        shared_gw = np.zeros_like(weights[0]) if state.mode == LE else None
        for e in range(n_edges):
            i, j, _ = self.graph.edges[e]
            a, b, wa, wb = contrib[e]
            if not (np.all(np.isfinite(a)) and np.all(np.isfinite(wa))):
                bad = int(np.argmax(~np.isfinite(a).all(axis=-1)))
                raise NonFiniteGradientError(
                    f"non-finite gradient on edge {e} ({i}, {j}), camera {i}, particle {bad}"
                )
            gq[i] += a
            gq[j] += b
            if state.mode == HE:
                gw[i] += wa
                gw[j] += wb
            else:
                shared_gw += wa
        if not cfg.constrained:
            if state.mode == HE:
                gw = [g + cfg.lam for g in gw]
            else:
                shared_gw = shared_gw + cfg.lam * state.n_cameras
        if state.mode == LE:
            gw = [shared_gw] * state.n_cameras
        if zero_gauge:
            gq[GAUGE_CAMERA] = np.zeros_like(gq[GAUGE_CAMERA])
            if state.mode == HE:
                gw[GAUGE_CAMERA] = np.zeros_like(gw[GAUGE_CAMERA])
        gbeta = [2.0 * b * g for b, g in zip(state.beta, gw)]
        return Gradients(total, gq, gw, gbeta, values, converged)


def _engine_for(state, graph, config):
    sizes = [len(q) for q in state.particles]
    eng = state.engine
    if eng is None or not eng.matches(graph, config, sizes):
        eng = _Engine(graph, config, sizes)
        state.engine = eng
    return eng


def total_loss(state, graph, config):
    """Sum of edge divergences plus the mass penalty in unconstrained mode."""
    loss, _, _ = _engine_for(state, graph, config).evaluate(state, need_grad=False)
    return loss


def loss_gradients(state, graph, config, zero_gauge=True):
    """Loss with per-camera position, weight and beta gradients."""
    return _engine_for(state, graph, config).evaluate(state, zero_gauge=zero_gauge)


def _check_constraints(state, config):
    norm_err = max(float(np.max(np.abs(np.linalg.norm(q, axis=-1) - 1.0))) for q in state.particles)
    sphere_err = 0.0
    if config.constrained:
        sphere_err = max(abs(float(np.sum(b**2)) - 1.0) for b in state.beta)
    state.max_norm_error = max(state.max_norm_error, norm_err)
    state.max_sphere_error = max(state.max_sphere_error, sphere_err)
    if norm_err > 1e-9 or sphere_err > 1e-9:
        raise ConstraintViolation(
            f"iteration {state.iteration}: particle norm error {norm_err:.3e}, "
            f"weight sphere error {sphere_err:.3e}"
        )
    if any(np.any(q[:, 0] < 0) for q in state.particles):
        raise ConstraintViolation(f"iteration {state.iteration}: non-canonical particle")


def rpgd_step(state, graph, config):
    """One simultaneous update of all free particles and weights."""
    grads = loss_gradients(state, graph, config)
    particles = list(state.particles)
    beta = list(state.beta)
    for i in range(state.n_cameras):
        if i == GAUGE_CAMERA:
            continue
        g = grads.position[i]
        if not np.all(np.isfinite(g)):
            k = int(np.argmax(~np.isfinite(g).all(axis=-1)))
            raise NonFiniteGradientError(f"non-finite position gradient at camera {i}, particle {k}")
        if config.step_rule == CONSTANT:
            step = config.eta_q
        else:
            step = (config.eta_q / np.maximum(state.weights(i), WEIGHT_FLOOR))[:, None]
        particles[i] = canonicalize(exp_map(state.particles[i], -step * g))

    if config.update_weights:
        if state.mode == HE:
            free = [i for i in range(state.n_cameras) if i != GAUGE_CAMERA]
        else:
            free = [0]
        for i in free:
            gb = grads.beta[i]
            if config.constrained:
                new = sphere_exp(state.beta[i], -config.eta_beta * gb)
            else:
                new = state.beta[i] - config.eta_beta * gb
            beta[i] = new
        if state.mode == LE:
            beta = [beta[0]] * state.n_cameras

    trace, clock = state.loss_trace, state.trace_wallclock
    if state.iteration % config.trace_stride == 0:
        trace = trace + [(state.iteration, grads.loss)]
        clock = clock + [time.perf_counter() - state.started]
    counts = state.unconverged_counts
    counts = (~grads.edge_converged).astype(int) if counts is None else counts + ~grads.edge_converged
    ever = grads.edge_converged if state.ever_converged is None else state.ever_converged | grads.edge_converged
    new = replace(
        state,
        particles=particles,
        beta=beta,
        iteration=state.iteration + 1,
        loss_trace=trace,
        trace_wallclock=clock,
        last_loss=grads.loss,
        edge_converged=grads.edge_converged,
        unconverged_counts=counts,
        ever_converged=ever,
    )
    if config.debug:
        _check_constraints(new, config)
    return new


def fix_gauge(state, reference):
    """Pin camera 0 to ``reference`` (particles and weights)."""
    cam = state.particles[GAUGE_CAMERA]
    if len(reference) != len(cam):
        raise ValueError(
            f"gauge reference has {len(reference)} particles, camera 0 has {len(cam)}"
        )
    particles = list(state.particles)
    beta = list(state.beta)
    particles[GAUGE_CAMERA] = reference.particles.copy()
    if state.mode == LE:
        beta = [reference.beta.copy()] * state.n_cameras
    else:
        beta[GAUGE_CAMERA] = reference.beta.copy()
    return replace(state, particles=particles, beta=beta, gauge=reference)


def identity_gauge():
    return AbsoluteBelief(GAUGE_CAMERA, IDENTITY[None], np.ones(1))


def _initial_state(graph, config, init, gauge, rng):
    if init is not None:
        if init.mode != config.mode:
            raise ValueError(f"initial coupling is {init.mode}, config asks for {config.mode}")
        state = SyncState.from_coupling(init)
    else:
        sizes = [config.K] * graph.n_cameras
        sizes[GAUGE_CAMERA] = len(gauge)
        particles = [sample_uniform(rng, k) for k in sizes]
        if config.mode == LE:
            shared = np.full(config.K, 1.0 / np.sqrt(config.K))
            beta = [shared] * graph.n_cameras
        else:
            beta = [np.full(k, 1.0 / np.sqrt(k)) for k in sizes]
        state = SyncState(config.mode, particles, beta)
    return state


def run(graph, config, init=None, gauge=None, callback=None):
    """Riemannian particle gradient descent from a random or given start.

    Particles start uniform on the sphere with uniform weights unless
    ``init`` (a :class:`JointCoupling`) is given. Camera 0 is pinned to
    ``gauge`` (default: a single particle at the identity). Stops after
    ``max_iter`` steps or when the loss improved by less than
    ``early_stop_rtol`` (relative) over ``early_stop_window`` steps.
    """
    graph.check_connected()
    rng = np.random.default_rng(config.seed)
    if gauge is None:
        if config.mode == LE and config.K > 1:
            raise ValueError("LE coupling with K > 1 needs an explicit gauge reference")
        gauge = identity_gauge()
    if config.mode == LE and len(gauge) != config.K:
        raise ValueError(f"LE gauge reference must carry K = {config.K} particles")
    state = _initial_state(graph, config, init, gauge, rng)
    state = fix_gauge(state, gauge)
    state.rng_state = rng.bit_generator.state
    state.started = time.perf_counter()

    window = deque(maxlen=config.early_stop_window + 1)
    while state.iteration < config.max_iter:
        state = rpgd_step(state, graph, config)
        window.append(state.last_loss)
        if callback is not None:
            callback(state)
        if len(window) == window.maxlen:
            old, new = window[0], window[-1]
            if old - new <= config.early_stop_rtol * abs(old):
                break

    final = loss_gradients(state, graph, config)
    state.last_loss = final.loss
    state.edge_converged = final.edge_converged
    if state.ever_converged is None:
        state.ever_converged = final.edge_converged
    else:
        state.ever_converged = state.ever_converged | final.edge_converged
    if not state.loss_trace or state.loss_trace[-1][0] != state.iteration:
        state.loss_trace = state.loss_trace + [(state.iteration, final.loss)]
        state.trace_wallclock = state.trace_wallclock + [time.perf_counter() - state.started]
    return state
