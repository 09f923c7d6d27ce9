"""Ground costs, MMD, entropic OT and debiased Sinkhorn divergences on quaternions.

Everything here works on stacks of measure pairs sharing a shape: atoms
``X (B, n, 4)`` against ``Y (B, m, 4)``. The public single-pair functions wrap
the batched kernels with ``B = 1``; the optimizer calls the kernels directly
with one batch entry per graph edge.

Gradients with respect to atom positions are Riemannian, as 3-vectors in the
body frame of each atom (see :mod:`measync.manifold`).
"""

import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np

SQEUCLIDEAN = "sqeuclidean"
GEODESIC = "geodesic"

SINKHORN = "sinkhorn"
MMD = "mmd"

# kernel choices for MMD: exp(-c) or the conditionally-negative -c
EXP_KERNEL = "exp"
NEG_COST_KERNEL = "negcost"

# beyond this cost/alpha ratio the Gibbs kernel may underflow; use plain LSE
_KERNEL_RATIO_LIMIT = 600.0
# cold starts with a larger ratio anneal alpha down from the cost scale
_ANNEAL_RATIO = 50.0
_ANNEAL_FACTOR = 0.5
_ANNEAL_STAGE_ITERS = 50
# over-relaxation of the cross updates; an entry whose marginal error blows up
# by _RELAX_GUARD over its best so far falls back to plain updates
_RELAX = 1.8
_RELAX_GUARD = 10.0
# plain sweeps before switching unconverged entries to Newton on the semi-dual
_SINKHORN_PHASE = 30
_NEWTON_BACKTRACK = 30
_NEWTON_RIDGE = 1e-13
# relative size of a semi-dual increase that is lost in round-off
_ROUNDOFF = 64 * np.finfo(float).eps
_TINY = 1e-12

# Im(conj(x) * y)[c] == x @ _IMAG[c] @ y
_IMAG = np.zeros((3, 4, 4))
for _c, (_j, _k) in enumerate([(2, 3), (3, 1), (1, 2)]):
    # x0 y_v - y0 x_v - (x_v cross y_v), component _c + 1
    _IMAG[_c, 0, _c + 1] = 1.0
    _IMAG[_c, _c + 1, 0] = -1.0
    _IMAG[_c, _j, _k] = -1.0
    _IMAG[_c, _k, _j] = 1.0
del _c, _j, _k


class SinkhornNotConverged(RuntimeWarning):
    pass


class UnsupportedInstance(ValueError):
    pass


@dataclass(frozen=True)
class GroundCost:
    """``SQEUCLIDEAN``: ``min(|x - y|^2, |x + y|^2)``; ``GEODESIC``: ``d(x, y)**p``."""

    kind: str = GEODESIC
    p: float = 1.2

    def __post_init__(self):
        if self.kind not in (SQEUCLIDEAN, GEODESIC):
            raise ValueError(f"unknown ground cost {self.kind!r}")
        if self.kind == GEODESIC and not 1.0 <= self.p <= 2.0:
            raise ValueError(f"geodesic exponent must lie in [1, 2], got {self.p}")

    @property
    def max_value(self):
        if self.kind == SQEUCLIDEAN:
            return 2.0
        return (math.pi / 2) ** self.p


@dataclass(frozen=True)
class SinkhornPotentials:
    f: np.ndarray
    g: np.ndarray
    alpha: float
    converged: bool
    iterations: int
    marginal_error: float


class PairGeometry:
    """Pairwise quantities between two atom stacks of unit quaternions.

    ``dot`` holds ``<x_a, y_b>``, ``vnorm`` the norm of the imaginary part of
    ``conj(x_a) y_b`` and ``dist`` the geodesic distance. The imaginary parts
    themselves are never stored; :meth:`contract` applies them implicitly.
    """

    # below this value of 1 - dot^2 the norm is recomputed from the vector
    _EXACT_BELOW = 1e-10

    def __init__(self, X, Y):
        self.X = X
        self.Y = Y
        self.dot = X @ np.swapaxes(Y, -1, -2)
        # x^T M_c for the three imaginary components, reused by the gradients
        self.XM = np.moveaxis(X[..., None, :, :] @ _IMAG, -3, 0)
        adot = np.abs(self.dot)
        vnorm = np.multiply(adot, adot)
        np.subtract(1.0, vnorm, out=vnorm)
        if (vnorm < self._EXACT_BELOW).any():
            # cancellation in 1 - dot^2; use the vector itself near coincidence
            near = np.nonzero(vnorm < self._EXACT_BELOW)
            XM = np.broadcast_to(self.XM, (3,) + self.dot.shape[:-1] + (4,))
            Yb = np.broadcast_to(Y, self.dot.shape[:-2] + Y.shape[-2:])
            xm = XM[(slice(None),) + near[:-1]]
            yb = Yb[near[:-2] + (near[-1],)]
            vnorm[near] = np.sum(np.einsum("ckl,kl->ck", xm, yb) ** 2, axis=0)
        np.maximum(vnorm, 0.0, out=vnorm)
        self.vnorm = np.sqrt(vnorm, out=vnorm)
        # s = +1 on a vanishing inner product except for a signed zero
        self.sign = np.copysign(1.0, self.dot)
        self.dist = np.arctan2(self.vnorm, adot)
        self._dist_pow = {}

    def _pow(self, e):
        # dist**e, cached since cost and slope share it
        if e not in self._dist_pow:
            self._dist_pow[e] = np.ones_like(self.dist) if e == 0 else self.dist**e
        return self._dist_pow[e]

    def cost(self, cost):
        if cost.kind == SQEUCLIDEAN:
            # 4 sin^2(d / 2) = 2 - 2 |<x, y>|
            return 2.0 * (1.0 - np.minimum(np.abs(self.dot), 1.0))
        return self.dist * self._pow(cost.p - 1.0)

    def cost_slope(self, cost):
        """Scalar field ``psi`` with ``grad_x c(x_a, y_b) = psi_ab * v_ab``."""
        if cost.kind == SQEUCLIDEAN:
            return -2.0 * self.sign
        out = np.zeros_like(self.dist)
        np.divide(self._pow(cost.p - 1.0), self.vnorm, out=out, where=self.vnorm >= _TINY)
        out *= self.sign
        out *= -cost.p
        return out

    def contract(self, coef):
        """``sum_b coef_ab * v_ab`` for every ``a``, shape ``(..., n, 3)``.

        Uses bilinearity of ``v`` in ``y`` so no ``(n, m, 3)`` tensor is formed.
        """
        agg = coef @ self.Y
        return np.moveaxis(np.sum(self.XM * agg[None], axis=-1), 0, -1)


def _as_stack(atoms):
    atoms = np.asarray(atoms, dtype=float)
    return atoms[None] if atoms.ndim == 2 else atoms


def cost_matrix(X, Y, cost):
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    return PairGeometry(X, Y).cost(cost)


def _log(w):
    with np.errstate(divide="ignore"):
        return np.log(w)


class _Gibbs:
    """Log-domain soft-min reductions against a fixed cost stack.

    ``lse_rows(h)`` is ``log sum_b exp(h_b - C_ab / alpha)``. When the Gibbs
    kernel ``exp(-C / alpha)`` cannot underflow it is formed once and each
    reduction becomes a shifted matrix-vector product; otherwise reductions
    fall back to explicit log-sum-exp.
    """

    def __init__(self, C, alpha):
        self.C = C
        self.alpha = alpha
        self.use_kernel = float(np.max(C)) / alpha < _KERNEL_RATIO_LIMIT
        self.K = np.exp(-C / alpha) if self.use_kernel else None

    def _reduce(self, h, transpose):
        if self.use_kernel:
            K = np.swapaxes(self.K, -1, -2) if transpose else self.K
            shift = np.max(h, axis=-1, keepdims=True)
            e = np.exp(h - shift)
            s = (K @ e[..., None])[..., 0]
            with np.errstate(divide="ignore"):
                return np.log(s) + shift, K, e, s
        C = np.swapaxes(self.C, -1, -2) if transpose else self.C
        a = h[..., None, :] - C / self.alpha
        shift = np.max(a, axis=-1, keepdims=True)
        e = np.exp(a - shift)
        s = np.sum(e, axis=-1)
        return np.log(s) + shift[..., 0], None, e, s

    def lse_rows(self, h):
        return self._reduce(h, False)[0]

    def lse_cols(self, h):
        return self._reduce(h, True)[0]

    def conditional_rows(self, h):
        """Row-conditional Gibbs plan ``softmax_b(h_b - C_ab / alpha)`` and its LSE."""
        lse, K, e, s = self._reduce(h, False)
        if self.use_kernel:
            return lse, K * (e[..., None, :] / s[..., None])
        return lse, e / s[..., None]


def _row_violation(la, f_old, f_new, alpha):
    mu = np.exp(la)
    with np.errstate(over="ignore", invalid="ignore"):
        err = mu * np.abs(np.expm1((f_old - f_new) / alpha))
    err = np.where(mu > 0, err, 0.0)
    return np.max(err, axis=-1)


def _anneal_schedule(C, alpha):
    """Decreasing regularization levels above ``alpha`` (empty if not needed)."""
    scale = float(np.max(C))
    levels = []
    level = scale
    while level / alpha > 1.0 / _ANNEAL_FACTOR and scale / alpha > _ANNEAL_RATIO:
        levels.append(level)
        level *= _ANNEAL_FACTOR
    return levels


def _sinkhorn_cross(gibbs, la, lb, tol, max_iter, g0=None, trace=None, polish=None):
    """Alternating log-domain Sinkhorn on a batch; converged entries stop updating.

    Cold starts at small ``alpha`` are preceded by coarse passes at larger
    regularization (epsilon scaling); those passes are not counted. Unless a
    dual trace is requested, the updates are over-relaxed and entries still
    unconverged after ``_SINKHORN_PHASE`` sweeps finish with Newton steps on
    the semi-dual (see :func:`_newton_semidual`).
    """
    alpha = gibbs.alpha
    B = la.shape[0]
    if polish is None:
        polish = trace is None
    g = np.zeros(lb.shape) if g0 is None else g0.copy()
    if g0 is None:
        for level in _anneal_schedule(gibbs.C, alpha):
            coarse = _Gibbs(gibbs.C, level)
            _, g, _, _, _ = _sinkhorn_cross(
                coarse, la, lb, 1e-3, _ANNEAL_STAGE_ITERS, g0=g, polish=False
            )
    f = -alpha * gibbs.lse_rows(lb + g / alpha)
    done = np.zeros(B, dtype=bool)
    err = np.full(B, np.inf)
    best = np.full(B, np.inf)
    omega = np.full(B, 1.0 if trace is not None else _RELAX)
    iters = np.zeros(B, dtype=int)
    sweeps = min(max_iter, _SINKHORN_PHASE) if polish else max_iter
    for _ in range(sweeps):
        step = np.where(done, 0.0, omega)[:, None]
        g = g + step * (-alpha * gibbs.lse_cols(la + f / alpha) - g)
        f_new = -alpha * gibbs.lse_rows(lb + g / alpha)
        # row-marginal violation of the plan built from (f, g)
        e = _row_violation(la, f, f_new, alpha)
        omega = np.where(e > _RELAX_GUARD * best, 1.0, omega)
        best = np.minimum(best, e)
        active = ~done
        f = f + np.where(active, omega, 0.0)[:, None] * (f_new - f)
        err = np.where(active, e, err)
        iters += active
        if trace is not None:
            trace.append(_dual_value(la, lb, f, g))
        done |= e < tol
        if done.all():
            break
    if polish and not done.all():
        budget = max_iter - int(iters.max())
        if la.shape[1] >= lb.shape[1]:
            f, g, done, iters, err = _newton_semidual(
                gibbs.C, la, lb, alpha, g, done, iters, err, tol, budget
            )
        else:
            g, f, done, iters, err = _newton_semidual(
                np.swapaxes(gibbs.C, -1, -2), lb, la, alpha, f, done, iters, err, tol, budget
            )
    return f, g, done, iters, err


def _semidual(C, la, lb, alpha, g):
    """Semi-dual value, exact ``f = g^c`` and the conditional plan ``pi(b | a)``."""
    Z = (lb + g / alpha)[..., None, :] - C / alpha
    shift = np.max(Z, axis=-1, keepdims=True)
    E = np.exp(Z - shift)
    s = E.sum(axis=-1, keepdims=True)
    f = -alpha * (np.log(s) + shift)[..., 0]
    # zero-mass atoms carry -inf log weights and must not contribute
    mu = np.exp(la)
    value = np.sum(mu * np.where(mu > 0, f, 0.0), axis=-1) + np.sum(np.exp(lb) * g, axis=-1)
    E /= s
    return value, f, E


def _newton_semidual(C, la, lb, alpha, g, done, iters, err, tol, budget):
    """Damped Newton ascent on the semi-dual in the column potential ``g``.

    The semi-dual ``J(g) = <mu, g^c> + <nu, g>`` is concave; its gradient is
    the column-marginal violation of the plan whose rows are exact, and its
    Hessian is ``-A / alpha`` with ``A = sum_a mu_a (diag pi_a - pi_a pi_a^T)``.
    Newton handles the badly conditioned transfers between distant clusters
    on which plain Sinkhorn sweeps stall. ``A`` annihilates constants, so the
    system is solved with ``A + 11^T / m``. Only unconverged entries are
    carried through each iteration.
    """
    m = lb.shape[-1]
    diag = np.arange(m)
    ones = np.full((m, m), 1.0 / m) + _NEWTON_RIDGE * np.eye(m)
    g, done, iters, err = g.copy(), done.copy(), iters.copy(), err.copy()
    f = np.empty(la.shape)
    idx = np.arange(len(g))
    Ci, lai, lbi = C, la, lb
    value, fi, pi = _semidual(Ci, lai, lbi, alpha, g)
    f[:] = fi
    for _ in range(max(budget, 0)):
        weighted = pi * np.exp(lai)[..., None]
        colmass = weighted.sum(axis=-2)
        grad = np.exp(lbi) - colmass
        e = np.max(np.abs(grad), axis=-1)
        err[idx] = e
        keep = e >= tol
        done[idx[~keep]] = True
        if not keep.any():
            break
        if not keep.all():
            idx, Ci, lai, lbi = idx[keep], Ci[keep], lai[keep], lbi[keep]
            value, pi, weighted = value[keep], pi[keep], weighted[keep]
            colmass, grad = colmass[keep], grad[keep]
        A = -(np.swapaxes(weighted, -1, -2) @ pi)
        A[:, diag, diag] += colmass
        step = alpha * np.linalg.solve(A + ones, grad[..., None])[..., 0]
        slope = np.sum(grad * step, axis=-1)
        gi = g[idx]
        t = np.ones(len(idx))
        trial_v, trial_f, trial_pi = _semidual(Ci, lai, lbi, alpha, gi + step)
        # below round-off in J the increase test is meaningless; there a full
        # step is judged by the marginal violation instead
        flat = slope <= _ROUNDOFF * (1.0 + np.abs(value))
        if flat.any():
            trial_e = np.max(np.abs(np.exp(lbi) - np.sum(trial_pi * np.exp(lai)[..., None], axis=-2)), axis=-1)
            flat &= trial_e < e[keep]
        # backtracking on the entries that miss the sufficient increase
        for _ in range(_NEWTON_BACKTRACK):
            bad = np.flatnonzero((trial_v < value + 1e-4 * t * slope) & ~flat)
            if not len(bad):
                break
            t[bad] *= 0.5
            v, fb, pb = _semidual(Ci[bad], lai[bad], lbi[bad], alpha, gi[bad] + t[bad, None] * step[bad])
            trial_v[bad], trial_f[bad], trial_pi[bad] = v, fb, pb
        else:
            # round-off floor: keep the old point where J would decrease
            stuck = (trial_v < value) & ~flat
            t[stuck] = 0.0
            trial_v[stuck] = value[stuck]
            trial_f[stuck] = f[idx[stuck]]
            trial_pi[stuck] = pi[stuck]
        g[idx] = gi + t[:, None] * step
        value, pi = trial_v, trial_pi
        f[idx] = trial_f
        iters[idx] += 1
    return f, g, done, iters, err


def _sinkhorn_self(gibbs, la, tol, max_iter, f0=None):
    """Symmetric fixed point ``f = T(f)`` with averaged updates."""
    alpha = gibbs.alpha
    B = la.shape[0]
    f = np.zeros(la.shape) if f0 is None else f0.copy()
    if f0 is None:
        for level in _anneal_schedule(gibbs.C, alpha):
            f, _, _, _ = _sinkhorn_self(_Gibbs(gibbs.C, level), la, 1e-3, _ANNEAL_STAGE_ITERS, f0=f)
    done = np.zeros(B, dtype=bool)
    err = np.full(B, np.inf)
    iters = np.zeros(B, dtype=int)
    for _ in range(max_iter):
        tf = -alpha * gibbs.lse_rows(la + f / alpha)
        e = _row_violation(la, f, tf, alpha)
        active = ~done & ~(e < tol)
        err = np.where(~done, e, err)
        done |= e < tol
        if done.all():
            break
        f = np.where(active[:, None], 0.5 * (f + tf), f)
        iters += active
    return f, done, iters, err


def _dual_value(la, lb, f, g):
    return np.sum(np.exp(la) * f, axis=-1) + np.sum(np.exp(lb) * g, axis=-1)


@dataclass
class _Warm:
    """Warm-start potentials carried between optimizer iterations."""

    g_cross: np.ndarray = None
    f_self: np.ndarray = None


@dataclass
class BatchResult:
    value: np.ndarray
    position_grad: np.ndarray
    weight_grad: np.ndarray
    converged: np.ndarray


@dataclass(frozen=True)
class Divergence:
    """A divergence between estimated and observed measures, with its settings."""

    kind: str = SINKHORN
    cost: GroundCost = GroundCost()
    alpha: float = 0.05
    tol: float = 1e-9
    max_iter: int = 500
    squared: bool = False
    kernel: str = EXP_KERNEL

    def __post_init__(self):
        if self.kind not in (SINKHORN, MMD):
            raise ValueError(f"unknown divergence {self.kind!r}")
        if self.kind == SINKHORN and not self.alpha > 0:
            raise ValueError(f"entropic regularization must be positive, got {self.alpha}")
        if self.kernel not in (EXP_KERNEL, NEG_COST_KERNEL):
            raise ValueError(f"unknown kernel {self.kernel!r}")

    def target_self_term(self, Y, wy):
        """Constant ``d(nu, nu)`` (Sinkhorn) or ``K_nu,nu`` (MMD) per batch entry."""
        geo = PairGeometry(Y, Y)
        C = geo.cost(self.cost)
        if self.kind == MMD:
            K = _kernel(C, self.kernel)
            return np.einsum("bn,bnm,bm->b", wy, K, wy)
        wy = wy / wy.sum(axis=-1, keepdims=True)
        lb = _log(wy)
        gibbs = _Gibbs(C, self.alpha)
        f, _, _, _ = _sinkhorn_self(gibbs, lb, self.tol, self.max_iter)
        tf = -self.alpha * gibbs.lse_rows(lb + f / self.alpha)
        return _dual_value(lb, lb, f, tf)

    def evaluate(self, X, wx, Y, wy, target_self=None, warm=None, need_grad=True):
        """Divergence, position and weight gradients for a batch of pairs."""
        if target_self is None:
            target_self = self.target_self_term(Y, wy)
        if self.kind == MMD:
            return _mmd_batch(self, X, wx, Y, wy, target_self, need_grad)
        return _sinkhorn_batch(self, X, wx, Y, wy, target_self, warm, need_grad)


def _kernel(C, kind):
    return np.exp(-C) if kind == EXP_KERNEL else -C


def _mmd_batch(div, X, wx, Y, wy, target_self, need_grad):
    cost = div.cost
    hh = PairGeometry(X, X)
    ht = PairGeometry(X, Y)
    Khh = _kernel(hh.cost(cost), div.kernel)
    Kht = _kernel(ht.cost(cost), div.kernel)
    kw = (Khh @ wx[..., None])[..., 0]
    kv = (Kht @ wy[..., None])[..., 0]
    value = np.sum(wx * kw, axis=-1) + target_self - 2.0 * np.sum(wx * kv, axis=-1)
    if not need_grad:
        return BatchResult(value, None, None, np.ones(len(value), dtype=bool))
    weight_grad = 2.0 * (kw - kv)
    # grad_x k = -k grad_x c for exp(-c); -grad_x c for the -c kernel
    dk_hh = -Khh if div.kernel == EXP_KERNEL else -np.ones_like(Khh)
    dk_ht = -Kht if div.kernel == EXP_KERNEL else -np.ones_like(Kht)
    coef_hh = dk_hh * hh.cost_slope(cost) * wx[..., None, :]
    coef_ht = dk_ht * ht.cost_slope(cost) * wy[..., None, :]
    pos = 2.0 * wx[..., None] * (hh.contract(coef_hh) - ht.contract(coef_ht))
    return BatchResult(value, pos, weight_grad, np.ones(len(value), dtype=bool))


def _sinkhorn_batch(div, X, wx, Y, wy, target_self, warm, need_grad):
    cost, alpha = div.cost, div.alpha
    mass = wx.sum(axis=-1, keepdims=True)
    wn = wx / mass
    wyn = wy / wy.sum(axis=-1, keepdims=True)
    la, lb = _log(wn), _log(wyn)
    hh = PairGeometry(X, X)
    ht = PairGeometry(X, Y)
    gib_hh = _Gibbs(hh.cost(cost), alpha)
    gib_ht = _Gibbs(ht.cost(cost), alpha)

    g0 = f0 = None
    if warm is not None:
        g0, f0 = warm.g_cross, warm.f_self
    f, g, ok_ht, _, _ = _sinkhorn_cross(gib_ht, la, lb, div.tol, div.max_iter, g0=g0)
    fs, ok_hh, _, _ = _sinkhorn_self(gib_hh, la, div.tol, div.max_iter, f0=f0)
    if warm is not None:
        warm.g_cross, warm.f_self = g, fs

    # potentials re-extended at the hat atoms (exact row marginals)
    f_ht, cond_ht = gib_ht.conditional_rows(lb + g / alpha)
    f_hh, cond_hh = gib_hh.conditional_rows(la + fs / alpha)
    f_ht, f_hh = -alpha * f_ht, -alpha * f_hh
    d_ht = _dual_value(la, lb, f_ht, g)
    d_hh = _dual_value(la, la, f_hh, fs)
    value = 2.0 * d_ht - d_hh - target_self
    converged = ok_ht & ok_hh
    if not need_grad:
        out = value**2 if div.squared else value
        return BatchResult(out, None, None, converged)

    pos = 2.0 * wn[..., None] * (
        ht.contract(cond_ht * ht.cost_slope(cost)) - hh.contract(cond_hh * hh.cost_slope(cost))
    )
    first_var = 2.0 * f_ht - 2.0 * f_hh
    # chain rule through the mass normalization (no-op on the simplex)
    weight_grad = (first_var - np.sum(wn * first_var, axis=-1, keepdims=True)) / mass
    if div.squared:
        scale = 2.0 * value
        return BatchResult(value**2, pos * scale[:, None, None], weight_grad * scale[:, None], converged)
    return BatchResult(value, pos, weight_grad, converged)


# --- single-pair public API -------------------------------------------------


def _pair(mu, nu):
    return (
        _as_stack(mu.atoms),
        np.asarray(mu.weights, dtype=float)[None],
        _as_stack(nu.atoms),
        np.asarray(nu.weights, dtype=float)[None],
    )


def _warn_unconverged(what):
    warnings.warn(f"{what}: Sinkhorn iterations did not converge", SinkhornNotConverged, stacklevel=3)


def mmd_squared(mu, nu, cost, kernel=EXP_KERNEL):
    """Squared MMD with kernel ``exp(-c)`` (default) or ``-c``."""
    div = Divergence(MMD, cost, kernel=kernel)
    return float(div.evaluate(*_pair(mu, nu), need_grad=False).value[0])


def sinkhorn_distance(mu, nu, cost, alpha, tol=1e-9, max_iter=500, trace=None):
    """Entropic OT value ``<f, mu> + <g, nu>`` and the dual potentials.

    Positive measures are rescaled to unit mass first. ``trace``, if a list,
    receives the dual objective after every iteration.
    """
    if not alpha > 0:
        raise ValueError(f"entropic regularization must be positive, got {alpha}")
    X, wx, Y, wy = _pair(mu, nu)
    la, lb = _log(wx / wx.sum()), _log(wy / wy.sum())
    gib = _Gibbs(PairGeometry(X, Y).cost(cost), alpha)
    f, g, done, iters, err = _sinkhorn_cross(gib, la, lb, tol, max_iter, trace=trace)
    if trace is not None:
        trace[:] = [float(t[0]) for t in trace]
    pot = SinkhornPotentials(f[0], g[0], alpha, bool(done[0]), int(iters[0]), float(err[0]))
    return float(_dual_value(la, lb, f, g)[0]), pot


def transport_plan(mu, nu, cost, potentials):
    """Primal plan ``mu_a nu_b exp((f_a + g_b - C_ab) / alpha)``."""
    C = cost_matrix(mu.atoms, nu.atoms, cost)
    a = mu.weights / mu.weights.sum()
    b = nu.weights / nu.weights.sum()
    alpha = potentials.alpha
    return a[:, None] * b[None, :] * np.exp(
        (potentials.f[:, None] + potentials.g[None, :] - C) / alpha
    )


def round_plan(P, a, b):
    """Project a near-feasible plan onto the transport polytope ``U(a, b)``.

    Row and column down-scaling followed by a rank-one correction (the
    rounding step of Altschuler, Weed and Rigollet, 2017).
    """
    P = np.asarray(P, dtype=float)
    x = np.minimum(a / np.maximum(P.sum(axis=1), 1e-300), 1.0)
    P = P * x[:, None]
    y = np.minimum(b / np.maximum(P.sum(axis=0), 1e-300), 1.0)
    P = P * y[None, :]
    err_r = a - P.sum(axis=1)
    err_c = b - P.sum(axis=0)
    total = err_r.sum()
    if total > 0:
        P = P + np.outer(err_r, err_c) / total
    return P


def sinkhorn_divergence(mu, nu, cost, alpha, tol=1e-9, max_iter=500, squared=False):
    """Debiased ``2 d(mu, nu) - d(mu, mu) - d(nu, nu)`` (squared on request)."""
    div = Divergence(SINKHORN, cost, alpha, tol, max_iter, squared)
    res = div.evaluate(*_pair(mu, nu), need_grad=False)
    if not res.converged[0]:
        _warn_unconverged("sinkhorn_divergence")
    return float(res.value[0])


def mmd_position_grad(hat, target, cost, atom_index=None, kernel=EXP_KERNEL):
    """Riemannian gradient of MMD^2 w.r.t. the positions of ``hat``'s atoms.

    Returns all ``(n, 3)`` gradients, or one 3-vector if ``atom_index`` is given.
    """
    div = Divergence(MMD, cost, kernel=kernel)
    grad = div.evaluate(*_pair(hat, target)).position_grad[0]
    return grad if atom_index is None else grad[atom_index]


def sinkhorn_position_grad(hat, target, cost, alpha, potentials=None, tol=1e-9, max_iter=500,
                           squared=False):
    """Riemannian gradient of the Sinkhorn divergence w.r.t. ``hat``'s atoms.

    ``potentials`` may carry ``(g_cross, f_self)`` from an earlier solve; they
    are used as warm starts and refined to ``tol``.
    """
    div = Divergence(SINKHORN, cost, alpha, tol, max_iter, squared)
    warm = None
    if potentials is not None:
        g_cross, f_self = potentials
        warm = _Warm(np.atleast_2d(g_cross), np.atleast_2d(f_self))
    res = div.evaluate(*_pair(hat, target), warm=warm)
    if not res.converged[0]:
        _warn_unconverged("sinkhorn_position_grad")
    return res.position_grad[0]


def weight_grad(hat, target, cost, loss_kind, alpha=0.05, tol=1e-9, max_iter=500, kernel=EXP_KERNEL):
    """Gradient of the divergence w.r.t. ``hat``'s weights.

    MMD treats ``hat`` as a positive measure. Sinkhorn differentiates through
    the mass normalization, so its gradient is orthogonal to ``hat``'s weights
    and the additive gauge of the potentials drops out.
    """
    div = Divergence(loss_kind, cost, alpha, tol, max_iter, kernel=kernel)
    res = div.evaluate(*_pair(hat, target))
    if not res.converged[0]:
        _warn_unconverged("weight_grad")
    return res.weight_grad[0]


def wasserstein_lp_oracle(mu, nu, cost):
    """Exact OT cost for uniform, equal-size measures (``n <= 8``) by enumeration.

    With uniform weights the optimum of the transport LP sits at a permutation
    matrix, so the minimum over all ``n!`` assignments is exact.
    """
    n, m = len(mu), len(nu)
    if n != m or n > 8:
        raise UnsupportedInstance(f"need equal sizes n = m <= 8, got {n} and {m}")
    for w in (mu.weights, nu.weights):
        if np.ptp(w) > 1e-12 * max(1.0, abs(w[0])):
            raise UnsupportedInstance("oracle needs uniform weights")
    C = cost_matrix(mu.atoms, nu.atoms, cost)
    perms = np.array(list(itertools.permutations(range(n))))
    totals = C[np.arange(n), perms].sum(axis=1)
    return float(totals.min() / n)
