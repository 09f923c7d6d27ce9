"""Unit-quaternion algebra and Riemannian calculus on the rotation manifold.

Conventions
-----------

- Quaternions are stored ``wxyz`` in the last axis of a float array, so every
  function accepts a single quaternion of shape ``(4,)`` or a batch ``(..., 4)``.
- Tangent vectors are 3-vectors, the imaginary part of a pure quaternion
  ``(0, v)``, expressed in the body frame of their base point: the geodesic
  leaving ``q`` in direction ``v`` is ``q * exp(v)``.
- ``q`` and ``-q`` are the same rotation. Distances are invariant to the sign of
  either argument and stored quaternions are kept canonical (``w >= 0``).
"""

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])

# below this norm a tangent vector or an imaginary part counts as zero
_TINY = 1e-12


def normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonicalize(q):
    """Flip signs so that ``w >= 0``.

    On the ``w == 0`` great sphere the first nonzero of ``(x, y, z)`` is made
    positive instead, which makes the representative unique.
    """
    q = np.asarray(q, dtype=float)
    sign = np.sign(q[..., 0])
    if np.any(sign == 0):
        vec = q[..., 1:]
        nonzero = vec != 0
        first = np.argmax(nonzero, axis=-1)
        lead = np.take_along_axis(vec, first[..., None], axis=-1)[..., 0]
        sign = np.where(sign == 0, np.sign(lead), sign)
        sign = np.where(sign == 0, 1.0, sign)
    return q * sign[..., None]


def quat_mul(p, r, renormalize=True):
    """Hamilton product ``p * r`` (broadcasts over leading axes)."""
    p = np.asarray(p, dtype=float)
    r = np.asarray(r, dtype=float)
    pw, pv = p[..., :1], p[..., 1:]
    rw, rv = r[..., :1], r[..., 1:]
    w = pw * rw - np.sum(pv * rv, axis=-1, keepdims=True)
    v = pw * rv + rw * pv + np.cross(pv, rv)
    out = np.concatenate([w, v], axis=-1)
    if renormalize:
        out = out / np.linalg.norm(out, axis=-1, keepdims=True)
    return out


def conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def rotate_vector(q, v):
    """Imaginary part of ``q * (0, v) * conj(q)`` for unit ``q``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    qw, qv = q[..., :1], q[..., 1:]
    t = 2.0 * np.cross(qv, v)
    return v + qw * t + np.cross(qv, t)


def exp_map(q, eta):
    """Riemannian exponential ``q * (cos|eta|, sin|eta| eta/|eta|)``.

    A zero tangent vector returns ``q`` untouched (bitwise).
    """
    q = np.asarray(q, dtype=float)
    eta = np.asarray(eta, dtype=float)
    theta = np.linalg.norm(eta, axis=-1, keepdims=True)
    # sin(theta)/theta without the 0/0
    step = np.concatenate([np.cos(theta), np.sinc(theta / np.pi) * eta], axis=-1)
    out = quat_mul(q, step)
    return np.where(theta == 0.0, np.broadcast_to(q, out.shape), out)


def log_map(q, p):
    """Riemannian logarithm: tangent vector at ``q`` pointing to ``p``.

    Raises
    ------
    ValueError
        If ``p`` is (numerically) antipodal to ``q``; canonicalize first or use
        :func:`geo_distance`, which identifies ``p`` with ``-p``.
    """
    z = quat_mul(conjugate(q), p, renormalize=False)
    w = np.clip(z[..., 0], -1.0, 1.0)
    v = z[..., 1:]
    vnorm = np.linalg.norm(v, axis=-1)
    if np.any((vnorm < _TINY) & (w < 0)):
        raise ValueError("antipodal log-map undefined")
    angle = np.arctan2(vnorm, w)
    scale = np.where(vnorm < _TINY, 0.0, angle / np.where(vnorm < _TINY, 1.0, vnorm))
    return v * scale[..., None]


def geo_distance(q1, q2):
    """Geodesic distance with antipodal identification, in ``[0, pi/2]``.

    Equal to ``arccos(|w|)`` with ``(w, v) = conj(q1) * q2``; evaluated as
    ``atan2(|v|, |w|)``, which keeps full precision near zero distance.
    """
    z = quat_mul(conjugate(q1), q2, renormalize=False)
    return np.arctan2(np.linalg.norm(z[..., 1:], axis=-1), np.abs(z[..., 0]))


def geo_distance_subgrad(x, y):
    """Riemannian (sub)gradient of ``geo_distance(., y)`` at ``x``.

    Returns ``-s v/|v|`` with ``v`` the imaginary part of ``conj(x) * y`` and
    ``s = sign(<x, y>)`` (``s = 1`` when the inner product vanishes). Zero
    when ``x = +-y``.
    """
    z = quat_mul(conjugate(x), y, renormalize=False)
    s = np.where(z[..., 0] < 0, -1.0, 1.0)
    v = z[..., 1:]
    vnorm = np.linalg.norm(v, axis=-1)
    safe = np.where(vnorm < _TINY, 1.0, vnorm)
    coef = np.where(vnorm < _TINY, 0.0, -s / safe)
    return v * coef[..., None]


def relpose_grads(qi, qj, qij):
    """Gradients of ``d(qi * conj(qj), qij)`` with respect to ``qi`` and ``qj``.

    The gradient at the estimated relative rotation is transported back to
    ``qi`` by conjugation with ``qj``; the ``qj`` gradient is its negative.
    """
    qhat = quat_mul(qi, conjugate(qj))
    g = rotate_vector(conjugate(qj), geo_distance_subgrad(qhat, qij))
    return g, -g


def sphere_exp(beta, g):
    """Exponential map on the unit hypersphere.

    ``g`` is projected onto the tangent space at ``beta`` first, so any
    ambient vector is accepted. ``g = 0`` returns ``beta`` unchanged.
    """
    beta = np.asarray(beta, dtype=float)
    g = np.asarray(g, dtype=float)
    g = g - np.dot(g, beta) * beta
    gnorm = np.linalg.norm(g)
    if gnorm == 0.0:
        return beta
    out = np.cos(gnorm) * beta + np.sin(gnorm) * (g / gnorm)
    return out / np.linalg.norm(out)


def sample_uniform(rng, size=None):
    """Uniform draw(s) on S^3, canonicalized to ``w >= 0``."""
    shape = (4,) if size is None else tuple(np.atleast_1d(size)) + (4,)
    return canonicalize(normalize(rng.standard_normal(shape)))
