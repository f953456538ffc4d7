"""Matrix Fisher distribution on SO(3).

Density with respect to the normalized Haar measure::

    p(R; A) = exp(tr(A.T @ R)) / F(A)

``F`` depends on ``A`` only through the proper singular values ``s`` and is
evaluated with the one-dimensional Bessel representation::

    F(s) = int_{-1}^{1} 1/2 I0((s1-s2)(1-u)/2) I0((s1+s2)(1+u)/2) exp(s3 u) du

All quantities are computed after shifting by ``lambda0 = s1 + s2 + s3`` so
that nothing overflows for large concentrations. Derivatives are taken under
the integral sign.

Two quadrature routes exist. The graded Gauss-Legendre rule is vectorized
and smooth in ``s`` (it is what training uses); the adaptive route wraps
``scipy.integrate.quad`` and serves as a reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

from rotssl import so3

ADAPTIVE_RTOL = 1e-10


class QuadratureError(ArithmeticError):
    """Raised when adaptive quadrature misses its tolerance."""

    def __init__(self, message, achieved):
        super().__init__(f"{message} (achieved error estimate {achieved:.3g})")
        self.achieved = achieved


class SamplingError(RuntimeError):
    pass


def _graded_rule(n_nodes=10, depth=30):
    # Panels [1 - 2^-k+1, 1 - 2^-k] accumulate geometrically at both ends of
    # [-1, 1], where the integrand develops boundary layers of width ~1/s.
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    edges = np.concatenate([[0.0], 2.0 ** -np.arange(depth, -1, -1)])
    nodes, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        nodes.append(lo + half * (x + 1.0))
        weights.append(half * w)
    v = np.concatenate(nodes)
    wv = np.concatenate(weights)
    # v = 1 - u on the right half; mirror for the left half.
    u = np.concatenate([-(1.0 - v[::-1]), 1.0 - v])
    wu = np.concatenate([wv[::-1], wv])
    return u, wu


_U, _W = _graded_rule()
_WSUM = _W.sum()


def _integrands(s, u):
    """Shifted integrands for F and for its three s-derivatives."""
    s1, s2, s3 = s[..., 0:1], s[..., 1:2], s[..., 2:3]
    a = 0.5 * (s1 - s2) * (1.0 - u)
    b = 0.5 * (s1 + s2) * (1.0 + u)
    shift = np.exp((s2 + s3) * (u - 1.0))
    i0a, i0b = special.i0e(a), special.i0e(b)
    i1a, i1b = special.i1e(a), special.i1e(b)
    f = 0.5 * i0a * i0b * shift
    ta = 0.25 * (1.0 - u) * i1a * i0b * shift
    tb = 0.25 * (1.0 + u) * i0a * i1b * shift
    return f, ta + tb, tb - ta, u * f


def _check_descending(s):
    s = np.asarray(s, dtype=float)
    if s.shape[-1] != 3:
        raise ValueError("expected singular values with trailing dimension 3")
    if np.any(s[..., 0] < s[..., 1] - 1e-12) or np.any(s[..., 1] < np.abs(s[..., 2]) - 1e-12):
        raise ValueError("singular values must satisfy s1 >= s2 >= |s3|")
    return s


def _quadrature(s):
    s = _check_descending(s)
    f, d1, d2, d3 = _integrands(s, _U)
    # Dividing by the weight sum makes the rule exact on constants.
    base = (f @ _W) * (2.0 / _WSUM)
    derivs = np.stack([d1 @ _W, d2 @ _W, d3 @ _W], axis=-1) * (2.0 / _WSUM)
    if not (np.all(np.isfinite(base)) and np.all(base > 0)):
        raise FloatingPointError("normalizer quadrature produced a non-positive value")
    lam0 = s.sum(axis=-1)
    log_f = np.where(np.all(s == 0, axis=-1), 0.0, lam0 + np.log(base))
    return log_f, derivs / base[..., None]


def log_normalizer(s):
    """``log F(s)`` for proper singular values ``s`` (descending, s3 may be < 0)."""
    return _quadrature(s)[0]


def dlogf_ds(s):
    """Gradient of ``log F`` with respect to the proper singular values."""
    return _quadrature(s)[1]


def log_normalizer_adaptive(s, rtol=ADAPTIVE_RTOL):
    """Reference ``(log F, dlogF/ds)`` by adaptive quadrature for a single ``s``.

    Raises:
        QuadratureError: if ``scipy.integrate.quad`` reports failure or its
            error estimate exceeds ``rtol`` relative to the integral.
    """
    s = _check_descending(np.asarray(s, dtype=float).reshape(3))
    # Breakpoints steer the adaptive splitter towards the boundary layers.
    pts = sorted({float(p) for k in range(1, 37) for p in (1 - 2.0 ** -k, -1 + 2.0 ** -k)})
    vals = []
    for idx in range(4):
        def fn(u, idx=idx):
            return float(_integrands(s, np.array([u]))[idx][0])

        epsabs = 0.0 if idx == 0 else 0.1 * rtol * abs(vals[0])
        val, err, *rest = integrate.quad(fn, -1.0, 1.0, points=pts, epsabs=epsabs,
                                         epsrel=rtol, limit=500, full_output=1)
        # Derivative integrals may vanish; judge them against F itself.
        scale = abs(val) if idx == 0 else abs(vals[0])
        if len(rest) > 1 or err > 10 * rtol * scale:
            raise QuadratureError("normalizer quadrature did not converge", err / scale)
        vals.append(val)
    return s.sum() + np.log(vals[0]), np.array(vals[1:]) / vals[0]


def bingham_z(s):
    """Bingham-dual concentrations ``z_i = lambda_i - lambda_0`` (all <= 0)."""
    s = np.asarray(s, dtype=float)
    s1, s2, s3 = s[..., 0], s[..., 1], s[..., 2]
    lam0 = s1 + s2 + s3
    lam = np.stack([s1 - s2 - s3, -s1 + s2 - s3, -s1 - s2 + s3], axis=-1)
    return lam - lam0[..., None]


def bingham_lambdas(s):
    s = np.asarray(s, dtype=float)
    s1, s2, s3 = s[..., 0], s[..., 1], s[..., 2]
    return np.stack([s1 + s2 + s3, s1 - s2 - s3, -s1 + s2 - s3, -s1 - s2 + s3], axis=-1)


def mode(a):
    """Most likely rotation ``U @ diag(1, 1, det(UV)) @ V.T``.

    The proper SVD already carries the determinant correction, so this is
    just ``U @ V.T``.
    """
    svd = so3.proper_svd(a)
    return svd.u @ np.swapaxes(svd.v, -1, -2)


def is_degenerate(a, tol=1e-12):
    """True where ``s2 + s3 = 0`` and the mode is not unique."""
    s = so3.proper_svd(a).s
    return np.abs(s[..., 1] + s[..., 2]) <= tol * np.maximum(1.0, np.abs(s[..., 0]))


@dataclass
class FisherStats:
    svd: so3.ProperSvd
    mode: np.ndarray
    z: np.ndarray
    log_f: np.ndarray
    dlogf_ds: np.ndarray
    entropy: np.ndarray
    expected: np.ndarray
    degenerate: np.ndarray


def stats(a):
    """Everything derived from ``A`` in one pass (batched over leading dims)."""
    a = np.asarray(a, dtype=float)
    svd = so3.proper_svd(a)
    log_f, d = _quadrature(svd.s)
    vt = np.swapaxes(svd.v, -1, -2)
    return FisherStats(
        svd=svd,
        mode=svd.u @ vt,
        z=bingham_z(svd.s),
        log_f=log_f,
        dlogf_ds=d,
        entropy=log_f - np.sum(svd.s * d, axis=-1),
        expected=(svd.u * d[..., None, :]) @ vt,
        degenerate=np.abs(svd.s[..., 1] + svd.s[..., 2])
        <= 1e-12 * np.maximum(1.0, np.abs(svd.s[..., 0])),
    )


def entropy(a):
    """Differential entropy in nats relative to normalized Haar measure (<= 0)."""
    return stats(a).entropy


def expected_rotation(a):
    """``E_p[R] = U diag(dlogF/ds) V.T``, which is also ``d log F / dA``."""
    return stats(a).expected


def _trace_inner(x, y):
    return np.sum(x * y, axis=(-2, -1))


def nll_loss(a, r_gt):
    """Negative log likelihood of ``r_gt`` and its gradient with respect to ``a``."""
    st = stats(a)
    loss = st.log_f - _trace_inner(np.asarray(a, dtype=float), r_gt)
    return loss, st.expected - r_gt


def cross_entropy(a_teacher, a_student, teacher_expected=None):
    """Cross entropy ``-E_teacher[log p_student]`` and its gradient wrt ``a_student``.

    The teacher side is treated as a constant target. ``teacher_expected`` may
    be passed to reuse an already computed ``E_teacher[R]``.
    """
    if teacher_expected is None:
        teacher_expected = expected_rotation(a_teacher)
    st = stats(a_student)
    loss = st.log_f - _trace_inner(np.asarray(a_student, dtype=float), teacher_expected)
    return loss, st.expected - teacher_expected


def _acg_b(a_diag, tol=1e-12):
    # Root of sum_i 1 / (b + 2 a_i) = 1 on [1, q]; the left side is decreasing in b.
    q = a_diag.size

    def f(b):
        return np.sum(1.0 / (b + 2.0 * a_diag)) - 1.0

    if f(1.0) <= 0:
        return 1.0
    lo, hi = 1e-12, float(q)
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


def sample_bingham(z, n, rng, min_rate=1e-4, batch=None):
    """Unit quaternions from a Bingham density ``exp(sum_i z_i q_i^2)``.

    ``z`` has four entries, all ``<= 0``. Rejection sampling with an angular
    central Gaussian envelope.

    Returns:
        ``(q, acceptance_rate)``.
    """
    a = -np.asarray(z, dtype=float)
    a = a - a.min()
    q_dim = a.size
    b = _acg_b(a)
    omega = 1.0 + 2.0 * a / b
    log_m = -0.5 * (q_dim - b) + 0.5 * q_dim * np.log(q_dim / b)
    batch = batch or max(64, 2 * n)
    out, tried, accepted = [], 0, 0
    while accepted < n:
        y = rng.standard_normal((batch, q_dim)) / np.sqrt(omega)
        x = y / np.linalg.norm(y, axis=1, keepdims=True)
        log_f = -np.sum(a * x * x, axis=1)
        log_g = -0.5 * q_dim * np.log(np.sum(omega * x * x, axis=1))
        keep = np.log(rng.random(batch)) < log_f - log_g - log_m
        out.append(x[keep])
        tried += batch
        accepted += int(keep.sum())
        if tried >= 10_000 and accepted / tried < min_rate:
            raise SamplingError(
                f"acceptance rate {accepted / tried:.2e} is below {min_rate:g}; "
                "concentration too extreme for the rejection sampler")
    return np.concatenate(out)[:n], accepted / tried


def sample(a, n, rng, return_rate=False):
    """Draw ``n`` rotations from ``MF(a)`` exactly.

    ``tr(S R(q))`` is a quadratic form in ``q`` with eigenvalues
    ``bingham_lambdas(s)``, so ``R = U R(q) V.T`` with ``q`` Bingham.
    """
    svd = so3.proper_svd(np.asarray(a, dtype=float))
    lam = bingham_lambdas(svd.s)
    q, rate = sample_bingham(lam - lam.max(), n, rng)
    r = svd.u @ so3.quat_to_matrix(q) @ svd.v.T
    return (r, rate) if return_rate else r


def mc_normalizer_oracle(a, n, rng, chunk=200_000):
    """Plain Monte-Carlo ``E_Haar[exp(tr(A.T R))]`` and its standard error."""
    a = np.asarray(a, dtype=float)
    total = total_sq = 0.0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        r = so3.sample_uniform_rotation(rng, m)
        vals = np.exp(np.einsum("ij,nij->n", a, r))
        total += vals.sum()
        total_sq += (vals * vals).sum()
        done += m
    mean = total / n
    var = max(total_sq / n - mean * mean, 0.0)
    return mean, np.sqrt(var / n)
