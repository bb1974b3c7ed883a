"""
Quality model for layered video sessions.

A session's perceived quality is a staircase in its rate. The staircase
is smoothed by one logistic step per layer, and the optimizer works with
the logarithm of that smoothed utility expressed in the log-rate
``ell = alpha * x``. Quantities such as ``exp(alpha * beta)`` overflow at
Kbps scale, so everything is kept as logs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class ProfileError(ValueError):
    """Raised when a quality profile violates one of its invariants."""


def _log_add(a: float, b: float) -> float:
    # scalar logaddexp; math is much faster than numpy on floats
    if a < b:
        a, b = b, a
    if b == -math.inf:
        return a
    return a + math.log1p(math.exp(b - a))


@dataclass(frozen=True)
class SegmentConstants:
    """Per-segment constants in log form.

    Attributes
    ----------
    logA, logB : ndarray
        ``log A_i = alpha*beta_i`` and ``log B_i = log A_i + log(u_i/u_{i+1})``.
    logAmB : ndarray
        ``log(A_i - B_i)``.
    logG : ndarray
        ``alpha * (beta_i - beta_{i-1}) / 2`` for ``i = 1..N``.
    lo, hi : ndarray
        Edges of the rate intervals, Kbps.
    """

    logA: np.ndarray
    logB: np.ndarray
    logAmB: np.ndarray
    logG: np.ndarray
    lo: np.ndarray
    hi: np.ndarray


@dataclass(frozen=True, eq=False)
class QualityProfile:
    """One session's utility model.

    Use :func:`build_profile` rather than the constructor; it validates the
    inputs and fills in the segment constants.
    """

    session_id: str
    u: np.ndarray
    beta: np.ndarray
    alpha: float
    w: float
    m: float
    M: float
    seg: SegmentConstants = field(repr=False)
    # scalar copies for the hot loops in the solver
    _rows: tuple = field(repr=False, default=())

    @property
    def N(self) -> int:
        return len(self.u) - 1

    @property
    def log_walpha(self) -> float:
        return math.log(self.w * self.alpha)


def build_profile(u, beta, alpha, w, m=None, M=None, session_id="s0") -> QualityProfile:
    """Validate inputs and build a :class:`QualityProfile`.

    Parameters
    ----------
    u : sequence of float
        Quality indices ``u_0 .. u_N``; ``u_0`` must be positive.
    beta : sequence of float
        Rate indices in Kbps, strictly increasing.
    alpha : float
        Sigmoid sharpness per Kbps.
    w : float
        Session weight.
    m, M : float, optional
        Rate box. Default to the first and last rate index.
    session_id : str
        Label carried into traces.

    Returns
    -------
    QualityProfile

    Raises
    ------
    ProfileError
        With a message naming the violated invariant.
    """
    u = np.asarray(u, dtype=float)
    beta = np.asarray(beta, dtype=float)
    if u.ndim != 1 or beta.ndim != 1 or len(u) == 0:
        raise ProfileError("quality and rate indices must be nonempty sequences")
    if len(u) != len(beta):
        raise ProfileError(f"length mismatch: {len(u)} quality indices vs {len(beta)} rate indices")
    if len(u) < 2:
        raise ProfileError("need at least two levels (N >= 1)")
    if not (np.all(np.isfinite(u)) and np.all(np.isfinite(beta))):
        raise ProfileError("inputs must be finite")
    if np.any(np.diff(beta) <= 0):
        raise ProfileError("rate indices not increasing")
    if u[0] <= 0:
        raise ProfileError("u_0 must be positive so that log U is defined")
    if np.any(np.diff(u) <= 0):
        # C1 is also reported by check_concavity_conditions, but the log-domain
        # constants need u_i < u_{i+1} to exist at all
        raise ProfileError("quality indices not increasing")
    alpha = float(alpha)
    w = float(w)
    if not alpha > 0:
        raise ProfileError("alpha must be positive")
    if not w > 0:
        raise ProfileError("weight must be positive")
    m = float(beta[0] if m is None else m)
    M = float(beta[-1] if M is None else M)
    if not (0 < m <= beta[0]):
        raise ProfileError(f"box violation: need 0 < m <= beta_0, got m={m}")
    if not (beta[-1] <= M):
        raise ProfileError(f"box violation: need beta_N <= M, got M={M}")

    N = len(u) - 1
    db = np.diff(beta)
    du = np.diff(u)
    logA = alpha * beta[:N]
    logB = logA + np.log(u[:N] / u[1:])
    logAmB = logA + np.log(du / u[1:])
    logG = alpha * db / 2.0
    lo = np.empty(N)
    hi = np.empty(N)
    lo[0] = m
    lo[1:] = beta[1:N] - db[: N - 1] / 2.0
    hi[: N - 1] = beta[: N - 1] + db[: N - 1] / 2.0
    hi[N - 1] = M
    seg = SegmentConstants(logA, logB, logAmB, logG, lo, hi)
    # (u_i, u_{i+1}, du, logA, logB, logAmB, lo, hi, log u_i, log u_{i+1}, log(du/u_{i+1}))
    rows = tuple(
        (float(u[i]), float(u[i + 1]), float(du[i]), float(logA[i]), float(logB[i]),
         float(logAmB[i]), float(lo[i]), float(hi[i]), math.log(u[i]), math.log(u[i + 1]),
         math.log(du[i] / u[i + 1]))
        for i in range(N)
    )
    return QualityProfile(str(session_id), u, beta, alpha, w, m, M, seg, rows)


def lift_base_quality(u):
    """Replace a non-positive ``u_0`` by a small positive value.

    The new value is ``min(u_1/4, (2 u_1 - u_2)/2)``. The second term keeps
    the first quality step at least as large as the second one.

    Returns
    -------
    (list of float, float or None)
        The adjusted sequence and the new ``u_0`` (None if unchanged).
    """
    u = [float(v) for v in u]
    if u[0] > 0:
        return u, None
    cand = u[1] / 4.0
    if len(u) > 2:
        cand = min(cand, (2.0 * u[1] - u[2]) / 2.0)
    if not cand > u[0] or not cand > 0:
        raise ProfileError("cannot lift u_0: first quality step smaller than the second")
    u[0] = cand
    return u, cand


@dataclass
class ConditionReport:
    c1: bool
    c2: bool
    c3: bool
    c2_strict: bool
    min_logG: float
    logG_threshold: float
    diffs: np.ndarray

    @property
    def ok(self) -> bool:
        return self.c1 and self.c2 and self.c3

    def __str__(self) -> str:
        flag = lambda b: "pass" if b else "FAIL"
        return (f"C1 {flag(self.c1)}  C2 {flag(self.c2)}"
                f"{'' if self.c2_strict or not self.c2 else ' (ties)'}"
                f"  C3 {flag(self.c3)}  min logG {self.min_logG:.4g}")


def check_concavity_conditions(p, logG_threshold=3.0) -> ConditionReport:
    """Check the three sufficient conditions for a concave transformed utility.

    C1 requires increasing quality indices, C2 non-increasing quality
    steps and C3 ``min logG >= logG_threshold``. Equal consecutive steps
    pass C2; ``c2_strict`` records whether they are strictly decreasing.
    """
    diffs = np.diff(p.u)
    c1 = bool(np.all(diffs > 0))
    dd = np.diff(diffs)
    c2 = bool(np.all(dd <= 1e-12 * np.max(np.abs(diffs))))
    c2_strict = bool(np.all(dd < 0))
    min_logG = float(np.min(p.seg.logG))
    return ConditionReport(c1, c2, min_logG >= logG_threshold, c2_strict, min_logG,
                           float(logG_threshold), diffs)


def _check_box(p, x):
    x = np.asarray(x, dtype=float)
    if np.any(x < p.m) or np.any(x > p.M) or np.any(~np.isfinite(x)):
        raise ValueError(f"rate outside [{p.m}, {p.M}] for session {p.session_id}")
    return x


def _scalar_or_array(x, out):
    return float(out) if np.ndim(x) == 0 else out


def ideal_utility(p, x):
    """Staircase utility: ``u_j`` for ``x`` in ``(beta_{j-1}, beta_j]``, ``u_0`` at or below ``beta_0``."""
    return _scalar_or_array(x, p.u[attained_level(p, x)])


def attained_level(p, x):
    """Quality level index ``j`` reached at rate ``x``."""
    xa = _check_box(p, x)
    j = np.searchsorted(p.beta, xa, side="left")
    j = np.minimum(j, p.N)
    return int(j) if np.ndim(x) == 0 else j


def sigmoid(x, alpha, beta):
    """Logistic step ``1/(1+exp(-alpha(x-beta)))``; safe for large arguments."""
    return expit(alpha * (np.asarray(x, dtype=float) - beta))


def interval_index(p, x):
    """Index of the interval containing ``x``; shared edges go to the lower index."""
    xa = _check_box(p, x)
    i = np.searchsorted(p.seg.hi[:-1], xa, side="left")
    return int(i) if np.ndim(x) == 0 else i


def approx_utility(p, x):
    """Smoothed utility ``(u_{i+1}-u_i) F(x; alpha, beta_i) + u_i`` with ``i`` the interval of ``x``."""
    i = interval_index(p, x)
    xa = np.asarray(x, dtype=float)
    out = np.diff(p.u)[i] * sigmoid(xa, p.alpha, p.beta[i]) + p.u[i]
    return _scalar_or_array(x, out)


def _ell_to_x(p, ell):
    ell = np.asarray(ell, dtype=float)
    lo, hi = p.alpha * p.m, p.alpha * p.M
    slack = 1e-12 * max(abs(lo), abs(hi), 1.0)
    if np.any(ell < lo - slack) or np.any(ell > hi + slack) or np.any(~np.isfinite(ell)):
        raise ValueError(f"log-rate outside [{lo}, {hi}] for session {p.session_id}")
    return np.clip(ell / p.alpha, p.m, p.M)


def _split_log_utility(p, i, t):
    """Return ``(base level index, small part)`` with ``log U = log u_base + small``.

    Splitting keeps the tiny curvature of a saturated sigmoid visible;
    ``log U`` alone is dominated by the base level.
    """
    u = p.u
    t = np.asarray(t, dtype=float)
    du = u[i + 1] - u[i]
    neg = t < 0
    small = np.where(
        neg,
        np.log1p(du / u[i] * expit(np.where(neg, t, 0.0))),
        np.log1p(-du / u[i + 1] * expit(-np.where(neg, 0.0, t))),
    )
    base = np.where(neg, i, i + 1)
    return base, small


def transformed_utility(p, ell):
    """Log of the smoothed utility as a function of the log-rate ``ell = alpha x``.

    Equivalent to ``log(Delta u * z/(z + A_i) + u_i)`` with ``z = exp(ell)``,
    evaluated without forming ``z``.
    """
    x = _ell_to_x(p, ell)
    i = np.searchsorted(p.seg.hi[:-1], x, side="left")
    t = np.asarray(ell, dtype=float) - p.seg.logA[i]
    base, small = _split_log_utility(p, i, t)
    return _scalar_or_array(ell, np.log(p.u[base]) + small)


def _split_scalar(p, x: float):
    rows = p._rows
    i = 0
    last = len(rows) - 1
    while i < last and x > rows[i][7]:
        i += 1
    ui, uj, du, logA = rows[i][0], rows[i][1], rows[i][2], rows[i][3]
    t = p.alpha * x - logA
    if t < 0:
        e = math.exp(t)
        return i, rows[i][8], math.log1p(du / ui * e / (1.0 + e))
    e = math.exp(-t)
    return i + 1, rows[i][9], math.log1p(-du / uj * e / (1.0 + e))


def fast_log_utility(p, x: float) -> float:
    """Scalar ``log U(x)`` without array overhead; no range check."""
    _, base, small = _split_scalar(p, x)
    return base + small


def log_utility_delta(p, x1: float, x0: float) -> float:
    """``log U(x1) - log U(x0)`` without losing gains far below ``eps * log U``.

    On a saturated step the gain from a few Kbps can be ``exp(-40)``; the
    difference is taken between the small parts when both rates share a
    base level.
    """
    j1, b1, s1 = _split_scalar(p, x1)
    j0, b0, s0 = _split_scalar(p, x0)
    if j1 == j0:
        return s1 - s0
    return (b1 - b0) + (s1 - s0)


def _small_log(p, x: float):
    """Base index, sign and ``log|y|`` of the small part ``log1p(y)`` at ``x``."""
    rows = p._rows
    i = 0
    last = len(rows) - 1
    while i < last and x > rows[i][7]:
        i += 1
    t = p.alpha * x - rows[i][3]
    if t < 0:
        return i, 1.0, math.log(rows[i][2] / rows[i][0]) + t - math.log1p(math.exp(t))
    return i + 1, -1.0, math.log(rows[i][2] / rows[i][1]) - t - math.log1p(math.exp(-t))


def signed_log_add(a, b):
    """Sum of two numbers held as ``(sign, log|value|)``; sign 0 means zero."""
    (sa, la), (sb, lb) = a, b
    if sa == 0:
        return b
    if sb == 0:
        return a
    if la < lb:
        (sa, la), (sb, lb) = (sb, lb), (sa, la)
    if sa == sb:
        return sa, la + math.log1p(math.exp(lb - la))
    if la == lb:
        return 0.0, -math.inf
    return sa, la + math.log1p(-math.exp(lb - la))


def signed_log_utility_delta(p, x1: float, x0: float):
    """``log U(x1) - log U(x0)`` as ``(sign, log|delta|)``.

    Unlike :func:`log_utility_delta` this keeps gains such as ``exp(-900)``
    that underflow as plain floats, which happens for steep smoothing.
    """
    j1, g1, l1 = _small_log(p, x1)
    j0, g0, l0 = _small_log(p, x0)
    if j1 == j0 and max(l1, l0) < -30.0:
        # log1p(y1) - log1p(y0) = y1 - y0 to relative accuracy 1e-13
        return signed_log_add((g1, l1), (-g0, l0))
    d = log_utility_delta(p, x1, x0)
    if d == 0.0:
        return 0.0, -math.inf
    return math.copysign(1.0, d), math.log(abs(d))


def log_utility(p, x):
    """``log U(x)`` for rates in Kbps."""
    return transformed_utility(p, p.alpha * np.asarray(x, dtype=float))


def segment_log_derivative(p, i, ell):
    """``log dU~/dz`` on segment ``i``: ``log[(A-B)/((z+A)(z+B))]``."""
    ell = np.asarray(ell, dtype=float)
    s = p.seg
    out = s.logAmB[i] - np.logaddexp(ell, s.logA[i]) - np.logaddexp(ell, s.logB[i])
    return _scalar_or_array(ell, out)


def transformed_utility_derivative(p, ell):
    """Log of the derivative of the transformed utility with respect to ``z = exp(ell)``.

    At an interval edge the lower segment's one-sided value is returned;
    use :func:`segment_log_derivative` to pick the side explicitly.
    """
    x = _ell_to_x(p, ell)
    i = np.searchsorted(p.seg.hi[:-1], x, side="left")
    return segment_log_derivative(p, i, ell)


@dataclass
class ConcavityCertificate:
    """Numerical concavity evidence for one profile.

    ``max_second_diff`` is the largest z-normalised second difference on a
    uniform log-rate grid, in utility units. ``max_junction_ratio`` is the
    largest log ratio of right to left derivative at segment edges; it must
    be non-positive for the piecewise function to stay concave there.
    """

    max_second_diff: float
    max_junction_ratio: float
    n: int
    max_edge_jump: float = 0.0

    def passed(self, tol=1e-8) -> bool:
        return self.max_second_diff <= tol and self.max_junction_ratio <= tol


def numerical_concavity(p, n=10_000) -> ConcavityCertificate:
    """Check concavity of ``z -> U~(z)`` on ``n`` log-rate grid points.

    With nodes uniform in ``ell`` the z-spacing grows by ``exp(h)`` per node,
    so the second difference normalised to the local spacing is
    ``dU_k - exp(h) dU_{k-1}``. It is non-positive for a concave function.
    Each triple of nodes is evaluated with the middle node's segment
    formula; the edges are covered by the one-sided derivative test. The
    piecewise formula jumps by about ``exp(-logG)`` at each edge, which is
    reported as ``max_edge_jump`` and is not part of the verdict.
    """
    ell = np.linspace(p.alpha * p.m, p.alpha * p.M, n)
    h = ell[1] - ell[0]
    x = np.clip(ell / p.alpha, p.m, p.M)
    i = np.searchsorted(p.seg.hi[:-1], x, side="left")
    lu = np.log(p.u)
    mid = i[1:-1]

    def at(e):
        base, small = _split_log_utility(p, mid, e - p.seg.logA[mid])
        return lu[base], small

    # differences on the base/small split so saturated regions keep precision
    b0, s0 = at(ell[:-2])
    b1, s1 = at(ell[1:-1])
    b2, s2 = at(ell[2:])
    d_lo = (b1 - b0) + (s1 - s0)
    d_hi = (b2 - b1) + (s2 - s1)
    d2 = d_hi - math.exp(h) * d_lo
    worst = -math.inf
    jump = 0.0
    for k in range(p.N - 1):
        eb = p.alpha * p.seg.hi[k]
        left = segment_log_derivative(p, k, eb)
        right = segment_log_derivative(p, k + 1, eb)
        worst = max(worst, right - left)
        bl, sl = _split_log_utility(p, np.array([k]), np.array([eb - p.seg.logA[k]]))
        br, sr = _split_log_utility(p, np.array([k + 1]), np.array([eb - p.seg.logA[k + 1]]))
        jump = max(jump, abs(float((lu[br[0]] - lu[bl[0]]) + (sr[0] - sl[0]))))
    return ConcavityCertificate(float(np.max(d2)), float(worst), n, jump)
