"""
Brute-force references for the closed forms and the solvers.

Nothing here reuses the solver's price brackets or root formula. The
per-session oracle only evaluates the Lagrangian, and the network oracle
enumerates a rate grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .topology import link_flows
from .utility import approx_utility, ideal_utility, log_utility


class GuardError(ValueError):
    """Oracle instance larger than its guard allows."""


@dataclass(frozen=True)
class GridSpec:
    """Rate grid for :func:`grid_search_num`.

    Attributes
    ----------
    step : float or sequence of float
        Grid step in Kbps, one value for all sessions or one per session.
    max_points : int
        Guard on the total number of grid points.
    """

    step: float | tuple = 1.0
    max_points: int = 10_000_000

    def axes(self, profiles):
        steps = np.broadcast_to(np.asarray(self.step, dtype=float), (len(profiles),))
        if np.any(~(steps > 0)):
            raise ValueError("grid step must be positive")
        out = []
        for p, h in zip(profiles, steps):
            n = int(math.floor((p.M - p.m) / h + 1e-9))
            ax = p.m + h * np.arange(n + 1)
            if ax[-1] < p.M:
                ax = np.append(ax, p.M)
            out.append(ax)
        total = math.prod(len(a) for a in out)
        if total > self.max_points:
            raise GuardError(f"{total} grid points exceed the guard of {self.max_points}")
        return out


def finite_difference(f, x: float, h: float) -> float:
    """Central difference ``(f(x+h) - f(x-h)) / 2h``."""
    if not h > 0:
        raise ValueError("h must be positive")
    return (f(x + h) - f(x - h)) / (2.0 * h)


# ------------------------------------------------------- per-session oracle

def _small_parts(p, x, i):
    """Segment ``i`` formula as ``log u_j + log1p(g exp(l))``: returns ``j, g, l, log u_j``."""
    u = np.asarray(p.u, dtype=float)
    t = p.alpha * x - p.seg.logA[i]
    neg = t < 0
    j = np.where(neg, i, i + 1)
    du = u[i + 1] - u[i]
    g = np.where(neg, 1.0, -1.0)
    scale = np.where(neg, math.log(du / u[i]), math.log(du / u[i + 1]))
    at = np.abs(t)
    # log sigmoid(-|t|)
    l = scale - at - np.log1p(np.exp(-at))
    return j, g, l, np.log(u[j])


def _segment_gain(p, i, xa, xb):
    """``log`` of the rise of segment ``i``'s formula from ``xa`` to ``xb > xa``."""
    ja, ga, la, ba = _small_parts(p, xa, i)
    jb, gb, lb, bb = _small_parts(p, xb, i)
    tiny = (ja == jb) & (np.maximum(la, lb) < -30.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        hi = np.maximum(la, lb)
        lo = np.minimum(la, lb)
        same = hi + np.log(-np.expm1(lo - hi))
        both = np.logaddexp(la, lb)
        exact = np.where(ga == gb, same, both)
        d = (bb - ba) + np.log1p(gb * np.exp(lb)) - np.log1p(ga * np.exp(la))
        plain = np.log(d)
    return np.where(tiny, exact, plain)


def _log_utility_gain(p, xa, xb):
    """``log`` of the utility gain from ``xa`` to ``xb > xa``, exact where it underflows.

    Gains are integrated segment by segment. The piecewise formula jumps
    by about ``exp(-logG)`` at interval edges; far below anything a rate
    decision should react to, but visible to exact comparisons.
    """
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    out = np.full(np.broadcast(xa, xb).shape, -np.inf)
    for i in range(p.N):
        lo = np.maximum(xa, p.seg.lo[i])
        hi = np.minimum(xb, p.seg.hi[i])
        live = hi > lo
        if np.any(live):
            piece = _segment_gain(p, i, np.where(live, lo, 0.0), np.where(live, hi, 1.0))
            out = np.where(live, np.logaddexp(out, piece), out)
    return out


def _gain_minus_cost(p, log_mu, x_ref, xa, xb):
    """Log gain minus log price cost of moving from ``xa`` up to ``xb``.

    Positive means the per-session Lagrangian
    ``w log U(x) - mu (x_ref + (exp(alpha (x - x_ref)) - 1) / alpha)``
    is larger at ``xb``.
    """
    xa = np.asarray(xa, dtype=float)
    xb = np.asarray(xb, dtype=float)
    gain = math.log(p.w) + _log_utility_gain(p, xa, xb)
    if log_mu == -math.inf:
        return np.where(np.isnan(gain), -np.inf, np.inf)
    y = p.alpha * (xb - xa)
    cost = log_mu - math.log(p.alpha) + p.alpha * (xa - x_ref) + y + np.log(-np.expm1(-y))
    out = gain - cost
    return np.where(np.isnan(out), -np.inf, out)


def numeric_primal_oracle(p, mu_s: float, x_ref_s: float, step: float = 0.05, log_mu=None,
                          tol: float = 1e-7) -> float:
    """Maximise the per-session surrogate Lagrangian by scan plus golden section.

    Parameters
    ----------
    p : QualityProfile
    mu_s : float
        Path price. Ignored when ``log_mu`` is given.
    x_ref_s : float
        Expansion point in Kbps.
    step : float
        Scan step in Kbps.
    log_mu : float, optional
        Log path price, for prices that underflow.
    tol : float
        Width in Kbps at which the golden-section refinement stops.

    Notes
    -----
    The Lagrangian is concave in ``z = exp(alpha x)``, hence unimodal in
    ``x``, so the scan stops at the first grid step that does not pay for
    itself. Steps are compared through exact log gains and log costs,
    which keeps the answer meaningful when both are around ``exp(-900)``.
    Ties go to the lower rate.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    if log_mu is None:
        if mu_s < 0:
            raise ValueError("price must be non-negative")
        log_mu = math.log(mu_s) if mu_s > 0 else -math.inf
    n = int(math.floor((p.M - p.m) / step + 1e-9))
    if n + 1 > 10_000_000:
        raise GuardError("scan longer than 10^7 points")
    grid = p.m + step * np.arange(n + 1)
    if grid[-1] < p.M:
        grid = np.append(grid, p.M)
    up = _gain_minus_cost(p, log_mu, x_ref_s, grid[:-1], grid[1:]) > 0
    stops = np.flatnonzero(~up)
    k = int(stops[0]) if len(stops) else len(grid) - 1
    lo = grid[max(k - 1, 0)]
    hi = grid[min(k + 1, len(grid) - 1)]

    def better(a, b):
        # is the Lagrangian at b strictly larger than at a?
        if a == b:
            return False
        if a < b:
            return bool(_gain_minus_cost(p, log_mu, x_ref_s, a, b) > 0)
        return not bool(_gain_minus_cost(p, log_mu, x_ref_s, b, a) >= 0)

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = hi - invphi * (hi - lo)
    d = lo + invphi * (hi - lo)
    while hi - lo > tol:
        if better(c, d):
            lo, c = c, d
            d = lo + invphi * (hi - lo)
        else:
            hi, d = d, c
            c = hi - invphi * (hi - lo)
    best = 0.5 * (lo + hi)
    for cand in (grid[k], p.m, p.M):
        if better(best, cand):
            best = cand
    return float(best)


# ------------------------------------------------------- network oracle

def grid_search_num(net, profiles, grid: GridSpec, which: str = "log-smoothed"):
    """Exhaustive maximisation over a feasible rate grid.

    Parameters
    ----------
    which : {"ideal", "smoothed", "log-smoothed"}
        Objective ``sum w U_ideal``, ``sum w U`` or ``sum w log U``.

    Returns
    -------
    (ndarray, float)
        Best grid point and its objective. Ties go to the first point in
        row-major grid order.
    """
    if net.S > 3 or net.L > 2:
        raise GuardError("grid oracle limited to 3 sessions and 2 links")
    fn = {"ideal": ideal_utility, "smoothed": approx_utility, "log-smoothed": log_utility}.get(which)
    if fn is None:
        raise ValueError(f"unknown objective {which!r}")
    axes = grid.axes(profiles)
    vals = [p.w * np.asarray(fn(p, ax), dtype=float) for p, ax in zip(profiles, axes)]
    best_v = -math.inf
    best_x = None
    # sweep the first axis, broadcast the rest
    rest_x = np.meshgrid(*axes[1:], indexing="ij") if len(axes) > 1 else []
    rest_v = sum(np.meshgrid(*vals[1:], indexing="ij")) if len(axes) > 1 else 0.0
    rest_flow = [sum(net.R[l, s + 1] * rest_x[s] for s in range(len(rest_x))) for l in range(net.L)]
    for a, (x0, v0) in enumerate(zip(axes[0], vals[0])):
        ok = np.ones(np.shape(rest_v), dtype=bool)
        for l in range(net.L):
            ok &= net.R[l, 0] * x0 + rest_flow[l] <= net.c[l] * (1 + 1e-12)
        if not np.any(ok):
            continue
        tot = np.where(ok, v0 + rest_v, -np.inf)
        idx = int(np.argmax(tot))
        v = float(np.ravel(tot)[idx])
        if v > best_v:
            best_v = v
            rest = [float(np.ravel(r)[idx]) for r in rest_x]
            best_x = np.array([x0] + rest)
    if best_x is None:
        raise ValueError("no feasible grid point")
    assert np.all(link_flows(net, best_x) <= net.c * (1 + 1e-12))
    return best_x, best_v


def sample_majorant_gaps(net, profiles, n=1000, seed=20240601, exp_guard=50.0):
    """Smallest ``g_hat_l(x, x_ref) - g_l(x)`` over random box samples.

    Returns ``(min gap, max |gap| at x = x_ref)``.
    """
    from .scp_solver import dc_constraint, linearized_constraint

    rng = np.random.default_rng(seed)
    lo = np.array([p.m for p in profiles])
    hi = np.array([p.M for p in profiles])
    worst = math.inf
    at_ref = 0.0
    for _ in range(n):
        x = rng.uniform(lo, hi)
        xr = rng.uniform(lo, hi)
        for l in range(net.L):
            worst = min(worst, linearized_constraint(net, profiles, x, xr, l, exp_guard)
                        - dc_constraint(net, profiles, x, l))
            at_ref = max(at_ref, abs(linearized_constraint(net, profiles, xr, xr, l, exp_guard)
                                     - dc_constraint(net, profiles, xr, l)))
    return worst, at_ref


def random_primal_triples(profiles, n=200, seed=20240601):
    """Random ``(profile, log path price, x_ref)`` triples covering every segment.

    A target rate is drawn in the box and the price is set so that the
    target is near-stationary, then jittered by up to one unit in log.
    """
    from .utility import interval_index, segment_log_derivative

    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        p = profiles[int(rng.integers(len(profiles)))]
        target = rng.uniform(p.m, p.M)
        x_ref = rng.uniform(p.m, p.M)
        ell = p.alpha * target
        lp = p.log_walpha + float(segment_log_derivative(p, interval_index(p, target), ell)) + p.alpha * x_ref
        out.append((p, lp + rng.uniform(-1.0, 1.0), float(x_ref)))
    return out


__all__ = ["GuardError", "GridSpec", "finite_difference", "numeric_primal_oracle", "grid_search_num",
           "sample_majorant_gaps", "random_primal_triples", "small_instance"]


def small_instance(capacity=330.0):
    """Two sessions on one link, small enough for a 0.05 Kbps grid.

    Returns ``(Network, [QualityProfile, QualityProfile])``.
    """
    from .topology import make_network
    from .utility import build_profile

    p1 = build_profile([0.5, 1.5, 2.3, 2.9], [100.0, 140.0, 180.0, 220.0], 0.5, 1.0, session_id="a")
    p2 = build_profile([0.4, 1.2, 1.9, 2.4], [100.0, 130.0, 170.0, 230.0], 0.5, 1.5, session_id="b")
    return make_network([capacity], [[0], [0]], ["L1"], ["a", "b"]), [p1, p2]
