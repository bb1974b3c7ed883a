"""
Sequential convex programming solver for the smoothed rate allocation problem.

The capacity constraint becomes concave in ``z = exp(alpha x)``. Around an
expansion point ``x_ref`` it is replaced by its tangent,

    x_ref + (exp(alpha (x - x_ref)) - 1) / alpha,

which over-estimates the true flow. Each convex surrogate is solved by dual
decomposition: links adjust prices, sessions answer with a closed-form rate.

Prices are held as logs ``lam = log(mu)``. At Kbps scale the equilibrium
prices are around ``exp(-60)`` to ``exp(-200)``, and a session's response
to a price change can be nearly a step. See ``SolverConfig.price_update``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache

import numpy as np

from .topology import initial_feasible_point, is_feasible, link_flows
from .utility import (_log_add, attained_level, fast_log_utility, interval_index, segment_log_derivative,
                      signed_log_add, signed_log_utility_delta)

log = logging.getLogger("svcnum")

LN2 = math.log(2.0)


class SolverError(RuntimeError):
    """Invalid solver input, e.g. an infeasible start."""


@dataclass
class SolverConfig:
    """Solver settings.

    Attributes
    ----------
    gamma : float
        Dual step size.
    th1, th2 : float
        Outer and inner stopping thresholds on rate changes, Kbps.
    max_outer, max_inner : int
        Iteration caps.
    algorithm : {"two-tier", "simplified"}
    exp_guard : float
        Cap on ``|alpha (x - x_ref)|`` inside exponentials.
    mu0 : float
        Initial price on every link.
    price_update : {"log", "additive"}
        ``"additive"`` is the textbook projected step
        ``mu <- [mu - gamma (c - flow)]^+``. ``"log"`` moves ``log mu`` by
        ``gamma (flow - c)``, clipped to ``max_log_step``; the same fixed
        points, but usable when prices live near ``exp(-100)``.
    max_log_step : float
        Largest change of ``log mu`` per update.
    safeguard : bool
        Scale rate increases so that every committed iterate satisfies the
        tangent constraint, hence the true one.
    settle_tol : float
        Besides small rate moves, stopping needs every link with spare
        capacity to have a price this small relative to its sessions'
        marginal utility. Without it a run started at a high price stops at
        once, because nothing moves until the price has come down.
    """

    gamma: float = 1e-2
    th1: float = 1e-2
    th2: float = 1e-3
    max_outer: int = 100_000
    max_inner: int = 10_000
    algorithm: str = "two-tier"
    exp_guard: float = 50.0
    mu0: float = 1.0
    price_update: str = "log"
    max_log_step: float = 1.0
    safeguard: bool = True
    settle_tol: float = 1e-4

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not (self.th1 > 0 and self.th2 > 0):
            raise ValueError("thresholds must be positive")
        if self.exp_guard < 10:
            raise ValueError("exp_guard must be at least 10")
        if self.algorithm not in ("two-tier", "simplified", "distributed"):
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.price_update not in ("log", "additive"):
            raise ValueError(f"unknown price_update {self.price_update!r}")
        if not self.mu0 > 0:
            raise ValueError("mu0 must be positive")
        if not self.max_log_step > 0:
            raise ValueError("max_log_step must be positive")
        self.max_outer = int(self.max_outer)
        self.max_inner = int(self.max_inner)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown solver keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **kw) -> "SolverConfig":
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return SolverConfig(**d)


@dataclass
class SolverState:
    x: np.ndarray
    x_ref: np.ndarray
    lam: np.ndarray
    k: int = 0
    t: int = 0
    segment: np.ndarray | None = None
    guards_hit: int = 0
    clamps: int = 0

    @property
    def mu(self) -> np.ndarray:
        return np.exp(self.lam)


class IterationTrace:
    """Append-only record, one row per dual update."""

    def __init__(self, session_ids, link_ids):
        self.session_ids = list(session_ids)
        self.link_ids = list(link_ids)
        self.k, self.t = [], []
        self.x, self.lam = [], []
        self.log_obj, self.raw_obj = [], []
        self.flows, self.feasible, self.max_delta = [], [], []

    def append(self, k, t, x, lam, log_obj, raw_obj, flows, feasible, max_delta):
        self.k.append(k)
        self.t.append(t)
        self.x.append(np.array(x, dtype=float))
        self.lam.append(np.array(lam, dtype=float))
        self.log_obj.append(log_obj)
        self.raw_obj.append(raw_obj)
        self.flows.append(np.array(flows, dtype=float))
        self.feasible.append(bool(feasible))
        self.max_delta.append(max_delta)

    def __len__(self):
        return len(self.k)

    @property
    def rates(self) -> np.ndarray:
        return np.array(self.x).reshape(len(self), len(self.session_ids))

    @property
    def mu(self) -> np.ndarray:
        return np.exp(np.array(self.lam).reshape(len(self), len(self.link_ids)))

    def header(self):
        return (["k", "t"] + [f"x_{s}" for s in self.session_ids] + [f"mu_{l}" for l in self.link_ids]
                + ["log_objective", "raw_objective", "max_delta", "feasible"])

    def rows(self):
        for r in range(len(self)):
            yield ([self.k[r], self.t[r]] + [float(v) for v in self.x[r]]
                   + [float(v) for v in np.exp(self.lam[r])]
                   + [self.log_obj[r], self.raw_obj[r], self.max_delta[r], int(self.feasible[r])])


@dataclass
class Solution:
    """Outcome of a solver run."""

    x: np.ndarray
    lam: np.ndarray
    levels: np.ndarray
    segments: np.ndarray
    objective: float
    raw_objective: float
    kkt: float
    converged: bool
    iterations: int
    dual_updates: int
    feasible: bool
    algorithm: str
    guards_hit: int = 0
    clamps: int = 0
    wall_time: float = 0.0
    inner_failures: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def mu(self) -> np.ndarray:
        return np.exp(self.lam)


# ---------------------------------------------------------------- constraints

def _lin_term(alpha: float, v: float, xr: float, guard: float):
    """Tangent-flow increment ``(exp(alpha (v - xr)) - 1)/alpha``.

    Past ``guard`` the exponential is continued along its tangent, which
    avoids overflow and still over-estimates the linear increment.
    """
    e = alpha * (v - xr)
    if e <= guard:
        return math.expm1(e) / alpha, False
    eg = math.exp(guard)
    return (eg - 1.0 + (e - guard) * eg) / alpha, True


def _lin_inverse(alpha: float, term: float, guard: float) -> float:
    """Rate offset whose tangent-flow increment is ``term`` (inverse of :func:`_lin_term`)."""
    y = alpha * term
    if y <= -1.0:
        return -math.inf
    eg = math.exp(guard)
    if y <= eg - 1.0:
        return math.log1p(y) / alpha
    return (guard + (y - eg + 1.0) / eg) / alpha


def dc_constraint(net, profiles, x, l) -> float:
    """``g_l = sum_s R_ls x_s - c_l``; in log-rate form ``sum_s R_ls ell_s / alpha_s - c_l``."""
    x = np.asarray(x, dtype=float)
    return float(net.R[l] @ x - net.c[l])


def linearized_constraint(net, profiles, x, x_ref, l, exp_guard=50.0, counter=None) -> float:
    """Tangent majorant of :func:`dc_constraint` at ``x_ref``.

    ``counter`` may be a one-element list; guard hits are added to it.
    """
    total = 0.0
    for s in net.sessions_on(l):
        term, hit = _lin_term(profiles[s].alpha, float(x[s]), float(x_ref[s]), exp_guard)
        total += float(x_ref[s]) + term
        if hit and counter is not None:
            counter[0] += 1
    return total - float(net.c[l])


def aggregate_price(net, mu) -> np.ndarray:
    """Path price ``mu^s = sum_l R_ls mu_l``."""
    return net.R.T @ np.asarray(mu, dtype=float)


def aggregate_log_price(lam_path) -> float:
    """``log sum exp`` of the path's log-prices, in the given order."""
    acc = -math.inf
    for v in lam_path:
        acc = _log_add(acc, v)
    return acc


# ---------------------------------------------------------------- primal side

@lru_cache(maxsize=None)
def _brackets(p):
    lw = p.log_walpha
    logL, logU = [], []
    for i in range(p.N):
        logU.append(lw + float(segment_log_derivative(p, i, p.alpha * p.seg.lo[i])))
        logL.append(lw + float(segment_log_derivative(p, i, p.alpha * p.seg.hi[i])))
    return tuple(logL), tuple(logU)


def segment_bounds(p, i):
    """Price bracket ``(logL_i, logU_i)`` of segment ``i``.

    A session with effective log-price ``log mu^s - alpha x_ref`` inside
    the bracket has its surrogate maximiser in interval ``i``.
    """
    if not 0 <= i < p.N:
        raise IndexError(f"segment {i} out of range 0..{p.N - 1}")
    logL, logU = _brackets(p)
    return logL[i], logU[i]


def select_interval(p, log_price: float, x_ref_s: float):
    """Segment whose bracket holds ``log_price - alpha x_ref``.

    Returns
    -------
    (int, bool)
        Segment index and whether the price fell outside every bracket and
        was clamped to the nearest one.
    """
    logL, logU = _brackets(p)
    pe = log_price - p.alpha * x_ref_s
    for i in range(p.N):
        if pe >= logL[i]:
            if pe <= logU[i]:
                return i, False
            if i == 0:
                return 0, True
            # gap between i-1 and i: either side clips to the shared edge
            return (i - 1, True) if logL[i - 1] - pe <= pe - logU[i] else (i, True)
    return p.N - 1, True


def _closed_form(p, i: int, pe: float) -> float:
    """Unprojected stationary rate on segment ``i`` for effective log-price ``pe``.

    Rationalised root of ``(z + A)(z + B) = w alpha (A - B) exp(-pe)``,
    which avoids the cancellation in ``du sqrt(1+Q) - u_i - u_{i+1}``.
    """
    ui, uj, du, logA, logB = p._rows[i][:5]
    lr = p._rows[i][10]
    t = lr + p.log_walpha - pe - logB
    if t <= 0:
        return -math.inf
    logQ = t + math.log(4.0 * ui * uj / (du * du))
    hs = 0.5 * _log_add(0.0, logQ)
    lexp = t + math.log(-math.expm1(-t))
    den = _log_add(math.log1p(ui / uj), lr + hs)
    return (LN2 + logB + lexp - den) / p.alpha


def primal_from_log_price(p, log_mu_s: float, x_ref_s: float, unprojected=False):
    """Surrogate maximiser for a session given its log path price.

    Returns ``(rate, segment, clamped)``.
    """
    if log_mu_s == -math.inf:
        return p.M, p.N - 1, False
    i, clamped = select_interval(p, log_mu_s, x_ref_s)
    x = _closed_form(p, i, log_mu_s - p.alpha * x_ref_s)
    if unprojected:
        return x, i, clamped
    lo, hi = p._rows[i][6], p._rows[i][7]
    x = lo if x < lo else (hi if x > hi else x)
    if math.isnan(x):
        raise FloatingPointError(f"NaN rate for session {p.session_id}")
    return x, i, clamped


def primal_step(p, mu_s: float, x_ref_s: float, exp_guard=50.0, unprojected=False) -> float:
    """Closed-form maximiser of ``w log U(x) - mu_s (x_ref + (exp(alpha(x-x_ref)) - 1)/alpha)``.

    Parameters
    ----------
    p : QualityProfile
    mu_s : float
        Path price, ``>= 0``. Zero gives ``M``.
    x_ref_s : float
        Expansion point, Kbps.
    unprojected : bool
        Return the stationary point before clipping to the interval and box.
    """
    if mu_s < 0:
        raise ValueError("price must be non-negative")
    lm = math.log(mu_s) if mu_s > 0 else -math.inf
    return primal_from_log_price(p, lm, x_ref_s, unprojected)[0]


# ---------------------------------------------------------------- dual side

def link_update(lam_l: float, c_l: float, alphas, x_ref, v, cfg: SolverConfig):
    """One price update for a single link.

    ``alphas``, ``x_ref`` and ``v`` list the sessions on the link in
    ascending session order. Shared verbatim by the centralised and the
    message-passing solvers so that both produce identical bits.

    Returns
    -------
    (new log-price, tangent flow, safeguard fraction, guard hits)
    """
    base = 0.0
    inc = 0.0
    dec = 0.0
    hits = 0
    for a, xr, vv in zip(alphas, x_ref, v):
        term, hit = _lin_term(a, vv, xr, cfg.exp_guard)
        hits += hit
        base += xr
        if term > 0:
            inc += term
        else:
            dec += term
    flow = base + dec + inc
    if cfg.price_update == "additive":
        mu = math.exp(lam_l) if lam_l > -math.inf else 0.0
        mu = max(mu - cfg.gamma * (c_l - flow), 0.0)
        new = math.log(mu) if mu > 0 else -math.inf
    else:
        step = cfg.gamma * (flow - c_l)
        step = min(max(step, -cfg.max_log_step), cfg.max_log_step)
        new = lam_l + step
    slack = c_l - base - dec
    theta = 1.0 if inc <= 0.0 or inc <= slack else max(slack, 0.0) / inc
    return new, flow, theta, hits


def dual_step(net, profiles, mu, v, x_ref, gamma, exp_guard=50.0):
    """Projected gradient step ``mu_l <- [mu_l - gamma (c_l - tangent flow_l)]^+``."""
    cfg = SolverConfig(gamma=gamma, exp_guard=exp_guard, price_update="additive")
    out = np.empty(net.L)
    for l in range(net.L):
        ss = net.sessions_on(l)
        lam = math.log(mu[l]) if mu[l] > 0 else -math.inf
        new = link_update(lam, float(net.c[l]), [profiles[s].alpha for s in ss],
                          [float(x_ref[s]) for s in ss], [float(v[s]) for s in ss], cfg)[0]
        out[l] = math.exp(new) if new > -math.inf else 0.0
    return out


def log_dual_step(net, profiles, lam, v, x_ref, gamma, max_log_step=1.0, exp_guard=50.0):
    """Log-price counterpart of :func:`dual_step`: ``lam_l += clip(gamma (flow_l - c_l))``."""
    cfg = SolverConfig(gamma=gamma, exp_guard=exp_guard, max_log_step=max_log_step)
    out = np.empty(net.L)
    for l in range(net.L):
        ss = net.sessions_on(l)
        out[l] = link_update(float(lam[l]), float(net.c[l]), [profiles[s].alpha for s in ss],
                             [float(x_ref[s]) for s in ss], [float(v[s]) for s in ss], cfg)[0]
    return out


def commit_rate(p, x_ref_s: float, v_s: float, theta: float, cfg: SolverConfig) -> float:
    """Scale an increase ``x_ref -> v`` by ``theta`` in tangent-flow units.

    Decreases pass unchanged. The returned rate's tangent increment is
    ``theta`` times the requested one, so a link whose fraction was chosen
    to fill its slack cannot be overloaded.
    """
    if not cfg.safeguard or v_s <= x_ref_s or theta >= 1.0:
        return v_s
    term, _ = _lin_term(p.alpha, v_s, x_ref_s, cfg.exp_guard)
    x = x_ref_s + _lin_inverse(p.alpha, theta * term, cfg.exp_guard)
    return min(x, v_s)


def source_update(p, lam_path, theta_path, x_ref_s, v_s, cfg):
    """Session side of one round: commit the pending move, then answer the new prices.

    ``lam_path`` and ``theta_path`` are ordered by link index.

    Returns
    -------
    (committed rate, next candidate, segment, clamped)
    """
    theta = min(theta_path) if theta_path else 1.0
    x = commit_rate(p, x_ref_s, v_s, theta, cfg)
    v, seg, clamped = primal_from_log_price(p, aggregate_log_price(lam_path), x)
    return x, v, seg, clamped


# ---------------------------------------------------------------- diagnostics

def objective(profiles, x):
    """Return ``(sum_s w_s log U_s(x_s), sum_s w_s U_s(x_s))``."""
    lo = 0.0
    raw = 0.0
    for p, xs in zip(profiles, x):
        lu = fast_log_utility(p, float(xs))
        lo += p.w * lu
        raw += p.w * math.exp(lu)
    return lo, raw


@dataclass
class KKTReport:
    residual: float
    stationarity: float
    infeasibility: float
    slackness: float
    per_session: np.ndarray


def _slackness(net, profiles, x, log_mu, flows=None) -> float:
    """Largest ``(mu_l / nu_l) |c_l - flow_l| / c_l``.

    ``nu_l`` is the largest marginal ``w d(log U)/dx`` among the link's
    sessions. Raw prices are around ``exp(-60)`` at Kbps scale and say
    nothing on their own.
    """
    if flows is None:
        flows = link_flows(net, x)
    log_marg = np.empty(net.S)
    for s, p in enumerate(profiles):
        xs = float(np.clip(x[s], p.m, p.M))
        ell = p.alpha * xs
        log_marg[s] = p.log_walpha + ell + segment_log_derivative(p, interval_index(p, xs), ell)
    slack = 0.0
    for l in range(net.L):
        gap = abs(net.c[l] - flows[l]) / net.c[l]
        if gap == 0.0 or log_mu[l] == -math.inf:
            continue
        ref = max(log_marg[s] for s in net.sessions_on(l))
        slack = max(slack, gap * math.exp(min(log_mu[l] - ref, 50.0)))
    return float(slack)


def kkt_components(net, profiles, x, mu=None, log_mu=None, edge_tol=1e-9) -> KKTReport:
    """Itemised KKT residual; see :func:`kkt_residual`."""
    x = np.asarray(x, dtype=float)
    if log_mu is None:
        mu = np.asarray(mu, dtype=float)
        with np.errstate(divide="ignore"):
            log_mu = np.log(mu)
    log_mu = np.asarray(log_mu, dtype=float)
    per = np.zeros(net.S)
    for s, p in enumerate(profiles):
        ls = aggregate_log_price([log_mu[l] for l in net.paths[s]])
        pe = ls - p.alpha * x[s]
        lw = p.log_walpha
        ell = p.alpha * x[s]
        tol = edge_tol * max(1.0, abs(x[s]))
        if pe == -math.inf:
            per[s] = 0.0 if x[s] >= p.M - tol else math.inf
            continue
        if x[s] <= p.m + tol:
            d = lw + segment_log_derivative(p, 0, p.alpha * p.m)
            per[s] = max(0.0, d - pe)
            continue
        if x[s] >= p.M - tol:
            d = lw + segment_log_derivative(p, p.N - 1, p.alpha * p.M)
            per[s] = max(0.0, pe - d)
            continue
        i = interval_index(p, x[s])
        edge = None
        if abs(x[s] - p.seg.hi[i]) <= tol and i < p.N - 1:
            edge = i
        elif i > 0 and abs(x[s] - p.seg.lo[i]) <= tol:
            edge = i - 1
        if edge is not None:
            eb = p.alpha * p.seg.hi[edge]
            d_left = lw + segment_log_derivative(p, edge, eb)
            d_right = lw + segment_log_derivative(p, edge + 1, eb)
            per[s] = max(0.0, d_right - pe, pe - d_left)
        else:
            per[s] = abs(lw + segment_log_derivative(p, i, ell) - pe)
    flows = link_flows(net, x)
    infeas = float(max(0.0, np.max(flows - net.c)))
    slack = _slackness(net, profiles, x, log_mu, flows)
    stat = float(np.max(per)) if len(per) else 0.0
    return KKTReport(float(max(stat, infeas, slack)), stat, infeas, float(slack), per)


def kkt_residual(net, profiles, x, mu=None, log_mu=None) -> float:
    """Largest of stationarity, primal infeasibility and complementary slackness.

    Stationarity compares the session's log marginal utility in ``z`` with
    its log price, so it is a relative measure. At a box bound or an
    interval edge the price only has to lie on the right side of, or
    between, the one-sided derivatives. Infeasibility is in Kbps.
    Slackness is ``(mu_l / nu_l) |c_l - flow_l| / c_l`` where ``nu_l`` is the
    largest marginal ``w d(log U)/dx`` among the link's sessions. Pass
    ``log_mu`` when prices underflow.
    """
    return kkt_components(net, profiles, x, mu, log_mu).residual


# ---------------------------------------------------------------- algorithms

def prices_settled(net, profiles, x, lam, cfg) -> bool:
    """Whether no link with spare capacity still carries a relevant price."""
    return _slackness(net, profiles, np.asarray(x, dtype=float), np.asarray(lam, dtype=float)) <= cfg.settle_tol


def _row(trace, net, profiles, k, t, x, lam, delta):
    if trace is None:
        return
    lo, raw = objective(profiles, x)
    flows = link_flows(net, x)
    feas = bool(np.all(flows <= net.c + 1e-6))
    trace.append(k, t, x, lam, lo, raw, flows, feas, delta)


def _start(net, profiles, cfg, x0):
    if x0 is None:
        return initial_feasible_point(net, profiles)
    x0 = np.asarray(x0, dtype=float).copy()
    if not is_feasible(net, profiles, x0):
        raise SolverError("infeasible start")
    return x0


def _finish(net, profiles, x, lam, converged, k, updates, algorithm, guards, clamps, t0,
            inner_failures=0, segs=None):
    lo, raw = objective(profiles, x)
    levels = np.array([attained_level(p, float(np.clip(xs, p.m, p.M))) for p, xs in zip(profiles, x)])
    if segs is None:
        segs = np.array([interval_index(p, float(np.clip(xs, p.m, p.M))) for p, xs in zip(profiles, x)])
    kkt = kkt_residual(net, profiles, x, log_mu=lam)
    return Solution(np.array(x), np.array(lam), levels, np.array(segs), lo, raw, kkt, converged, k,
                    updates, bool(is_feasible(net, profiles, x, rtol=1e-9)), algorithm, guards, clamps,
                    time.perf_counter() - t0, inner_failures)


class _Topo:
    """Per-run index lists so the loops stay in plain Python floats."""

    def __init__(self, net, profiles):
        self.links = [net.sessions_on(l) for l in range(net.L)]
        self.alphas = [[profiles[s].alpha for s in ss] for ss in self.links]
        self.paths = [list(pth) for pth in net.paths]
        self.c = [float(v) for v in net.c]


def run_simplified(net, profiles, config: SolverConfig, x0=None, trace=True):
    """Single-update variant: one price step and one rate answer per iteration.

    Each iteration ``k`` linearises at ``x^(k-1)`` with candidate
    ``v^(k)``, updates every link price, commits ``x^(k)`` (scaled when the
    safeguard is on) and computes the next candidate from the new prices.
    Stops when both the committed move and the pending move are within
    ``th1`` and :func:`prices_settled` holds.

    Returns
    -------
    (Solution, IterationTrace or None)
    """
    t0 = time.perf_counter()
    cfg = config
    tp = _Topo(net, profiles)
    x_prev = _start(net, profiles, cfg, x0)
    v = x_prev.tolist()
    xr = x_prev.tolist()
    lam = [math.log(cfg.mu0)] * net.L
    tr = IterationTrace(net.session_ids, net.link_ids) if trace else None
    S = net.S
    guards = clamps = 0
    converged = False
    segs = [0] * S
    k = 0
    for k in range(1, cfg.max_outer + 1):
        theta = [1.0] * net.L
        for l, ss in enumerate(tp.links):
            lam[l], _, theta[l], h = link_update(lam[l], tp.c[l], tp.alphas[l],
                                                 [xr[s] for s in ss], [v[s] for s in ss], cfg)
            guards += h
        x_new = [0.0] * S
        v_new = [0.0] * S
        for s in range(S):
            pth = tp.paths[s]
            x_new[s], v_new[s], segs[s], c = source_update(
                profiles[s], [lam[l] for l in pth], [theta[l] for l in pth], xr[s], v[s], cfg)
            clamps += c
        delta = max(abs(a - b) for a, b in zip(x_new, xr))
        pending = max(abs(a - b) for a, b in zip(v_new, x_new))
        _row(tr, net, profiles, k, 0, x_new, lam, delta)
        if not all(math.isfinite(a) for a in x_new):
            break
        xr, v = x_new, v_new
        if delta <= cfg.th1 and pending <= cfg.th1 and prices_settled(net, profiles, xr, lam, cfg):
            converged = True
            break
        if log.isEnabledFor(logging.DEBUG) and k % 100 == 0:
            log.debug("k=%d delta=%.3g pending=%.3g lam=%s", k, delta, pending, lam)
    sol = _finish(net, profiles, np.array(xr), np.array(lam), converged, k, k, "simplified",
                  guards, clamps, t0, segs=segs)
    return sol, tr


def _line_search(profiles, x_ref, x_hat, n_grid=33, iters=40):
    """Best point on the z-space segment from ``x_ref`` to ``x_hat``.

    Tangent flows are affine along the segment, so every point on it is
    feasible when both ends are. Returns ``(x, tau)``; ``tau = 0`` keeps
    ``x_ref``, which makes the outer loop monotone.
    """
    a = np.array([p.alpha for p in profiles])
    g = np.expm1(np.clip(a * (x_hat - x_ref), -700, 700))

    def point(tau):
        if tau == 1.0:
            return x_hat.copy()
        if tau == 0.0:
            return x_ref.copy()
        return np.minimum(x_ref + np.log1p(tau * g) / a, np.maximum(x_ref, x_hat))

    lw = [math.log(p.w) for p in profiles]

    def f(tau):
        # gains can underflow as floats, so sum them as (sign, log|value|)
        x = point(tau)
        acc = (0.0, -math.inf)
        for p, l, a_, b_ in zip(profiles, lw, x, x_ref):
            sg, lm = signed_log_utility_delta(p, float(a_), float(b_))
            acc = signed_log_add(acc, (sg, lm + l))
        sg, lm = acc
        return (sg, lm) if sg > 0 else ((sg, -lm) if sg < 0 else (0.0, 0.0))

    taus = np.linspace(0.0, 1.0, n_grid)
    vals = [f(t) for t in taus]
    best_v = max(vals)
    # on ties take the longest step: the gain may simply underflow
    j = max(i for i, v in enumerate(vals) if v == best_v)
    best_t = taus[j]
    if j == n_grid - 1:
        return point(1.0), 1.0
    lo_t, hi_t = taus[max(j - 1, 0)], taus[j + 1]
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = hi_t - invphi * (hi_t - lo_t), lo_t + invphi * (hi_t - lo_t)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc > fd:
            hi_t, d, fd = d, c, fc
            c = hi_t - invphi * (hi_t - lo_t)
            fc = f(c)
        else:
            lo_t, c, fc = c, d, fd
            d = lo_t + invphi * (hi_t - lo_t)
            fd = f(d)
    for t_, v_ in ((c, fc), (d, fd)):
        if v_ > best_v:
            best_t, best_v = t_, v_
    return point(best_t), best_t


def solve_subproblem(net, profiles, x_ref, lam_init, config: SolverConfig, trace=None, k=0, x_show=None):
    """Solve the convex surrogate at ``x_ref`` by inner price/rate iterations.

    Runs dual and primal steps from ``v = x_ref`` until the candidate moves
    by at most ``th2`` or ``max_inner`` is reached. A session's answer can
    be almost a step in the price, so with a constant step the inner
    iterates may cycle. In that case the candidate returned is the
    z-space average of the second half of the inner iterates. Components
    within ``th2`` of ``x_ref`` are reset to ``x_ref``.

    Returns
    -------
    (v, lam, theta, converged, inner_steps, guard_hits)
        ``theta`` is the per-link safeguard fraction for ``v``.
    """
    cfg = config
    tp = _Topo(net, profiles)
    xr = [float(a) for a in x_ref]
    v = list(xr)
    lam = [float(a) for a in lam_init]
    guards = 0
    converged = False
    shown = list(xr) if x_show is None else list(x_show)
    half = cfg.max_inner // 2
    acc = [0.0] * net.S
    n_acc = 0
    t = 0
    for t in range(1, cfg.max_inner + 1):
        for l, ss in enumerate(tp.links):
            lam[l], _, _, h = link_update(lam[l], tp.c[l], tp.alphas[l],
                                          [xr[s] for s in ss], [v[s] for s in ss], cfg)
            guards += h
        v_new = [primal_from_log_price(profiles[s], aggregate_log_price([lam[l] for l in tp.paths[s]]), xr[s])[0]
                 for s in range(net.S)]
        step = max(abs(a - b) for a, b in zip(v_new, v))
        v = v_new
        if t > half:
            for s, p in enumerate(profiles):
                acc[s] += _lin_term(p.alpha, v[s], xr[s], cfg.exp_guard)[0]
            n_acc += 1
        _row(trace, net, profiles, k, t, shown, lam, 0.0)
        if step <= cfg.th2:
            converged = True
            break
    if not converged and n_acc:
        v = [min(max(xr[s] + _lin_inverse(p.alpha, acc[s] / n_acc, cfg.exp_guard), p.m), p.M)
             for s, p in enumerate(profiles)]
    # moves below the inner tolerance are solve noise; left in, a 1e-7 Kbps
    # wobble on one session can outweigh a real but tiny gain on another
    v = [xr[s] if abs(v[s] - xr[s]) <= cfg.th2 else v[s] for s in range(net.S)]
    theta = []
    for l, ss in enumerate(tp.links):
        theta.append(link_update(lam[l], tp.c[l], tp.alphas[l], [xr[s] for s in ss],
                                 [v[s] for s in ss], cfg)[2])
    return np.array(v), np.array(lam), np.array(theta), converged, t, guards


def run_two_tier(net, profiles, config: SolverConfig, x0=None, trace=True):
    """Outer SCP loop with an inner dual solve per surrogate.

    After each inner solve the candidate is scaled onto the tangent
    feasible set and a line search along the z-space segment picks the
    next iterate, so the log objective never decreases.

    Returns
    -------
    (Solution, IterationTrace or None)
    """
    t0 = time.perf_counter()
    cfg = config
    x = _start(net, profiles, cfg, x0)
    lam = np.full(net.L, math.log(cfg.mu0))
    tr = IterationTrace(net.session_ids, net.link_ids) if trace else None
    guards = 0
    fails = 0
    updates = 0
    converged = False
    k = 0
    for k in range(1, cfg.max_outer + 1):
        v, lam, theta, ok, steps, h = solve_subproblem(net, profiles, x, lam, cfg, tr, k)
        guards += h
        updates += steps
        fails += not ok
        th_s = [min(theta[l] for l in net.paths[s]) for s in range(net.S)]
        x_hat = np.array([commit_rate(p, float(x[s]), float(v[s]), th_s[s], cfg)
                          for s, p in enumerate(profiles)])
        x_new, _ = _line_search(profiles, x, x_hat)
        delta = float(np.max(np.abs(x_new - x)))
        if tr is not None:
            # the last inner row shows the accepted outer iterate
            lo_, raw_ = objective(profiles, x_new)
            flows = link_flows(net, x_new)
            tr.x[-1] = x_new.copy()
            tr.log_obj[-1], tr.raw_obj[-1] = lo_, raw_
            tr.flows[-1] = flows
            tr.feasible[-1] = bool(np.all(flows <= net.c + 1e-6))
            tr.max_delta[-1] = delta
        x = x_new
        if delta <= cfg.th1 and ok and prices_settled(net, profiles, x, lam, cfg):
            converged = True
            break
    sol = _finish(net, profiles, x, lam, converged, k, updates, "two-tier", guards, 0, t0, fails)
    return sol, tr


def run(net, profiles, config: SolverConfig, x0=None, trace=True):
    """Dispatch on ``config.algorithm``."""
    if config.algorithm == "two-tier":
        return run_two_tier(net, profiles, config, x0, trace)
    if config.algorithm == "simplified":
        return run_simplified(net, profiles, config, x0, trace)
    from .simnet import run_distributed
    sol, tr, _ = run_distributed(net, profiles, config, x0, trace)
    return sol, tr
