"""
Message-passing simulation of the single-update algorithm.

Link and source agents only see their own state and inbox. Each round
sources report ``(x_ref, candidate)`` to every link on their path, links
answer with ``(log price, safeguard fraction)``, and sources commit and
compute their next candidate. Rounds are synchronous; the order in which
agents run inside a round does not change any result.
"""

from __future__ import annotations

import csv
import math
import random
import time
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .scp_solver import IterationTrace, _finish, _row, _start, link_update, prices_settled, source_update


@dataclass(frozen=True)
class Message:
    round: int
    kind: str  # "rate-report" | "price-update"
    src: str
    dst: str
    payload: tuple


@dataclass
class MessageStats:
    count: int
    rounds: int
    per_link: dict
    per_kind: dict


class SourceAgent:
    def __init__(self, index, sid, profile, path_ids, x0, cfg):
        self.index = index
        self.id = sid
        self.p = profile
        self.path = list(path_ids)
        self.x_ref = float(x0)
        self.v = float(x0)
        self.x = float(x0)
        self.seg = 0
        self.clamps = 0
        self.cfg = cfg
        self.inbox = []

    def report(self, rnd):
        return [Message(rnd, "rate-report", self.id, l, (self.x_ref, self.v)) for l in self.path]

    def step(self):
        # order by path position so the log-sum over prices is schedule independent
        got = {m.src: m.payload for m in self.inbox}
        self.inbox = []
        lam = [got[l][0] for l in self.path]
        theta = [got[l][1] for l in self.path]
        self.x, self.v, self.seg, c = source_update(self.p, lam, theta, self.x_ref, self.v, self.cfg)
        self.clamps += c
        self.x_ref = self.x


class LinkAgent:
    def __init__(self, lid, capacity, session_ids, alphas, lam0, cfg):
        self.id = lid
        self.c = float(capacity)
        self.sessions = list(session_ids)
        self.alphas = list(alphas)
        self.lam = float(lam0)
        self.theta = 1.0
        self.guards = 0
        self.cfg = cfg
        self.inbox = []

    def step(self, rnd):
        got = {m.src: m.payload for m in self.inbox}
        self.inbox = []
        xr = [got[s][0] for s in self.sessions]
        v = [got[s][1] for s in self.sessions]
        self.lam, _, self.theta, h = link_update(self.lam, self.c, self.alphas, xr, v, self.cfg)
        self.guards += h
        return [Message(rnd, "price-update", self.id, s, (self.lam, self.theta)) for s in self.sessions]


def _deliver(msgs, agents, rng):
    if rng is not None:
        msgs = list(msgs)
        rng.shuffle(msgs)
    for m in msgs:
        agents[m.dst].inbox.append(m)


def run_distributed(net, profiles, config, x0=None, trace=True, schedule=None, keep_log=True):
    """Run the single-update algorithm with explicit agents and messages.

    Parameters
    ----------
    schedule : int, optional
        Seed for shuffling agent execution and message delivery order within
        each round. ``None`` runs agents in index order.
    keep_log : bool
        Keep every message (needed for :func:`write_message_log`).

    Returns
    -------
    (Solution, IterationTrace or None, MessageStats)
        ``MessageStats.log`` holds the messages when ``keep_log`` is set.
    """
    t0 = time.perf_counter()
    cfg = config
    x_start = _start(net, profiles, cfg, x0)
    rng = random.Random(schedule) if schedule is not None else None
    link_ids = net.link_ids
    sources = [SourceAgent(s, net.session_ids[s], profiles[s], [link_ids[l] for l in net.paths[s]],
                           x_start[s], cfg) for s in range(net.S)]
    links = [LinkAgent(link_ids[l], net.c[l], [net.session_ids[s] for s in net.sessions_on(l)],
                       [profiles[s].alpha for s in net.sessions_on(l)], math.log(cfg.mu0), cfg)
             for l in range(net.L)]
    by_id = {a.id: a for a in sources + links}
    tr = IterationTrace(net.session_ids, link_ids) if trace else None
    log_ = []
    per_link = Counter()
    per_kind = Counter()
    converged = False
    k = 0
    for k in range(1, cfg.max_outer + 1):
        before = [a.x_ref for a in sources]
        reports = [m for a in sources for m in a.report(k)]
        _deliver(reports, by_id, rng)
        order = list(links)
        if rng is not None:
            rng.shuffle(order)
        prices = [m for a in order for m in a.step(k)]
        _deliver(prices, by_id, rng)
        order = list(sources)
        if rng is not None:
            rng.shuffle(order)
        for a in order:
            a.step()
        for m in reports:
            per_link[m.dst] += 1
        for m in prices:
            per_link[m.src] += 1
        per_kind["rate-report"] += len(reports)
        per_kind["price-update"] += len(prices)
        if keep_log:
            log_.extend(reports)
            log_.extend(prices)
        x_now = [a.x for a in sources]
        delta = max(abs(a - b) for a, b in zip(x_now, before))
        pending = max(abs(a.v - a.x) for a in sources)
        _row(tr, net, profiles, k, 0, x_now, [a.lam for a in links], delta)
        if not all(math.isfinite(v) for v in x_now):
            break
        # global stop detector of the simulation, not an agent decision
        if delta <= cfg.th1 and pending <= cfg.th1 and prices_settled(net, profiles, x_now, [a.lam for a in links], cfg):
            converged = True
            break
    x = np.array([a.x for a in sources])
    lam = np.array([a.lam for a in links])
    sol = _finish(net, profiles, x, lam, converged, k, k, "distributed",
                  sum(a.guards for a in links), sum(a.clamps for a in sources), t0,
                  segs=[a.seg for a in sources])
    stats = MessageStats(sum(per_kind.values()), k, dict(per_link), dict(per_kind))
    stats.log = log_
    return sol, tr, stats


def message_stats(run) -> MessageStats:
    """Totals from a message list, or pass-through for an existing :class:`MessageStats`."""
    if isinstance(run, MessageStats):
        return run
    msgs = list(run)
    per_link = Counter()
    for m in msgs:
        per_link[m.dst if m.kind == "rate-report" else m.src] += 1
    rounds = len({m.round for m in msgs})
    return MessageStats(len(msgs), rounds, dict(per_link), dict(Counter(m.kind for m in msgs)))


def write_message_log(msgs, path):
    """CSV with columns ``round, kind, from, to, payload`` (payload pair joined by ``;``)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "kind", "from", "to", "payload"])
        for m in msgs:
            w.writerow([m.round, m.kind, m.src, m.dst, ";".join(repr(float(v)) for v in m.payload)])
