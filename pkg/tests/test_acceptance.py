"""Acceptance criteria, one test each, at the agreed tolerances."""

import math
import time

import numpy as np

from conftest import scenario, simplified, two_tier
from svcnum.oracle import (GridSpec, finite_difference, grid_search_num, numeric_primal_oracle,
                           random_primal_triples, sample_majorant_gaps, small_instance)
from svcnum.scp_solver import SolverConfig, kkt_residual, primal_from_log_price, run_simplified
from svcnum.simnet import run_distributed
from svcnum.topology import link_flows
from svcnum.utility import (approx_utility, build_profile, check_concavity_conditions, log_utility_delta,
                            numerical_concavity, segment_log_derivative)


def _groups(sc, sol):
    key = sc.reference["group_by"]
    names = sc.network.session_ids if key == "id" else sc.sequence_names
    rates, levels = {}, {}
    for s, n in enumerate(names):
        rates.setdefault(n, []).append(sol.x[s])
        levels.setdefault(n, set()).add(int(sol.levels[s]))
    return {n: float(np.mean(v)) for n, v in rates.items()}, levels


def _rate_checks(sc, sol):
    ref = sc.reference
    rates, levels = _groups(sc, sol)
    bad = []
    for n, r in ref["rates_kbps"].items():
        if abs(rates[n] - r) > ref["tolerance"] * r:
            bad.append(f"{n} {rates[n]:.1f} vs {r}")
    lv_bad = [f"{n} {sorted(levels[n])} vs {l}" for n, l in ref["levels"].items() if levels[n] != {l}]
    return rates, bad, lv_bad


def all_profiles():
    out = []
    for n in ("scenario1", "scenario2", "scenario3"):
        out += scenario(n).profiles
    return out


class TestReproduction:
    def test_scenario1_rates(self, criterion):
        sc = scenario("scenario1")
        t0 = time.perf_counter()
        sol, _ = run_simplified(sc.network, sc.profiles, sc.config, trace=False)
        wall = time.perf_counter() - t0
        rates, bad, lv_bad = _rate_checks(sc, sol)
        util = float(link_flows(sc.network, sol.x)[0] / sc.network.c[0])
        ok = sol.converged and not bad and not lv_bad and util >= 0.99 and sol.iterations <= 1000 and wall < 5
        detail = (f"converged={sol.converged} iters={sol.iterations} wall={wall:.2f}s util={util:.4f} "
                  f"rates={ {k: round(v, 1) for k, v in rates.items()} } "
                  f"off-band={bad or 'none'} level mismatches={lv_bad or 'none'}")
        assert criterion(1, ok, detail), detail

    def test_scenario2_rates(self, criterion):
        sc = scenario("scenario2")
        sol, _ = simplified("scenario2")
        rates, bad, lv_bad = _rate_checks(sc, sol)
        util = float(sol.x.sum() / sc.network.c[0])
        largest = int(np.argmax(sol.x)) == 0
        ok = not bad and not lv_bad and util >= 0.99 and largest
        detail = (f"rates={ {k: round(v, 1) for k, v in rates.items()} } util={util:.4f} "
                  f"source1 largest={largest} off-band={bad or 'none'} level mismatches={lv_bad or 'none'}")
        assert criterion(2, ok, detail), detail

    def test_scenario3_conditional(self, criterion):
        sc = scenario("scenario3")
        sol, _ = simplified("scenario3")
        kkt = kkt_residual(sc.network, sc.profiles, sol.x, log_mu=sol.lam)
        flows = link_flows(sc.network, sol.x)
        priced = [sc.network.link_ids[l] for l in range(sc.network.L)
                  if np.isfinite(sol.lam[l]) and math.exp(sol.lam[l]) > 0
                  and flows[l] >= sc.network.c[l] * (1 - 1e-9)]
        rates, bad, _ = _rate_checks(sc, sol)
        ok = sol.converged and sol.feasible and kkt <= 1e-4 and bool(priced)
        detail = (f"converged={sol.converged} feasible={sol.feasible} kkt={kkt:.2e} saturated priced links={priced}; "
                  f"informative rate match: {bad or 'all within band'}")
        assert criterion(3, ok, detail), detail


class TestCertification:
    def test_closed_form_vs_oracle(self, criterion):
        t0 = time.perf_counter()
        worst = 0.0
        for p, lp, xr in random_primal_triples(all_profiles(), n=200):
            x = primal_from_log_price(p, lp, xr)[0]
            worst = max(worst, abs(x - numeric_primal_oracle(p, None, xr, step=0.05, log_mu=lp)))
        wall = time.perf_counter() - t0
        ok = worst <= 0.01 and wall < 30
        assert criterion(4, ok, f"max disagreement {worst:.2e} Kbps over 200 triples in {wall:.1f}s"), worst

    def test_derivative_vs_finite_difference(self, criterion):
        rng = np.random.default_rng(5)
        worst = 0.0
        n = 0
        for p in all_profiles():
            for _ in range(100):
                i = int(rng.integers(p.N))
                lo, hi = p.alpha * p.seg.lo[i], p.alpha * p.seg.hi[i]
                # where the step is active, so the derivative is not lost below eps
                ell = float(np.clip(p.seg.logA[i] + rng.uniform(-8, 8), lo + 1e-3, hi - 1e-3))
                fd = finite_difference(lambda e: log_utility_delta(p, e / p.alpha, ell / p.alpha), ell, 1e-5)
                exact = math.exp(ell + float(segment_log_derivative(p, i, ell)))
                worst = max(worst, abs(fd - exact) / abs(exact))
                n += 1
        ok = worst <= 1e-6
        assert criterion(5, ok, f"max relative error {worst:.2e} at {n} points"), worst

    def test_concavity(self, criterion):
        worst = -math.inf
        failures = []
        for p in all_profiles():
            rep = check_concavity_conditions(p)
            cert = numerical_concavity(p)
            worst = max(worst, cert.max_second_diff)
            if not (rep.ok and rep.min_logG >= 3 and cert.passed(1e-8)):
                failures.append(p.session_id)
        bad = build_profile([0.5, 1, 3, 5], [100, 200, 300, 400], 0.5, 1.0)
        caught = not numerical_concavity(bad).passed(1e-8)
        ok = not failures and caught
        detail = (f"max second difference {worst:.2e}, failing bundled profiles {failures or 'none'}, "
                  f"C2-violating profile rejected={caught}")
        assert criterion(6, ok, detail), detail


class TestSolverProperties:
    def test_feasibility_and_ascent(self, criterion):
        worst_excess = -math.inf
        worst_drop = 0.0
        for name in ("scenario1", "scenario2"):
            sc = scenario(name)
            for sol, tr in (simplified(name), two_tier(name)):
                flows = np.array(tr.flows)
                worst_excess = max(worst_excess, float(np.max(flows - sc.network.c)))
                if sol.algorithm == "two-tier":
                    worst_drop = min(worst_drop, float(np.min(np.diff(tr.log_obj))))
        ok = worst_excess <= 1e-6 and worst_drop >= -1e-7
        detail = f"max link excess {worst_excess:.2e} Kbps, largest two-tier objective drop {worst_drop:.2e}"
        assert criterion(7, ok, detail), detail

    def test_majorization(self, criterion):
        worst, at_ref = math.inf, 0.0
        for name in ("scenario1", "scenario2", "scenario3"):
            sc = scenario(name)
            g, r = sample_majorant_gaps(sc.network, sc.profiles, n=1000)
            worst, at_ref = min(worst, g), max(at_ref, r)
        ok = worst >= -1e-9 and at_ref <= 1e-9
        assert criterion(8, ok, f"min gap {worst:.3g} Kbps, max gap at reference {at_ref:.3g}"), worst

    def test_weighted_jensen(self, criterion):
        sc = scenario("scenario1")
        P = sc.profiles
        w = np.array([p.w for p in P])
        wn = w / w.sum()
        lo = np.array([p.m for p in P])
        hi = np.array([p.M for p in P])
        rng = np.random.default_rng(11)
        bad = 0
        for _ in range(1000):
            x = rng.uniform(lo, hi)
            f = link_flows(sc.network, x)[0]
            if f > sc.network.c[0]:
                x = lo + (x - lo) * (sc.network.c[0] - lo.sum()) / (f - lo.sum())
            U = np.array([approx_utility(p, xs) for p, xs in zip(P, x)])
            bad += math.log(float(wn @ U)) < float(wn @ np.log(U)) - 1e-12
        assert criterion(9, bad == 0, f"{bad} violations in 1000 feasible points"), bad

    def test_distributed_equivalence(self, criterion):
        details = []
        ok = True
        for name in ("scenario1", "scenario2"):
            sc = scenario(name)
            ref, _ = simplified(name)
            for sched in (None, 3):
                sol, _, _ = run_distributed(sc.network, sc.profiles, sc.config, trace=False, schedule=sched,
                                            keep_log=False)
                same = np.array_equal(sol.x, ref.x) and np.array_equal(sol.lam, ref.lam)
                ok &= same
                details.append(f"{name}/schedule={sched}: {'bit-equal' if same else 'DIFFERENT'}")
        assert criterion(10, ok, ", ".join(details)), details

    def test_small_instance_optimality(self, criterion):
        net, P = small_instance()
        x_g, v_g = grid_search_num(net, P, GridSpec(0.05), "log-smoothed")
        sol, _ = run_simplified(net, P, SolverConfig(algorithm="simplified", th1=1e-6), trace=False)
        kkt = kkt_residual(net, P, sol.x, log_mu=sol.lam)
        ok = sol.objective >= v_g - 0.01 * abs(v_g) or kkt <= 1e-4
        detail = f"grid optimum {v_g:.6f}, solver {sol.objective:.6f}, KKT {kkt:.2e}"
        assert criterion(11, ok, detail), detail
