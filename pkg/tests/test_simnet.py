import csv

import numpy as np
import pytest

from conftest import scenario
from svcnum.oracle import small_instance
from svcnum.scp_solver import SolverConfig, run_simplified
from svcnum.simnet import LinkAgent, Message, SourceAgent, message_stats, run_distributed, write_message_log
from svcnum.topology import make_network


class TestMessages:
    def test_single_source_single_link(self):
        net, P = small_instance()
        net1 = make_network([200.0], [[0]], ["L1"], ["a"])
        _, _, st = run_distributed(net1, P[:1], SolverConfig(algorithm="distributed", max_outer=7), trace=False)
        assert st.rounds == 7 and st.count == 14

    def test_scenario1_count(self):
        sc = scenario("scenario1")
        cfg = sc.config.replace(max_outer=300)
        _, _, st = run_distributed(sc.network, sc.profiles, cfg, trace=False, keep_log=False)
        assert st.rounds == 300 and st.count == 7200

    def test_scenario3_per_round(self):
        sc = scenario("scenario3")
        cfg = sc.config.replace(max_outer=10)
        _, _, st = run_distributed(sc.network, sc.profiles, cfg, trace=False)
        assert st.count / st.rounds == 2 * sum(len(p) for p in sc.network.paths) == 40
        assert st.per_kind == {"rate-report": 200, "price-update": 200}

    def test_stats_from_log(self):
        net, P = small_instance()
        _, _, st = run_distributed(net, P, SolverConfig(max_outer=4), trace=False)
        again = message_stats(st.log)
        assert (again.count, again.rounds, again.per_link) == (st.count, st.rounds, st.per_link)
        assert message_stats([]).count == 0 and message_stats([]).rounds == 0

    def test_log_export(self, tmp_path):
        net, P = small_instance()
        _, _, st = run_distributed(net, P, SolverConfig(max_outer=3), trace=False)
        path = tmp_path / "m.csv"
        write_message_log(st.log, path)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["round", "kind", "from", "to", "payload"]
        assert len(rows) == 1 + st.count
        assert all(np.isfinite([float(v) for v in r[4].split(";")]).all() for r in rows[1:])


class TestEquivalence:
    def test_bit_equal_to_centralised(self):
        net, P = small_instance()
        cfg = SolverConfig(th1=1e-6)
        a, ta = run_simplified(net, P, cfg)
        b, tb, _ = run_distributed(net, P, cfg)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.lam, b.lam)
        assert np.array_equal(np.array(ta.x), np.array(tb.x))

    @pytest.mark.parametrize("seed", [1, 2, 3])
    def test_schedule_independent(self, seed):
        sc = scenario("scenario3")
        cfg = sc.config.replace(max_outer=500)
        a, _, _ = run_distributed(sc.network, sc.profiles, cfg, trace=False, keep_log=False)
        b, _, _ = run_distributed(sc.network, sc.profiles, cfg, trace=False, schedule=seed, keep_log=False)
        assert np.array_equal(a.x, b.x) and np.array_equal(a.lam, b.lam)


class TestAgents:
    def test_source_needs_every_price(self):
        _, P = small_instance()
        a = SourceAgent(0, "a", P[0], ["L1", "L2"], P[0].m, SolverConfig())
        a.inbox = [Message(1, "price-update", "L1", "a", (0.0, 1.0))]
        with pytest.raises(KeyError):
            a.step()

    def test_link_reads_only_inbox(self):
        link = LinkAgent("L1", 100.0, ["a", "b"], [1.0, 1.0], 0.0, SolverConfig())
        link.inbox = [Message(1, "rate-report", "a", "L1", (10.0, 10.0)),
                      Message(1, "rate-report", "b", "L1", (20.0, 20.0))]
        out = link.step(1)
        assert [m.dst for m in out] == ["a", "b"] and link.inbox == []
        assert out[0].payload == (link.lam, link.theta)
