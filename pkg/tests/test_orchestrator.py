import json

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from adcp.catalog import Technique as T, applicable_techniques, make_action
from adcp.costmodel import DeviceProfile, hardware_costs
from adcp.demand import DemandSpec, feasible
from adcp.environment import PlanningEnv, encode_state, max_compression_plan
from adcp.netgraph import compressible_layers
from adcp.oracle import SurrogateOracle
from adcp.orchestrator import (
    PAIR_CONV, PAIR_FC, PlanDocument, SearchConfig, SearchError, SearchResult, candidate_count,
    dqn_only_search, emit_plan, exhaustive_candidates, exhaustive_search, greedy_search, parse_plan,
    read_plan, reevaluate, two_phase_search, write_plan,
)
from adcp.plan import CompressionPlan, PlanError, skip_plan
from conftest import build_net, conv, fc, pool

REF = DeviceProfile("ref", 1e9, 8 * 2**20, 3000)
QUICK = SearchConfig(dqn_episodes=40, ddpg_episodes=20, rounds=2, seed=3)


def budget_demand(net, s=2.0, t=2.0, device=REF, **kw):
    skip = hardware_costs(net, skip_plan(net), device)
    return DemandSpec(0.8, 2 * skip.E, t * skip.T, s * skip.S, **kw)


@pytest.fixture(scope="module")
def toy_exhaustive(toy, toy_demand, redmi):
    return exhaustive_search(toy, toy_demand, redmi, SurrogateOracle(), pair_mode=False)


class TestExhaustive:
    def test_pair_mode_count(self, toy, toy_demand, redmi):
        res = exhaustive_search(toy, toy_demand, redmi, SurrogateOracle(), pair_mode=True)
        assert res.evaluations == len(res.env.memo) == 35 == len(PAIR_CONV) * len(PAIR_FC)
        assert res.optimizer == "exhaustive-pair"

    def test_single_fc_layer(self):
        net = build_net([fc(64), fc(10)], input_shape=(32, 1, 1))
        assert candidate_count(net, True) == candidate_count(net, False) == 5
        res = exhaustive_search(net, budget_demand(net), REF, SurrogateOracle())
        assert res.evaluations == 5

    def test_pair_mode_shares_techniques(self, toy):
        for plan in exhaustive_candidates(toy, True):
            kinds = {}
            for i, a in plan.actions:
                kinds.setdefault(toy.layers[i].kind, set()).add(a.technique)
            assert all(len(v) == 1 for v in kinds.values())

    def test_full_mode_count(self, toy, toy_exhaustive):
        expect = np.prod([len(applicable_techniques(toy, i)) for i in compressible_layers(toy)])
        assert toy_exhaustive.evaluations == expect == 1600

    def test_guard(self, alexnet, default_demand, redmi):
        with pytest.raises(SearchError, match=r"\d+ plans"):
            exhaustive_search(alexnet, default_demand, redmi, SurrogateOracle(), pair_mode=False, limit=100)

    def test_optimum_matches_rescan(self, toy_exhaustive):
        env = toy_exhaustive.env
        rescan = max(env.objective(ev) for ev in env.evaluations() if ev.feasible)
        assert toy_exhaustive.objective == rescan
        assert toy_exhaustive.objective == pytest.approx(0.776640, abs=1e-6)
        assert sum(ev.feasible for ev in env.evaluations()) == 190

    def test_dominates_other_optimizers(self, toy, toy_demand, redmi, toy_exhaustive):
        bounds = toy_exhaustive.env.bounds
        for search in (dqn_only_search, greedy_search):
            other = search(toy, toy_demand, redmi, SurrogateOracle(), config=QUICK)
            assert other.score(bounds) <= toy_exhaustive.score(bounds)


class TestGreedy:
    def test_single_layer_takes_best_reward(self):
        net = build_net([fc(64), fc(10)], input_shape=(64, 1, 1))
        demand = budget_demand(net, s=0.7, t=0.8)
        gr = greedy_search(net, demand, REF, SurrogateOracle())
        env = gr.env
        cands = list(exhaustive_candidates(net, False))
        scores = [sum(env.reward(env.evaluate(p))) for p in cands]
        assert gr.plan == cands[int(np.argmax(scores))]
        assert gr.evaluations == 5

    def test_trap(self):
        # Instance found by scanning small fc stacks against the exhaustive
        # oracle: the locally best first choice leaves a worse overall plan.
        net = build_net([fc(64), fc(32), fc(32), fc(10)], input_shape=(64, 1, 1), name="trap")
        demand = budget_demand(net, s=0.7, t=0.8)
        ex = exhaustive_search(net, demand, REF, SurrogateOracle(), pair_mode=False)
        gr = greedy_search(net, demand, REF, SurrogateOracle())
        b = ex.env.bounds
        assert gr.feasible and ex.feasible
        assert gr.score(b)[1] == pytest.approx(0.652922, abs=1e-6)
        assert ex.score(b)[1] == pytest.approx(0.666243, abs=1e-6)
        assert gr.score(b) < ex.score(b)

    def test_evaluation_count(self, toy, toy_demand, redmi):
        gr = greedy_search(toy, toy_demand, redmi, SurrogateOracle())
        visited = [e["layer"] for e in gr.log]
        assert gr.evaluations == sum(len(applicable_techniques(toy, i)) for i in visited)

    def test_early_stop_leaves_skip(self, toy, redmi):
        from adcp.netgraph import layer_activation_count
        # storage budget below the activations alone of the first layers: stops at once
        demand = DemandSpec(0.8, 1.0, 1.0, 32 * sum(layer_activation_count(l) for l in toy.layers[:3]))
        gr = greedy_search(toy, demand, redmi, SurrogateOracle())
        assert gr.log[-1]["stopped"] and len(gr.log) < len(compressible_layers(toy))
        stopped_at = gr.log[-1]["layer"]
        for i, a in gr.plan.actions:
            if i > stopped_at:
                assert a.technique == T.Skip


class TestTwoPhase:
    def test_round_one_matches_dqn_only(self, toy, toy_demand, redmi):
        cfg = SearchConfig(dqn_episodes=30, ddpg_episodes=10, rounds=1, seed=5)
        tp = two_phase_search(toy, toy_demand, redmi, SurrogateOracle(), config=cfg)
        dq = dqn_only_search(toy, toy_demand, redmi, SurrogateOracle(), config=cfg)
        first = [{k: v for k, v in e.items() if k != "round"} for e in tp.log if e["phase"] == "dqn"]
        assert [e["plan"] for e in first] == [e["plan"] for e in dq.log]

    def test_deterministic(self, toy, toy_demand, redmi):
        a = two_phase_search(toy, toy_demand, redmi, SurrogateOracle(), config=QUICK)
        b = two_phase_search(toy, toy_demand, redmi, SurrogateOracle(), config=QUICK)
        assert a.plan == b.plan and a.objective == b.objective
        assert emit_plan(a, redmi, toy_demand).canonical() == emit_plan(b, redmi, toy_demand).canonical()

    def test_phases_and_rounds_logged(self, toy, toy_demand, redmi):
        res = two_phase_search(toy, toy_demand, redmi, SurrogateOracle(), config=QUICK)
        phases = [(e["round"], e["phase"]) for e in res.log]
        assert phases[0] == (0, "dqn") and phases[-1][0] == 1
        assert {p for _, p in phases} <= {"dqn", "ddpg"}
        assert [e["episode"] for e in res.log] == list(range(len(res.log)))

    def test_feasible_output_is_feasible(self, toy, toy_demand, redmi):
        for search in (two_phase_search, dqn_only_search, greedy_search):
            res = search(toy, toy_demand, redmi, SurrogateOracle(), config=QUICK)
            if res.feasible:
                assert feasible(res.report, toy_demand)[0]

    def test_generous_budgets_beat_skip(self, lenet, redmi):
        demand = budget_demand(lenet, device=redmi)
        res = two_phase_search(lenet, demand, redmi, SurrogateOracle(), config=QUICK)
        skip = res.env.evaluate(skip_plan(lenet))
        assert skip.feasible and res.feasible
        assert res.objective >= res.env.objective(skip)

    def test_one_bit_budget(self, toy, redmi):
        demand = DemandSpec(0.8, 1.0, 1.0, 1.0)
        res = two_phase_search(toy, demand, redmi, SurrogateOracle(), config=QUICK)
        assert not res.feasible and res.objective is None
        assert any(v.constraint == "storage" for v in res.violations)


class TestConfig:
    def test_from_dict(self):
        cfg = SearchConfig.from_dict({"dqn_episodes": 5}, seed=9, rounds=None)
        assert (cfg.dqn_episodes, cfg.seed, cfg.rounds) == (5, 9, 2)

    def test_rejects(self):
        with pytest.raises(SearchError, match="unknown"):
            SearchConfig.from_dict({"episodes": 3})
        with pytest.raises(SearchError):
            SearchConfig(rounds=0)
        with pytest.raises(SearchError):
            SearchConfig(epsilon=0.0)

    def test_digest_tracks_content(self):
        assert SearchConfig().digest() == SearchConfig().digest()
        assert SearchConfig().digest() != SearchConfig(seed=1).digest()


def random_plan(net, draw):
    actions = {}
    for i in compressible_layers(net):
        tech = draw(st.sampled_from(applicable_techniques(net, i)))
        actions[i] = make_action(tech, draw(st.floats(0, 1)))
    return CompressionPlan.from_mapping(net.name, actions)


class TestPlanDocument:
    @settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
    @given(data=st.data())
    def test_round_trip(self, data, toy, toy_demand, redmi, tmp_path):
        plan = random_plan(toy, data.draw)
        env = PlanningEnv(toy, toy_demand, redmi, SurrogateOracle())
        ev = env.evaluate(plan)
        obj = env.objective(ev) if ev.feasible else None
        result = SearchResult("manual", ev, ev.feasible, obj, env, seed=data.draw(st.integers(0, 99)),
                              config=SearchConfig())
        doc = emit_plan(result, redmi, toy_demand, created="2026-01-01T00:00:00+00:00")
        assert parse_plan(json.dumps(doc.to_dict())) == doc
        path = write_plan(tmp_path / "p.json", doc)
        back = read_plan(path)
        assert back == doc
        assert back.compression_plan().key() == plan.key()
        assert reevaluate(back, toy, redmi, SurrogateOracle()).to_dict() == doc.report

    def test_fields(self, toy, toy_demand, redmi):
        res = greedy_search(toy, toy_demand, redmi, SurrogateOracle())
        d = emit_plan(res, redmi, toy_demand).to_dict()
        assert {"network", "device", "demand", "optimizer", "seed", "plan", "report", "feasible",
                "violations"} <= set(d)
        assert d["provenance"]["optimizer"] == "greedy"
        assert d["provenance"]["config_hash"] == SearchConfig().digest()
        assert [e["layer"] for e in d["plan"]] == list(compressible_layers(toy))
        assert set(d["report"]) == {"A", "S_p", "S_f", "C", "T", "E"}

    def test_parse_errors(self, tmp_path):
        with pytest.raises(PlanError, match="line 1"):
            parse_plan("{")
        with pytest.raises(PlanError, match="network"):
            parse_plan({"plan": []})
        with pytest.raises(PlanError, match="missing.json"):
            read_plan(tmp_path / "missing.json")

    def test_write_error_has_path(self, tmp_path, toy, toy_demand, redmi):
        res = greedy_search(toy, toy_demand, redmi, SurrogateOracle())
        doc = emit_plan(res, redmi, toy_demand)
        with pytest.raises(OSError, match="nodir"):
            write_plan(tmp_path / "nodir" / "p.json", doc)


nets = st.builds(
    lambda c1, c2, f1, side: build_net([conv(c1), conv(c2), pool(2), fc(f1), fc(f1), fc(10)],
                                       input_shape=(1, side, side)),
    st.integers(1, 8), st.integers(1, 8), st.integers(1, 64), st.sampled_from([4, 6, 8, 12]),
)


class TestStateEncoding:
    @settings(max_examples=100, deadline=None)
    @given(net=nets, data=st.data(), agent=st.sampled_from(["dqn", "ddpg"]),
           s_bgt=st.floats(1, 1e9), t_bgt=st.floats(1e-9, 1))
    def test_features_in_unit_interval(self, net, data, agent, s_bgt, t_bgt):
        demand = DemandSpec(0.5, 1.0, t_bgt, s_bgt)
        plan = random_plan(net, data.draw)
        for i in compressible_layers(net):
            o = encode_state(net, i, plan, demand, REF, agent, technique=T.W2 if agent == "ddpg" else None)
            assert np.all(np.isfinite(o)) and o.min() >= 0.0 and o.max() <= 1.0
            assert o.size == (7 if agent == "dqn" else 14)

    def test_deterministic(self, toy, toy_demand, redmi):
        i = compressible_layers(toy)[0]
        a = encode_state(toy, i, CompressionPlan(toy.name), toy_demand, redmi)
        b = encode_state(toy, i, CompressionPlan(toy.name), toy_demand, redmi)
        assert np.array_equal(a, b)

    def test_first_layer_has_no_consumption(self):
        # an fc-only stack: layer 1 is compressible and nothing precedes it
        net = build_net([fc(16), fc(16), fc(10)], input_shape=(4, 1, 1))
        first = encode_state(net, 1, CompressionPlan(net.name), DemandSpec(0.5, 1, 1, 1e6), REF)
        assert first[-2:].tolist() == [0.0, 0.0]

    def test_bad_index(self, toy, toy_demand, redmi):
        with pytest.raises(IndexError):
            encode_state(toy, 0, CompressionPlan(toy.name), toy_demand, redmi)
        with pytest.raises(IndexError):
            encode_state(toy, 99, CompressionPlan(toy.name), toy_demand, redmi)

    def test_max_compression_plan_is_smaller(self, toy):
        assert hardware_costs(toy, max_compression_plan(toy), REF).S_p < hardware_costs(toy, skip_plan(toy), REF).S_p
