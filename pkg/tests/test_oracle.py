import sys
from pathlib import Path

import pytest
from hypothesis import given, settings, strategies as st

from adcp.catalog import Technique as T, make_action
from adcp.costmodel import DeviceProfile
from adcp.environment import PlanningEnv
from adcp.demand import DemandSpec
from adcp.oracle import (
    ExternalOracle, OracleError, OraclePool, OracleRequest, OracleResponse, ProtocolError,
    SurrogateModel, SurrogateOracle, compression_aggressiveness, decode_request, decode_response,
    encode_request, encode_response, make_oracle, surrogate_accuracy,
)
from adcp.plan import CompressionPlan, skip_plan
from conftest import build_net, conv, fc

FAKE = Path(__file__).with_name("fake_trainer.py")


def trainer(mode, timeout=10.0):
    return ExternalOracle([sys.executable, str(FAKE), mode], timeout=timeout)


@pytest.fixture(scope="module")
def one_fc():
    # a single compressible fc layer between the mandatory first and last layers
    return build_net([fc(100), fc(10), fc(10)], input_shape=(100, 1, 1))


class TestAggressiveness:
    def test_skip(self, one_fc):
        assert compression_aggressiveness(one_fc.layers[2], make_action(T.Skip)) == 0.0

    def test_w3f_quarter(self, one_fc):
        assert compression_aggressiveness(one_fc.layers[2], make_action(T.W3f, 0.25)) == pytest.approx(0.75)

    def test_w1f_expansion_clamped(self):
        net = build_net([fc(8), fc(8), fc(2)], input_shape=(8, 1, 1))
        # 8x8 layer: rank 8 factors hold 2*8*8 weights, more than the dense layer
        assert compression_aggressiveness(net.layers[2], make_action(T.W1f, 1.0)) == 0.0


class TestSurrogate:
    def test_all_skip_is_base(self, toy):
        m = SurrogateModel(base_accuracy=0.87)
        assert surrogate_accuracy(toy, skip_plan(toy), m) == 0.87

    def test_at_knee(self, one_fc):
        # ratio 0.7 leaves c exactly at the 0.3 knee
        m = SurrogateModel(base_accuracy=0.9, knee=0.3, gain=0.02)
        plan = CompressionPlan.from_mapping(one_fc.name, {2: make_action(T.W3f, 0.7)})
        assert surrogate_accuracy(one_fc, plan, m) == pytest.approx(0.9 + 0.02 * 0.3)

    def test_full_compression_penalty(self, one_fc):
        m = SurrogateModel(base_accuracy=0.9, knee=0.3, gain=0.0, sensitivities=((2, 0.5),))
        plan = CompressionPlan.from_mapping(one_fc.name, {2: make_action(T.W3f, 0.0)})
        assert surrogate_accuracy(one_fc, plan, m) == pytest.approx(0.9 - 0.245)

    def test_sensitivities_deterministic(self):
        a, b = SurrogateModel(seed=4), SurrogateModel(seed=4)
        assert [a.sensitivity(i) for i in range(20)] == [b.sensitivity(i) for i in range(20)]
        assert all(0.2 <= a.sensitivity(i) <= 0.8 for i in range(50))
        assert a.sensitivity(3) != SurrogateModel(seed=5).sensitivity(3)

    @given(ratios=st.lists(st.floats(0, 0.7), min_size=2, max_size=2))
    def test_non_increasing_past_knee(self, ratios):
        net = build_net([fc(64), fc(32), fc(10)], input_shape=(64, 1, 1))
        m = SurrogateModel()
        hi, lo = sorted(ratios, reverse=True)
        a_hi = surrogate_accuracy(net, CompressionPlan.from_mapping(net.name, {2: make_action(T.W3f, hi)}), m)
        a_lo = surrogate_accuracy(net, CompressionPlan.from_mapping(net.name, {2: make_action(T.W3f, lo)}), m)
        assert a_lo <= a_hi

    @given(s=st.floats(0, 1e6), a0=st.floats(0, 1), g=st.floats(0, 10), r=st.floats(0, 1))
    def test_clamped(self, s, a0, g, r):
        net = build_net([fc(64), fc(32), fc(10)], input_shape=(64, 1, 1))
        m = SurrogateModel(base_accuracy=a0, gain=g, sensitivities=((2, s),))
        plan = CompressionPlan.from_mapping(net.name, {2: make_action(T.W3f, r)})
        assert 0.0 <= surrogate_accuracy(net, plan, m) <= 1.0

    def test_bit_identical(self, toy):
        plan = CompressionPlan.from_mapping(toy.name, {2: make_action(T.C2, 0.3), 6: make_action(T.W2, 0.2)})
        vals = {SurrogateOracle(SurrogateModel(seed=9))(toy, plan) for _ in range(5)}
        assert len(vals) == 1


requests = st.builds(
    OracleRequest,
    st.text(min_size=1, max_size=20),
    st.lists(st.tuples(st.integers(0, 500), st.sampled_from([t.value for t in T]),
                       st.floats(0, 1)), max_size=12).map(tuple),
)


class TestProtocol:
    @given(requests)
    def test_request_round_trip(self, req):
        assert decode_request(encode_request(req)) == req

    @given(st.floats(0, 1))
    def test_response_round_trip(self, acc):
        assert decode_response(encode_response(OracleResponse(accuracy=acc))).accuracy == acc

    def test_wire_format(self):
        req = OracleRequest("lenet", ((3, "C2", 0.5),))
        assert encode_request(req) == '{"v":1,"network":"lenet","plan":[{"layer":3,"tech":"C2","ratio":0.5}]}'

    @pytest.mark.parametrize("line", ['{"v":1}', '{"v":1,"accuracy":0.5,"error":"x"}', 'nope',
                                      '{"v":2,"accuracy":0.5}', '{"v":1,"accuracy":1.5}', '{"v":1,"accuracy":true}'])
    def test_bad_responses(self, line):
        with pytest.raises(ProtocolError) as info:
            decode_response(line)
        assert info.value.payload == line

    def test_bad_request(self):
        with pytest.raises(ProtocolError):
            decode_request('{"v":1,"network":"x","plan":[{"layer":"a"}]}')

    def test_response_exclusive(self):
        with pytest.raises(ProtocolError):
            OracleResponse()


class TestExternal:
    def test_good(self, toy):
        o = trainer("good")
        try:
            plan = CompressionPlan.from_mapping(toy.name, {6: make_action(T.W2)})
            assert o(toy, plan) == pytest.approx(0.94)
            assert o(toy, skip_plan(toy)) == pytest.approx(0.95)
            assert len(o.memo) == 2
            o(toy, plan)
            assert len(o.memo) == 2
        finally:
            o.close()

    def test_missing_accuracy(self, toy):
        o = trainer("missing")
        with pytest.raises(ProtocolError, match="accuracy"):
            o(toy, skip_plan(toy))
        o.close()

    def test_reported_error(self, toy):
        o = trainer("error")
        with pytest.raises(OracleError, match="out of memory"):
            o(toy, skip_plan(toy))
        o.close()

    def test_exit_mid_request(self, toy):
        o = trainer("exit")
        with pytest.raises(OracleError, match="exited") as info:
            o(toy, skip_plan(toy))
        assert '"network":"toy"' in info.value.payload
        o.close()

    def test_timeout(self, toy):
        o = trainer("hang", timeout=0.5)
        with pytest.raises(OracleError, match="timed out"):
            o(toy, skip_plan(toy))
        o.close()

    def test_restart_after_exit(self, toy):
        o = trainer("exit-second")
        try:
            assert o(toy, skip_plan(toy)) == 0.5
            other = CompressionPlan.from_mapping(toy.name, {6: make_action(T.W2)})
            with pytest.raises(OracleError):
                o(toy, other)
            # relaunched process answers the first request again
            third = CompressionPlan.from_mapping(toy.name, {7: make_action(T.W2)})
            assert o(toy, third) == 0.5
        finally:
            o.close()

    def test_failed_plan_gets_running_minimum(self, toy):
        demand = DemandSpec(0.5, 1.0, 1.0, 1e12)
        device = DeviceProfile("d", 1e9, 8 * 2**20, 3000)
        env = PlanningEnv(toy, demand, device, SurrogateOracle())
        env.seed_bounds()
        good = [env.reward(ev) for ev in env.evaluations()]
        env.oracle = trainer("exit")
        try:
            bad = env.evaluate(CompressionPlan.from_mapping(toy.name, {6: make_action(T.W2)}))
        finally:
            env.oracle.close()
        assert bad.failed and not bad.feasible
        assert env.reward(bad) == (min(r for r, _ in good), min(r for _, r in good))

    def test_pool(self, toy):
        pool = OraclePool([sys.executable, str(FAKE), "good"], 2)
        try:
            assert pool.thread_safe and len(pool.members) == 2
            assert pool(toy, skip_plan(toy)) == pytest.approx(0.95)
            assert "x2" in pool.describe()
        finally:
            pool.close()


class TestMakeOracle:
    def test_choices(self):
        assert isinstance(make_oracle("surrogate"), SurrogateOracle)
        assert isinstance(make_oracle("external:trainer --x"), ExternalOracle)
        assert isinstance(make_oracle("external:trainer", workers=3), OraclePool)

    @pytest.mark.parametrize("choice", ["external:", "magic"])
    def test_rejects(self, choice):
        with pytest.raises(OracleError):
            make_oracle(choice)
