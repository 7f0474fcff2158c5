from __future__ import annotations

import json
import math

import pytest
from hypothesis import given, strategies as st

from archevo.consensus import make_inspiration
from archevo.explorer import (
    ControllerConfig,
    EmptyPoolError,
    ReflectiveState,
    choose_action,
    epsilon,
    exploit_choice,
    q_value,
    record,
    reflect_summary,
    reward_variance,
    scaled_variance,
)
from archevo.gateway import MockProvider

UNIT_CFG = ControllerConfig(eps_min=0.05, eps_max=0.5, decay=1.0,
                            window=5, variance_scale=1.0)


def _memory(rewards, inspiration_id="insp"):
    memory = []
    for r in rewards:
        record(memory, inspiration_id, r, f"step {len(memory)}")
    return memory


def test_epsilon_at_zero_variance_is_max():
    assert epsilon(0.0, UNIT_CFG) == 0.5


def test_epsilon_ln2_value():
    # 0.05 + 0.45 * exp(-ln 2) = 0.05 + 0.225
    assert epsilon(math.log(2.0), UNIT_CFG) == pytest.approx(0.275, abs=1e-12)


@given(st.floats(0.0, 1000.0), st.floats(0.0, 1000.0))
def test_epsilon_bounded_and_monotone(v1, v2):
    lo, hi = sorted([v1, v2])
    e_lo, e_hi = epsilon(lo, UNIT_CFG), epsilon(hi, UNIT_CFG)
    assert UNIT_CFG.eps_min <= e_hi <= e_lo <= UNIT_CFG.eps_max


def test_reward_variance_window():
    assert reward_variance([], 5) == 0.0
    assert reward_variance(_memory([0.3]), 5) == 0.0
    mem = _memory([10.0, 0.1, 0.3, 0.1, 0.3, 0.1])
    # only the last five rewards enter; the 10.0 outlier ages out
    import statistics
    assert reward_variance(mem, 5) == pytest.approx(
        statistics.pvariance([0.1, 0.3, 0.1, 0.3, 0.1]))


def test_scaled_variance_applies_scale():
    mem = _memory([0.0, 0.2])
    cfg = ControllerConfig(variance_scale=100.0, window=5)
    assert scaled_variance(mem, cfg) == pytest.approx(
        100.0 * reward_variance(mem, 5))


def test_q_value_mean_and_unseen_zero():
    memory = _memory([0.1, 0.3], "a") + _memory([0.5], "b")
    assert q_value("a", memory) == pytest.approx(0.2)
    assert q_value("b", memory) == pytest.approx(0.5)
    assert q_value("never-seen", memory) == 0.0


def test_exploit_prefers_higher_q():
    a = make_inspiration("se_insert: gate the block")
    b = make_inspiration("dw_ffn: factorize the conv")
    memory = []
    record(memory, a.id, 0.01, "s")
    record(memory, b.id, 0.05, "s")
    assert exploit_choice([a, b], memory) is b


def test_exploit_ties_break_on_utility_then_id():
    a = make_inspiration("se_insert: gate the block")
    b = make_inspiration("dw_ffn: factorize the conv")
    a.utility = 0.9
    b.utility = 0.1
    assert exploit_choice([a, b], []) is a
    b.utility = 0.9
    expected = min([a, b], key=lambda i: i.id)
    assert exploit_choice([a, b], []) is expected


def test_choose_action_needs_candidates():
    with pytest.raises(EmptyPoolError):
        choose_action(ReflectiveState(), [], [], UNIT_CFG, 0.5)


def test_exploit_branch_on_high_draw():
    a = make_inspiration("se_insert: gate the block")
    choice = choose_action(ReflectiveState(), [a], [], UNIT_CFG, 0.99)
    assert choice.mode == "exploit"
    assert not choice.fallback
    assert choice.epsilon == 0.5  # empty memory: variance 0


def test_explore_branch_with_provider():
    pool = [make_inspiration("pre_norm: normalize first")]
    provider = MockProvider({"expert": [json.dumps({
        "proposal": "se_insert: add a squeeze-excitation gate",
        "rationale": "channel recalibration"})]})
    choice = choose_action(ReflectiveState(generation=2), pool, [], UNIT_CFG,
                           0.0, provider)
    assert choice.mode == "explore"
    assert not choice.fallback
    assert choice.inspiration.template == "se_insert"
    assert choice.inspiration.origin_axis == "reflective"
    assert choice.inspiration.origin_round == 2


def test_explore_reuses_known_inspiration():
    known = make_inspiration("se_insert: add a squeeze-excitation gate")
    provider = MockProvider({"expert": [json.dumps({
        "proposal": "se_insert: add a squeeze-excitation gate",
        "rationale": "same text, same identity"})]})
    choice = choose_action(ReflectiveState(), [known], [], UNIT_CFG,
                           0.0, provider)
    assert choice.inspiration is known


def test_explore_falls_back_on_schema_failure():
    pool = [make_inspiration("pre_norm: normalize first")]
    provider = MockProvider({"expert": ["junk"] * 4})  # 1 + default 3 retries
    choice = choose_action(ReflectiveState(), pool, [], UNIT_CFG,
                           0.0, provider)
    assert choice.mode == "exploit"
    assert choice.fallback
    assert choice.inspiration is pool[0]


def test_explore_falls_back_on_untokenizable_proposal():
    a = make_inspiration("pre_norm: normalize first")
    b = make_inspiration("gating: smooth the join")
    b.utility = 2.0
    provider = MockProvider({"expert": [json.dumps({
        "proposal": "!!! ...", "rationale": "nothing usable"})]})
    choice = choose_action(ReflectiveState(), [a, b], [], UNIT_CFG,
                           0.0, provider)
    assert choice.mode == "explore"
    assert choice.fallback
    assert choice.inspiration is b  # highest utility wins the fallback


def test_explore_without_provider_exploits():
    pool = [make_inspiration("pre_norm: normalize first")]
    choice = choose_action(ReflectiveState(), pool, [], UNIT_CFG, 0.0, None)
    assert choice.mode == "exploit"
    assert choice.fallback


def test_reflect_summary_template():
    assert reflect_summary(0, None, 0.0) == "step 0: initialization"
    line = reflect_summary(3, "dw_ffn", 0.0442)
    assert line == "step 3: dw_ffn → Δacc +0.0442"
    drop = reflect_summary(4, "gating", -0.003)
    assert "-0.0030" in drop


def test_reflect_summary_scripted_provider_uses_template():
    provider = MockProvider({"reflect": []})
    assert reflect_summary(1, "se_insert", 0.01, provider).startswith("step 1")
    assert provider.call_counts.get("reflect", 0) == 0
