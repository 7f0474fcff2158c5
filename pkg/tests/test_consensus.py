from __future__ import annotations

import json
import math

import pytest

from archevo.consensus import (
    ConsensusConfig,
    ConsensusError,
    EmptyPoolError,
    EmptySetError,
    Inspiration,
    InspirationPool,
    age_pool,
    extract_subaxes,
    jaccard,
    make_inspiration,
    mean_quality,
    merge,
    redundancy_filter,
    retrieval_sample,
    run_consensus,
    sample_index,
    softmax_weights,
    update_utility,
)
from archevo.explorer import record
from archevo.gateway import MockProvider

PAPER = ("Depthwise convolutions reduce cost. Residual paths ease "
         "optimization. Channel gates adapt features.")


def _subtasks_entry(sub_tasks):
    return json.dumps({"tasks": ["classify"], "sub_tasks": sub_tasks,
                       "keywords": ["dwconv", "se"]})


def _expert_entry(text):
    return json.dumps({"proposal": text, "rationale": "grounded"})


def test_make_inspiration_canonical_identity():
    a = make_inspiration("SE_insert:   gate   the block")
    b = make_inspiration("se_insert: gate the block")
    assert a.id == b.id
    assert a.template == "se_insert"
    assert a.text == "SE_insert: gate the block"


def test_make_inspiration_clips_to_forty_words():
    long_text = " ".join(f"w{i}" for i in range(60))
    item = make_inspiration(long_text)
    assert len(item.text.split()) == 40


def test_pool_keeps_first_instance():
    pool = InspirationPool()
    a = make_inspiration("pre_norm: normalize first")
    pool.add(a)
    twin = make_inspiration("pre_norm: normalize first")
    returned = pool.add(twin)
    assert returned is a
    assert len(pool) == 1
    assert a.id in pool


def test_pool_snapshot_restore_round_trip():
    pool = InspirationPool()
    item = make_inspiration("dw_ffn: factorize the second conv",
                            origin_axis="efficiency", origin_round=2)
    item.utility = 1.25
    item.stale_generations = 2
    pool.add(item)
    restored = InspirationPool.restore(pool.snapshot())
    twin = restored.get(item.id)
    assert twin is not None
    assert twin.text == item.text
    assert twin.utility == 1.25
    assert twin.stale_generations == 2
    assert twin.origin_axis == "efficiency"
    assert twin.template == "dw_ffn"
    assert twin.embedding == item.embedding


def test_jaccard_worked_example():
    items = [make_inspiration(f"idea number {i}") for i in range(4)]
    assert jaccard(items[:3], items[1:]) == pytest.approx(2 / 4)
    assert jaccard([], []) == 1.0


def test_mean_quality_uses_memory():
    a = make_inspiration("pre_norm: normalize first")
    b = make_inspiration("gating: smooth the join")
    memory = []
    record(memory, a.id, 0.2, "s")
    record(memory, a.id, 0.4, "s")
    assert mean_quality([a, b], memory) == pytest.approx((0.3 + 0.0) / 2)
    with pytest.raises(EmptySetError):
        mean_quality([], memory)


def test_redundancy_filter_drops_near_duplicates():
    a = make_inspiration("depthwise separable convolution stack")
    twin = Inspiration(id="other", text=a.text, embedding=a.embedding)
    distinct = make_inspiration("residual scaling on the skip path")
    kept = redundancy_filter([a, twin, distinct], delta=0.1)
    assert kept == [a, distinct]


def test_update_utility_decay_and_credit():
    pool = InspirationPool()
    item = make_inspiration("se_insert: gate the block", utility=1.0)
    pool.add(item)
    update_utility(pool, [([item.id], 0.5)], gamma=0.9, credit_kappa=1.0)
    assert item.utility == pytest.approx(1.4)
    assert item.stale_generations == 0

    bystander = make_inspiration("pre_norm: normalize first", utility=1.0)
    pool.add(bystander)
    update_utility(pool, [], gamma=0.9, credit_kappa=1.0)
    assert bystander.utility == pytest.approx(0.9)
    assert bystander.stale_generations == 1


def test_update_utility_counts_lineage_once():
    pool = InspirationPool()
    item = make_inspiration("gating: smooth the join")
    pool.add(item)
    update_utility(pool, [([item.id, item.id], 0.3)], gamma=1.0,
                   credit_kappa=1.0)
    assert item.utility == pytest.approx(0.3)


def test_softmax_retrieval_quarters():
    a = make_inspiration("first idea", utility=0.0)
    b = make_inspiration("second idea", utility=math.log(3.0))
    weights = softmax_weights([a.utility, b.utility], temperature=1.0)
    assert weights[0] == pytest.approx(0.25)
    assert weights[1] == pytest.approx(0.75)
    assert sample_index(weights, 0.24) == 0
    assert sample_index(weights, 0.26) == 1

    pool = InspirationPool([a, b])

    class _Draw:
        def __init__(self, value):
            self.value = value

        def random(self):
            return self.value

    assert retrieval_sample(pool, 1.0, _Draw(0.1)) is a
    assert retrieval_sample(pool, 1.0, _Draw(0.9)) is b


def test_softmax_needs_values():
    with pytest.raises(EmptyPoolError):
        softmax_weights([], 1.0)


def test_extract_subaxes_clips_and_defaults():
    provider = MockProvider({"subtasks": [
        _subtasks_entry(["a", "b", "c", "d", "e", "f"])]})
    axes = extract_subaxes(PAPER, provider)
    assert [ax.name for ax in axes] == ["a", "b", "c", "d"]

    fallback = MockProvider({"subtasks": [_subtasks_entry([])]})
    axes = extract_subaxes(PAPER, fallback)
    assert [ax.name for ax in axes] == ["general block design"]


def test_extract_subaxes_failure_is_consensus_error():
    provider = MockProvider({"subtasks": ["junk"] * 4})
    with pytest.raises(ConsensusError):
        extract_subaxes(PAPER, provider)


def test_merge_scripted_without_queue_deduplicates():
    a = make_inspiration("pre_norm: normalize first")
    twin = make_inspiration("pre_norm: normalize first")
    b = make_inspiration("gating: smooth the join")
    provider = MockProvider({"expert": []})
    merged = merge([a, twin, b], provider)
    assert merged == [a, b]


def test_merge_scripted_queue_rebinds_and_reuses():
    a = make_inspiration("pre_norm: normalize first")
    b = make_inspiration("gating: smooth the join")
    provider = MockProvider({"merge": [json.dumps({
        "inspirations": ["pre_norm: normalize first",
                         "wide_dw_kernel: widen the depthwise"]})]})
    merged = merge([a, b], provider)
    assert merged[0] is a  # same canonical text: original object reused
    assert merged[1].template == "wide_dw_kernel"


def test_stable_consensus_stops_at_t_min():
    script = {
        "subtasks": [_subtasks_entry(["efficiency", "stability"])],
        "expert": [
            _expert_entry("dw_ffn: factorize the second conv"),
            _expert_entry("se_insert: gate the second conv"),
            _expert_entry("dw_ffn: factorize the second conv"),
            _expert_entry("se_insert: gate the second conv"),
        ],
    }
    provider = MockProvider(script)
    final, transcript = run_consensus(PAPER, provider, [])
    assert len(transcript) == 2
    assert transcript[-1]["converged"] is True
    assert provider.call_counts["expert"] == 4  # rounds x experts
    assert {i.template for i in final} == {"dw_ffn", "se_insert"}


def test_unstable_consensus_runs_to_t_max():
    cfg = ConsensusConfig(t_max=4)
    entries = [_expert_entry(f"novel layout variant {tag}")
               for tag in "abcdefgh"]
    provider = MockProvider({
        "subtasks": [_subtasks_entry(["efficiency", "stability"])],
        "expert": entries,
    })
    final, transcript = run_consensus(PAPER, provider, [], cfg)
    assert len(transcript) == 4
    assert transcript[-1]["converged"] is False
    assert provider.call_counts["expert"] == 8
    assert len(final) == 2


def test_consensus_survives_one_silent_expert():
    script = {
        "subtasks": [_subtasks_entry(["efficiency", "stability"])],
        "expert": (
            ["junk"] * 4  # first expert burns all attempts in round 1
            + [_expert_entry("se_insert: gate the second conv")]
            + ["junk"] * 4
            + [_expert_entry("se_insert: gate the second conv")]
        ),
    }
    provider = MockProvider(script)
    final, transcript = run_consensus(PAPER, provider, [])
    assert len(transcript) == 2
    assert transcript[-1]["converged"] is True
    assert [i.template for i in final] == ["se_insert"]
    assert transcript[0]["proposals"][0] is None


def test_age_pool_quota():
    cfg = ConsensusConfig(stale_patience=2, utility_floor=0.5)
    pool = InspirationPool()
    tired = make_inspiration("old idea one", origin_axis="efficiency")
    fresh = make_inspiration("new idea two", origin_axis="efficiency")
    lonely = make_inspiration("only stability idea", origin_axis="stability")
    for item, stale, utility in ((tired, 3, 0.0), (fresh, 0, 1.0),
                                 (lonely, 5, 0.0)):
        item.stale_generations = stale
        item.utility = utility
        pool.add(item)
    dropped = age_pool(pool, cfg)
    assert dropped == [tired.id]
    assert tired.id not in pool
    assert lonely.id in pool  # last of its axis never ages out
