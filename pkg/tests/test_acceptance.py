"""Release acceptance gate.

Eleven checks, one per guaranteed behavior, each printing a single PASS or
FAIL line (run with -s to stream the checklist).  Everything here asserts
either an exact oracle, a closed-form value, or a stated tolerance.
"""
from __future__ import annotations

import contextlib
import dataclasses
import json
import math
import random
import time

from archevo.config import RunConfig
from archevo.consensus import ConsensusConfig, run_consensus
from archevo.diversity import blend_similarity, structural_diversity, wl_similarity
from archevo.explorer import (
    ControllerConfig,
    ReflectionRecord,
    ReflectiveState,
    choose_action,
    epsilon,
    q_value,
)
from archevo.gateway import MockProvider
from archevo.graph import (
    CHANNEL_MISMATCH,
    GRAPH_NOT_DAG,
    MULTI_INPUT_UNARY,
    MULTIPLE_OUTPUTS,
    NODE_UNUSED,
    OpNode,
    graph,
    resnet_basic_block,
    validate,
)
from archevo.orchestrator import best_candidate, resume, run, success_metrics
from archevo.selection import (
    BidWeights,
    ObjectiveVector,
    dominates,
    fast_non_dominated_sort,
    score_population,
)
from archevo.transforms import TEMPLATES, apply_transform
from util import brute_force_fronts, make_random_graph, permute_ids


@contextlib.contextmanager
def gate(line):
    try:
        yield
    except BaseException:
        print(f"FAIL: {line}")
        raise
    print(f"PASS: {line}")


def random_vector(rng):
    # quantized axes produce ties and duplicates; continuous axes spread
    def axis(lo, hi, steps):
        if rng.random() < 0.5:
            return lo + (hi - lo) * rng.randrange(steps) / (steps - 1)
        return rng.uniform(lo, hi)
    return ObjectiveVector(axis(0.6, 0.9, 4), axis(0.5, 8.0, 4),
                           axis(1.0, 20.0, 4), axis(0.0, 1.0, 3),
                           axis(0.5, 1.0, 4))


def test_front_sort_matches_oracle():
    with gate("criterion 1: non-dominated sort equals the brute-force "
              "oracle on 200 random populations in under 5 s"):
        rng = random.Random(101)
        start = time.perf_counter()
        for _ in range(200):
            n = rng.randint(1, 50)
            pop = []
            for _ in range(n):
                if pop and rng.random() < 0.15:
                    pop.append(pop[rng.randrange(len(pop))])
                else:
                    pop.append(random_vector(rng))
            assert fast_non_dominated_sort(pop) == \
                brute_force_fronts(pop, dominates)
        assert time.perf_counter() - start < 5.0


def test_epsilon_schedule_closed_form():
    with gate("criterion 2: exploration rate matches its closed form to "
              "1e-12, stays bounded, decreases with variance, and is "
              "exactly eps_max at zero variance"):
        rng = random.Random(7)
        for _ in range(1000):
            lo = rng.uniform(0.0, 0.4)
            hi = rng.uniform(lo + 1e-6, 1.0)
            decay = rng.uniform(0.05, 8.0)
            cfg = ControllerConfig(eps_min=lo, eps_max=hi, decay=decay)
            var = rng.uniform(0.0, 50.0)
            higher = var + rng.uniform(0.0, 10.0)
            direct = lo + (hi - lo) * math.exp(-decay * var)
            assert abs(epsilon(var, cfg) - direct) < 1e-12
            assert lo <= epsilon(var, cfg) <= hi
            assert epsilon(higher, cfg) <= epsilon(var, cfg)
            assert epsilon(0.0, cfg) == hi


def test_structural_diversity_properties():
    with gate("criterion 3: structural diversity is symmetric, bounded, "
              "zero between relabeled copies, one against a missing "
              "graph, and relabel-invariant; blended worked value 1/6"):
        rng = random.Random(23)
        # 9 chain ops plus an optional residual join tops out at 12 nodes
        graphs = [make_random_graph(rng, max_interior=9) for _ in range(500)]
        for g in graphs:
            assert len(g.nodes) <= 12
            assert structural_diversity(g, permute_ids(g, rng)) == 0.0
            assert structural_diversity(g, None) == 1.0
            assert structural_diversity(None, g) == 1.0
        for a, b in zip(graphs, graphs[1:] + graphs[:1]):
            d = structural_diversity(a, b)
            assert 0.0 <= d <= 1.0
            assert structural_diversity(b, a) == d
            assert wl_similarity(a, b) == \
                wl_similarity(permute_ids(a, rng), permute_ids(b, rng))
        base = resnet_basic_block()
        for name, tpl in TEMPLATES.items():
            child = apply_transform(base, tpl)
            d = structural_diversity(child, base)
            assert 0.0 <= d <= 1.0
            assert structural_diversity(base, child) == d
            if name == "identity":
                assert d == 0.0
        assert abs((1.0 - blend_similarity(2 / 3, 1.0, 1.0)) - 1 / 6) < 1e-12


def test_reflection_q_oracle():
    with gate("criterion 4: reflective Q equals the filter-and-mean "
              "oracle on 1,000 random memories; unseen ids score zero"):
        rng = random.Random(31)
        ids = [f"insp{i}" for i in range(8)]
        for _ in range(1000):
            memory = [
                ReflectionRecord(step=s, inspiration_id=rng.choice(ids),
                                 reward=rng.uniform(-0.1, 0.1), summary="")
                for s in range(rng.randrange(0, 30))
            ]
            query = rng.choice(ids + ["ghost"])
            matching = [r.reward for r in memory
                        if r.inspiration_id == query]
            expected = sum(matching) / len(matching) if matching else 0.0
            assert q_value(query, memory) == expected
            assert q_value("never-seen", memory) == 0.0


def _expert(text):
    return json.dumps({"proposal": text, "rationale": "because"})


_BRIEF = ("Depthwise separable stacks cut parameter counts sharply. "
          "Squeeze-excitation gating recalibrates channels at low cost.")

_AXES = json.dumps({
    "tasks": ["image classification"],
    "sub_tasks": ["spatial filtering", "channel mixing"],
    "keywords": ["conv", "dwconv"],
})


def test_consensus_termination_and_call_budget():
    with gate("criterion 5: consensus stops at exactly t_min on a stable "
              "script and exactly t_max on a never-stable one, spending "
              "rounds x experts calls in both cases"):
        stable = MockProvider({
            "subtasks": [_AXES],
            "expert": [_expert("dw_ffn: depthwise then pointwise pair"),
                       _expert("se_insert: add a squeeze-excitation gate")] * 2,
        })
        cfg = ConsensusConfig()
        final, transcript = run_consensus(_BRIEF, stable, [], cfg)
        assert len(transcript) == cfg.t_min == 2
        assert transcript[-1]["converged"] is True
        assert final
        assert stable.call_counts["expert"] == 2 * 2

        wild = MockProvider({
            "subtasks": [_AXES],
            "expert": [_expert(f"variant {i}: try option number {i}")
                       for i in range(2 * cfg.t_max)],
        })
        final, transcript = run_consensus(_BRIEF, wild, [], cfg)
        assert len(transcript) == cfg.t_max == 6
        assert transcript[-1]["converged"] is False
        assert wild.call_counts["expert"] == 6 * 2


def test_survivor_soundness():
    with gate("criterion 6: over 200 random generations no survivor is "
              "dominated and the survivor count is max(1, "
              "floor(kappa * first front)) for four kappa values"):
        rng = random.Random(47)
        kappas = (0.1, 0.3, 0.5, 1.0)
        for i in range(200):
            kappa = kappas[i % len(kappas)]
            n = rng.randint(1, 30)
            pop = [random_vector(rng) for _ in range(n)]
            sigmas = [rng.uniform(0.0, 0.05) for _ in range(n)]
            scored = score_population(pop, sigmas, BidWeights(), kappa)
            first = fast_non_dominated_sort(pop)[0]
            survivors = [s for s in scored if s.survived]
            assert len(survivors) == max(1, math.floor(kappa * len(first)))
            for s in survivors:
                assert s.front_index == 0
                assert not any(dominates(other, s.objectives)
                               for other in pop)


def _run_config(tmp_path, name, **overrides):
    cfg = RunConfig()
    search = dataclasses.replace(cfg.search, log_path=str(tmp_path / name),
                                 **overrides)
    return dataclasses.replace(cfg, search=search)


def test_determinism_and_resume(tmp_path):
    with gate("criterion 7: a full search finishes in under 10 s, reruns "
              "byte-identically, and an interrupted run resumes to the "
              "exact same log"):
        start = time.perf_counter()
        run(_run_config(tmp_path, "a.log"))
        assert time.perf_counter() - start < 10.0
        run(_run_config(tmp_path, "b.log"))
        assert (tmp_path / "a.log").read_bytes() == \
            (tmp_path / "b.log").read_bytes()

        part = _run_config(tmp_path, "part.log")
        run(part, stop_after_generation=2)
        resume(part)
        assert (tmp_path / "part.log").read_bytes() == \
            (tmp_path / "a.log").read_bytes()


def test_accuracy_ordering_echo(tmp_path):
    with gate("criterion 8: the searched best block strictly beats the "
              "starting block on estimated accuracy"):
        result = run(_run_config(tmp_path, "echo.log"))
        root_acc = result.records[1]["candidate"]["objectives"]["acc"]
        best = best_candidate(result.records)
        assert best["objectives"]["acc"] > root_acc


def test_explore_rate_statistics():
    with gate("criterion 9: over 10,000 controller steps at a constant "
              "rate of 0.275 the observed explore fraction sits within "
              "three standard errors"):
        cfg = ControllerConfig(eps_min=0.05, eps_max=0.5, decay=1.0,
                               window=5, variance_scale=1.0)
        memory = [
            ReflectionRecord(0, "a", 0.0, ""),
            ReflectionRecord(1, "b", 2.0 * math.sqrt(math.log(2.0)), ""),
        ]
        from archevo.consensus import make_inspiration
        candidates = [
            make_inspiration("use a depthwise separable stack"),
            make_inspiration("widen the second kernel"),
        ]
        provider = MockProvider({
            "expert": [_expert("add a squeeze-excitation gate")] * 10_000,
        })
        state = ReflectiveState()
        rng = random.Random(0)
        explores = 0
        for _ in range(10_000):
            choice = choose_action(state, candidates, memory, cfg,
                                   rng.random(), provider)
            assert abs(choice.epsilon - 0.275) < 1e-12
            if choice.mode == "explore":
                explores += 1
        fraction = explores / 10_000
        stderr = math.sqrt(0.275 * 0.725 / 10_000)
        assert abs(fraction - 0.275) <= 3.0 * stderr


def test_success_metric_fixtures():
    with gate("criterion 10: ten children with four wins score a 0.40 "
              "success rate, and a fail-fail-succeed parent needs three "
              "trials to its first success"):
        def child(i, parent, reward):
            return {"type": "candidate", "status": "ok", "id": f"c{i}",
                    "parent": parent, "reward": reward}

        ten = [child(i, f"p{i % 5}", 0.01 if i < 4 else -0.02)
               for i in range(10)]
        metrics = success_metrics([{"type": "header"}] + ten)
        assert metrics["children"] == 10
        assert metrics["successes"] == 4
        assert metrics["success_rate"] == 0.40

        sequence = [child(0, "root", -0.01), child(1, "root", -0.02),
                    child(2, "root", 0.03)]
        metrics = success_metrics(sequence)
        assert metrics["avg_trials_to_first_success"] == 3


def test_validation_corpus():
    with gate("criterion 11: five malformed graphs trigger their named "
              "rules and every registry template yields a valid block"):
        cyclic = graph([OpNode(0, "input"), OpNode(1, "identity"),
                        OpNode(2, "identity"), OpNode(3, "output")],
                       [(0, 1), (1, 2), (2, 1), (2, 3)], 0, 3)
        assert GRAPH_NOT_DAG in validate(cyclic).rules()

        orphan = graph([OpNode(0, "input"), OpNode(1, "relu"),
                        OpNode(2, "output"), OpNode(3, "relu")],
                       [(0, 1), (1, 2)], 0, 2)
        assert NODE_UNUSED in validate(orphan).rules()

        fan_in = graph([OpNode(0, "input"), OpNode(1, "relu"),
                        OpNode(2, "relu"), OpNode(3, "output")],
                       [(0, 1), (0, 2), (1, 2), (2, 3)], 0, 3)
        assert MULTI_INPUT_UNARY in validate(fan_in).rules()

        mismatch = graph(
            [OpNode(0, "input"),
             OpNode(1, "conv", {"in_channels": 16, "out_channels": 32,
                                "kernel": 3}),
             OpNode(2, "conv", {"in_channels": 16, "out_channels": 16,
                                "kernel": 3}),
             OpNode(3, "output")],
            [(0, 1), (1, 2), (2, 3)], 0, 3)
        assert CHANNEL_MISMATCH in validate(mismatch).rules()

        twin_exit = graph([OpNode(0, "input"), OpNode(1, "relu"),
                           OpNode(2, "output"), OpNode(3, "output")],
                          [(0, 1), (1, 2), (1, 3)], 0, 2)
        assert MULTIPLE_OUTPUTS in validate(twin_exit).rules()

        base = resnet_basic_block()
        for tpl in TEMPLATES.values():
            assert validate(apply_transform(base, tpl)).ok
