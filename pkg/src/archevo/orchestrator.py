"""The generation loop: consensus, reflective exploration, evaluation,
Pareto selection, and a replayable line-delimited run log.

Determinism contract: with a fixed seed, a scripted provider, and the
surrogate evaluator, two runs of the same configuration produce
byte-identical logs.  Exactly two RNG draws happen per candidate slot, in
a fixed order: the parent draw, then the exploration draw.  Nothing else
touches the stream, so a resumed run continues it exactly.  Wall-clock
timings therefore live in a sidecar file, never in the log itself.
"""

from __future__ import annotations

import json
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .config import RunConfig, config_hash
from .consensus import (
    ConsensusError,
    Inspiration,
    InspirationPool,
    age_pool,
    run_consensus,
    sample_index,
    softmax_weights,
    update_utility,
)
from .diversity import structural_diversity
from .evaluator import (
    AdapterConfig,
    AdapterCrashError,
    AdapterTimeoutError,
    EvaluationResult,
    MalformedResultError,
    external_evaluate,
    surrogate_evaluate,
)
from .explorer import (
    EmptyPoolError,
    ReflectionRecord,
    ReflectiveState,
    choose_action,
    record,
    reflect_summary,
)
from .gateway import MockProvider, HttpProvider, ProviderConfig
from .graph import BlockGraph, from_dict, resnet_basic_block, to_dict
from .runlog import (
    LOG_VERSION,
    CorruptLogError,
    IncompatibleLogError,
    RunLogWriter,
    check_header,
    read_records,
)
from .selection import ObjectiveVector, estimate_sigma, score_population
from .transforms import (
    TEMPLATES,
    InvalidResultError,
    NoMatchError,
    apply_transform,
)


class NoChildrenError(ValueError):
    """success_metrics was given a log with no evaluated children."""


DEFAULT_PAPER_TEXT = (
    "Depthwise separable convolutions cut parameter count while keeping "
    "most of the accuracy of dense filters. Pointwise projections mix "
    "channels cheaply after a spatial filter. Residual connections "
    "stabilize optimization and let blocks specialize. Squeeze-excitation "
    "gates recalibrate channels at negligible parameter cost. Wide "
    "depthwise kernels recover the receptive field lost to factorization. "
    "Dilated filters grow receptive field without adding parameters."
)


def demo_script() -> dict[str, list[str]]:
    """Built-in mock script: a stable two-expert consensus plus a generous
    queue of exploration proposals.  Sized for the default 3x5 search."""
    expert_entry = {
        "dw_ffn": "replace the second conv with a depthwise then pointwise pair",
        "se_insert": "add a squeeze-excitation gate after the second conv",
        "mbconv_expand": "widen the block with a 4x pointwise expansion "
                         "after a 7x7 depthwise conv",
        "wide_dw_kernel": "swap the second conv for a 5x5 depthwise pair",
        "routing_head": "attach a light 1x1 routing head after the join",
        "cross_scale_fusion": "merge an extra 1x1 projection branch into "
                              "the residual join",
        "gating": "gate the joined output with a smooth activation",
        "pre_norm": "normalize before the first conv",
    }

    def expert(name: str) -> str:
        return json.dumps({
            "proposal": f"{name}: {expert_entry[name]}",
            "rationale": "a compact edit with a good cost/accuracy trade",
            "evidence_refs": [1, 2],
        })

    consensus_round = [expert("dw_ffn"), expert("se_insert")]
    explore_cycle = ["mbconv_expand", "wide_dw_kernel", "routing_head",
                     "cross_scale_fusion", "gating", "pre_norm",
                     "dw_ffn", "se_insert"]
    return {
        "subtasks": [json.dumps({
            "tasks": ["image classification"],
            "sub_tasks": ["spatial filtering", "channel mixing"],
            "keywords": ["dwconv", "pwconv", "se", "add", "conv"],
        })],
        # Two identical rounds converge at t_min; the rest feeds exploration.
        "expert": consensus_round + consensus_round
        + [expert(name) for name in explore_cycle * 3],
    }


@dataclass
class Candidate:
    """A scored block in the lineage."""

    id: str
    graph: BlockGraph
    parent_id: str | None
    inspiration_id: str | None
    template: str | None
    objectives: ObjectiveVector
    sigma: float
    reward: float | None
    bid: float = 0.0

    @property
    def acc(self) -> float:
        return self.objectives.acc

    def snapshot(self) -> dict:
        return {
            "id": self.id,
            "parent": self.parent_id,
            "inspiration": self.inspiration_id,
            "template": self.template,
            "graph": to_dict(self.graph),
            "objectives": _objectives_dict(self.objectives),
            "sigma": self.sigma,
            "reward": self.reward,
            "bid": self.bid,
        }

    @classmethod
    def restore(cls, doc: dict) -> "Candidate":
        o = doc["objectives"]
        return cls(
            id=doc["id"], graph=from_dict(doc["graph"]),
            parent_id=doc["parent"], inspiration_id=doc["inspiration"],
            template=doc["template"],
            objectives=ObjectiveVector(
                acc=o["acc"], params=o["params_millions"],
                latency=o["latency_ms"], struct_div=o["struct_div"],
                conf=o["conf"]),
            sigma=doc["sigma"], reward=doc["reward"], bid=doc["bid"],
        )


def _objectives_dict(v: ObjectiveVector) -> dict:
    return {
        "acc": v.acc,
        "params_millions": v.params,
        "latency_ms": v.latency,
        "struct_div": round(v.struct_div, 6),
        "conf": v.conf,
    }


@dataclass
class _Pending:
    slot: int
    id: str
    parent: Candidate
    inspiration: Inspiration
    mode: str
    epsilon: float
    variance: float
    fallback: bool
    graph: BlockGraph | None = None
    failure: str | None = None
    result: EvaluationResult | None = None
    objectives: ObjectiveVector | None = None
    sigma: float = 0.0
    reward: float | None = None


@dataclass
class RunResult:
    records: list[dict]
    log_path: Path
    provider: object
    evaluator_calls: int
    metrics: dict | None
    timings: dict = field(default_factory=dict)


def build_provider(cfg: RunConfig):
    if cfg.provider_kind == "mock":
        if cfg.provider_script:
            return MockProvider.from_file(cfg.provider_script,
                                          config=cfg.provider)
        return MockProvider(demo_script(), config=cfg.provider)
    return HttpProvider(cfg.provider)


class _CountingEvaluator:
    """Thread-safe wrapper that counts evaluations for budget accounting."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, g: BlockGraph) -> EvaluationResult:
        with self._lock:
            self.calls += 1
        ev = self.cfg.evaluator
        if ev.kind == "surrogate":
            return surrogate_evaluate(g, seed=self.cfg.search.seed,
                                      budget_millions=ev.budget_millions)
        adapter = AdapterConfig.from_string(
            ev.adapter_command, timeout_s=ev.adapter_timeout_s,
            seed=self.cfg.search.seed, budget_epochs=ev.budget_epochs)
        return external_evaluate(g, adapter)


class _Runner:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.provider = build_provider(cfg)
        self.evaluate = _CountingEvaluator(cfg)
        self.rng = random.Random(cfg.search.seed)
        self.memory: list[ReflectionRecord] = []
        self.pool = InspirationPool()
        self.survivors: list[Candidate] = []
        self.step = 0
        self.records: list[dict] = []
        self.timings: dict = {"generation_seconds": []}
        self._writer: RunLogWriter | None = None

    # -- log plumbing ------------------------------------------------------

    def _emit(self, rec: dict) -> None:
        self.records.append(rec)
        if self._writer is not None:
            self._writer.write(rec)

    def _counters(self) -> dict:
        if isinstance(self.provider, MockProvider):
            provider_counts = self.provider.consumed()
        else:
            provider_counts = {}
        return {"provider": provider_counts, "evaluator": self.evaluate.calls}

    # -- run paths ---------------------------------------------------------

    def run(self, stop_after_generation: int | None = None) -> RunResult:
        start = time.perf_counter()
        path = Path(self.cfg.search.log_path)
        with RunLogWriter(path) as writer:
            self._writer = writer
            self._emit({
                "type": "header",
                "version": LOG_VERSION,
                "config_hash": config_hash(self.cfg),
                "seed": self.cfg.search.seed,
                "generations": self.cfg.search.generations,
                "candidates_per_generation":
                    self.cfg.search.candidates_per_generation,
            })
            self._init_root()
            return self._loop(1, stop_after_generation, path, start)

    def resume(self, log_path: str | Path | None = None,
               stop_after_generation: int | None = None) -> RunResult:
        path = Path(log_path if log_path is not None
                    else self.cfg.search.log_path)
        records = read_records(path)
        check_header(records, config_hash(self.cfg))
        if self.cfg.provider_kind != "mock" or self.cfg.evaluator.kind != "surrogate":
            raise IncompatibleLogError(
                "resume requires the mock provider and surrogate evaluator")
        if records[-1]["type"] == "run_end":
            return RunResult(records=records, log_path=path,
                             provider=self.provider,
                             evaluator_calls=0,
                             metrics=records[-1]["success_metrics"])
        if records[-1]["type"] != "generation_end":
            raise CorruptLogError("log ends mid-generation; cannot resume")
        start = time.perf_counter()
        self.records = records[:]
        self._restore(records[-1])
        with RunLogWriter(path, append=True) as writer:
            self._writer = writer
            return self._loop(records[-1]["generation"] + 1,
                              stop_after_generation, path, start)

    def _loop(self, first_generation: int,
              stop_after_generation: int | None,
              path: Path, start: float) -> RunResult:
        for gen in range(first_generation, self.cfg.search.generations + 1):
            tick = time.perf_counter()
            self._generation(gen)
            self.timings["generation_seconds"].append(
                time.perf_counter() - tick)
            if stop_after_generation is not None and gen >= stop_after_generation:
                self.timings["total_seconds"] = time.perf_counter() - start
                return RunResult(records=self.records, log_path=path,
                                 provider=self.provider,
                                 evaluator_calls=self.evaluate.calls,
                                 metrics=None, timings=self.timings)
        try:
            metrics = success_metrics(self.records)
        except NoChildrenError:
            metrics = None
        self._emit({
            "type": "run_end",
            "generations": self.cfg.search.generations,
            "success_metrics": metrics,
            "counters": self._counters(),
        })
        self.timings["total_seconds"] = time.perf_counter() - start
        _write_timing_sidecar(path, self.timings)
        return RunResult(records=self.records, log_path=path,
                         provider=self.provider,
                         evaluator_calls=self.evaluate.calls,
                         metrics=metrics, timings=self.timings)

    # -- pieces ------------------------------------------------------------

    def _init_root(self) -> None:
        base = resnet_basic_block(self.cfg.search.base_channels)
        result = self.evaluate(base)
        objectives = ObjectiveVector(
            acc=result.acc, params=result.params_millions,
            latency=result.latency_ms, struct_div=1.0, conf=result.conf)
        sigma = estimate_sigma(list(result.trace))
        root = Candidate(id="root", graph=base, parent_id=None,
                         inspiration_id=None, template=None,
                         objectives=objectives, sigma=sigma, reward=None)
        scored = score_population([objectives], [sigma],
                                  self.cfg.selection, 1.0)
        root.bid = scored[0].bid
        self.survivors = [root]
        self._emit({"type": "root", "candidate": root.snapshot()})

    def _paper_text(self) -> str:
        if self.cfg.search.paper_file:
            return Path(self.cfg.search.paper_file).read_text(encoding="utf-8")
        return DEFAULT_PAPER_TEXT

    def _refresh_pool(self, generation: int) -> None:
        reflections = "\n".join(r.summary for r in self.memory[-10:]) or "(none)"
        merged, transcript = run_consensus(
            self._paper_text(), self.provider, self.memory,
            self.cfg.consensus, reflections=reflections)
        for row in transcript:
            self._emit({"type": "consensus_round", "generation": generation,
                        **row})
        for item in merged:
            self.pool.add(item)
        if len(self.pool) == 0:
            raise ConsensusError("consensus produced an empty inspiration pool")
        self._emit({"type": "consensus_pool", "generation": generation,
                    "pool": self.pool.snapshot()})

    def _pick_parent(self) -> Candidate:
        draw = self.rng.random()  # always consumed: fixed stream layout
        if len(self.survivors) == 1:
            return self.survivors[0]
        if self.cfg.search.parent_sampling == "uniform":
            return self.survivors[min(int(draw * len(self.survivors)),
                                      len(self.survivors) - 1)]
        weights = softmax_weights([c.bid for c in self.survivors],
                                  self.cfg.consensus.temperature)
        return self.survivors[sample_index(weights, draw)]

    def _generation(self, gen: int) -> None:
        cfg = self.cfg
        if gen == 1 or cfg.search.refresh_consensus_each_generation:
            self._refresh_pool(gen)
        self._emit({"type": "generation_start", "generation": gen})

        pending: list[_Pending] = []
        for slot in range(cfg.search.candidates_per_generation):
            parent = self._pick_parent()
            eps_draw = self.rng.random()
            state = ReflectiveState(
                summaries=tuple(r.summary for r in self.memory[-10:]),
                recent_rewards=tuple(
                    r.reward for r in self.memory[-cfg.controller.window:]),
                generation=gen,
                parent_id=parent.id,
            )
            choice = choose_action(state, self.pool.inspirations(),
                                   self.memory, cfg.controller, eps_draw,
                                   self.provider)
            if choice.inspiration.id not in self.pool:
                self.pool.add(choice.inspiration)
            cand = _Pending(
                slot=slot, id=f"g{gen}c{slot}", parent=parent,
                inspiration=choice.inspiration, mode=choice.mode,
                epsilon=choice.epsilon, variance=choice.variance,
                fallback=choice.fallback)
            template = (TEMPLATES.get(choice.inspiration.template)
                        if choice.inspiration.template else None)
            if template is None:
                cand.failure = "inspiration has no template binding"
            else:
                try:
                    cand.graph = apply_transform(parent.graph, template)
                except (NoMatchError, InvalidResultError) as exc:
                    cand.failure = str(exc)
            pending.append(cand)

        with ThreadPoolExecutor(max_workers=cfg.evaluator.workers) as ex:
            futures = {c.slot: ex.submit(self.evaluate, c.graph)
                       for c in pending if c.graph is not None}
            for cand in pending:
                future = futures.get(cand.slot)
                if future is None:
                    continue
                try:
                    cand.result = future.result()
                except (AdapterTimeoutError, AdapterCrashError,
                        MalformedResultError) as exc:
                    cand.failure = str(exc)

        for cand in pending:
            step = self.step
            self.step += 1
            if cand.result is not None:
                cand.reward = cand.result.acc - cand.parent.acc
                label = cand.inspiration.template or cand.inspiration.id[:8]
                summary = reflect_summary(len(self.memory), label,
                                          cand.reward, self.provider)
                record(self.memory, cand.inspiration.id, cand.reward, summary)
                # Rounded at source so the logged value and the value used
                # by selection agree exactly; resume depends on that.
                cand.objectives = ObjectiveVector(
                    acc=cand.result.acc,
                    params=cand.result.params_millions,
                    latency=cand.result.latency_ms,
                    struct_div=round(structural_diversity(
                        cand.graph, cand.parent.graph), 6),
                    conf=cand.result.conf)
                cand.sigma = estimate_sigma(list(cand.result.trace))
            self._emit({
                "type": "controller_step",
                "step": step,
                "generation": gen,
                "slot": cand.slot,
                "variance": cand.variance,
                "epsilon": cand.epsilon,
                "mode": cand.mode,
                "fallback": cand.fallback,
                "inspiration": cand.inspiration.id,
                "reward": cand.reward,
            })
            self._emit({
                "type": "candidate",
                "generation": gen,
                "slot": cand.slot,
                "step": step,
                "id": cand.id,
                "parent": cand.parent.id,
                "inspiration": cand.inspiration.id,
                "template": cand.inspiration.template,
                "mode": cand.mode,
                "status": "ok" if cand.result is not None else "failed",
                "failure": cand.failure,
                "graph": to_dict(cand.graph) if cand.graph is not None else None,
                "objectives": (_objectives_dict(cand.objectives)
                               if cand.objectives is not None else None),
                "sigma": cand.sigma if cand.result is not None else None,
                "reward": cand.reward,
            })

        children = [
            Candidate(id=c.id, graph=c.graph, parent_id=c.parent.id,
                      inspiration_id=c.inspiration.id,
                      template=c.inspiration.template,
                      objectives=c.objectives, sigma=c.sigma, reward=c.reward)
            for c in pending if c.objectives is not None
        ]
        child_ids = {c.id for c in children}
        sel_pool = list(children)
        if cfg.search.elitism or not sel_pool:
            sel_pool.extend(self.survivors)
        scored = score_population([c.objectives for c in sel_pool],
                                  [c.sigma for c in sel_pool],
                                  cfg.selection, cfg.search.survival_kappa)
        for cand, entry in zip(sel_pool, scored):
            cand.bid = entry.bid
        self._emit({
            "type": "selection",
            "generation": gen,
            "pool": [{
                "id": sel_pool[s.index].id,
                "front_index": s.front_index,
                "bid": s.bid,
                "objectives": _objectives_dict(s.objectives),
                "survived": s.survived,
            } for s in scored],
        })
        winners = [s for s in scored if s.survived]
        winners.sort(key=lambda s: (-s.bid, s.objectives.params, s.index))
        self.survivors = [sel_pool[s.index] for s in winners]

        credited = [([c.inspiration_id], c.reward) for c in self.survivors
                    if c.id in child_ids and c.inspiration_id is not None
                    and c.reward is not None]
        update_utility(self.pool, credited, cfg.consensus.gamma,
                       cfg.consensus.credit_kappa)
        dropped = age_pool(self.pool, cfg.consensus)
        self._emit({
            "type": "generation_end",
            "generation": gen,
            "survivors": [c.snapshot() for c in self.survivors],
            "dropped_inspirations": dropped,
            "pool": self.pool.snapshot(),
            "memory": [{
                "step": r.step,
                "inspiration": r.inspiration_id,
                "reward": r.reward,
                "summary": r.summary,
            } for r in self.memory],
            "step": self.step,
            "rng_state": _rng_state_doc(self.rng),
            "counters": self._counters(),
        })

    def _restore(self, end: dict) -> None:
        self.survivors = [Candidate.restore(doc) for doc in end["survivors"]]
        self.pool = InspirationPool.restore(end["pool"])
        self.memory = [
            ReflectionRecord(step=r["step"], inspiration_id=r["inspiration"],
                             reward=r["reward"], summary=r["summary"])
            for r in end["memory"]
        ]
        self.step = end["step"]
        self.rng.setstate(_rng_state_from_doc(end["rng_state"]))
        counters = end["counters"]
        if isinstance(self.provider, MockProvider):
            self.provider.fast_forward(counters["provider"])
        self.evaluate.calls = counters["evaluator"]


def _rng_state_doc(rng: random.Random) -> list:
    version, internal, gauss = rng.getstate()
    return [version, list(internal), gauss]


def _rng_state_from_doc(doc: list):
    version, internal, gauss = doc
    return (version, tuple(internal), gauss)


def _write_timing_sidecar(log_path: Path, timings: dict) -> None:
    sidecar = log_path.with_suffix(log_path.suffix + ".timing.json")
    sidecar.write_text(json.dumps(timings, indent=2) + "\n", encoding="utf-8")


def run(cfg: RunConfig, stop_after_generation: int | None = None) -> RunResult:
    """Execute a full search and write its log to cfg.search.log_path."""
    return _Runner(cfg).run(stop_after_generation=stop_after_generation)


def resume(cfg: RunConfig, log_path: str | Path | None = None) -> RunResult:
    """Continue an interrupted run from its last completed generation.

    The log must carry a matching configuration digest and end exactly at a
    generation boundary; the continuation appends records identical to the
    ones an uninterrupted run would have written.
    """
    return _Runner(cfg).resume(log_path)


def success_metrics(records: list[dict]) -> dict:
    """Search-efficiency metrics over all evaluated children in a log.

    success_rate is the fraction of children strictly improving on their
    parent; avg_trials_to_first_success averages, over parents with at
    least one success, the 1-based index of the first success among that
    parent's trials in log order; trials_per_success divides children by
    successes (null when there are none).
    """
    children = [r for r in records
                if r.get("type") == "candidate" and r.get("status") == "ok"]
    if not children:
        raise NoChildrenError("the log records no evaluated children")
    successes = [c for c in children if c["reward"] is not None
                 and c["reward"] > 0]
    by_parent: dict[str, list[bool]] = {}
    for c in children:
        by_parent.setdefault(c["parent"], []).append(
            c["reward"] is not None and c["reward"] > 0)
    firsts = []
    for outcomes in by_parent.values():
        if any(outcomes):
            firsts.append(outcomes.index(True) + 1)
    return {
        "children": len(children),
        "successes": len(successes),
        "success_rate": len(successes) / len(children),
        "avg_trials_to_first_success":
            sum(firsts) / len(firsts) if firsts else None,
        "trials_per_success":
            len(children) / len(successes) if successes else None,
    }


def best_candidate(records: list[dict]) -> dict | None:
    """The ok candidate (root included) with the highest accuracy."""
    best = None
    for r in records:
        if r.get("type") == "root":
            doc = dict(r["candidate"])
            doc.setdefault("status", "ok")
            entry = {"id": doc["id"], "objectives": doc["objectives"],
                     "graph": doc["graph"], "generation": 0}
        elif r.get("type") == "candidate" and r.get("status") == "ok":
            entry = {"id": r["id"], "objectives": r["objectives"],
                     "graph": r["graph"], "generation": r["generation"]}
        else:
            continue
        if best is None or entry["objectives"]["acc"] > best["objectives"]["acc"]:
            best = entry
    return best
