"""Multi-round multi-expert consensus over design inspirations.

A planning call splits the literature into at most four sub-axes; one expert
per axis proposes block edits each round, a merge step consolidates them, and
rounds repeat until the merged set stabilizes both in membership (Jaccard)
and in mean remembered quality, or the round budget runs out.  The surviving
pool carries per-inspiration utilities that decay each generation and grow
when a survivor's lineage includes the inspiration.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from hashlib import blake2b
from typing import Iterable, Mapping, Sequence

from .explorer import ReflectionRecord, q_value
from .gateway import (
    EXPERT_PROMPT,
    EXPERT_SCHEMA,
    MERGE_PROMPT,
    MERGE_SCHEMA,
    SUBTASKS_PROMPT,
    SUBTASKS_SCHEMA,
    Provider,
    SchemaViolationError,
    call_json,
    cosine_distance,
    embed,
    number_sentences,
    truncate_words,
)
from .transforms import bind_template

log = logging.getLogger(__name__)

TEXT_WORD_LIMIT = 40
MAX_SUB_AXES = 4
MAX_KEYWORDS = 5


class EmptySetError(ValueError):
    """mean_quality needs a non-empty inspiration set."""


class EmptyPoolError(ValueError):
    """retrieval_sample needs a non-empty pool."""


class ConsensusError(RuntimeError):
    """Sub-axis extraction failed; consensus cannot start."""


@dataclass
class Inspiration:
    """One actionable design cue.

    id is a stable digest of the canonical (lowercased, whitespace-collapsed,
    40-word-clipped) text, so trivially reworded duplicates collide.
    """

    id: str
    text: str
    embedding: tuple[float, ...] = field(repr=False)
    utility: float = 0.0
    template: str | None = None
    evidence_refs: tuple[int, ...] = ()
    origin_axis: str = ""
    origin_round: int = 0
    stale_generations: int = 0


@dataclass(frozen=True)
class SubAxis:
    name: str
    keywords: tuple[str, ...] = ()


@dataclass(frozen=True)
class ConsensusConfig:
    tau_j: float = 0.6
    tau_q: float = 0.03
    t_min: int = 2
    t_max: int = 6
    max_experts: int = MAX_SUB_AXES
    max_keywords: int = MAX_KEYWORDS
    delta: float = 0.1          # redundancy radius in cosine distance
    eps_guard: float = 1e-8     # keeps the quality drift ratio finite
    gamma: float = 0.9          # per-generation utility decay
    credit_kappa: float = 1.0   # survivor reward scale in utility updates
    temperature: float = 1.0    # softmax temperature for retrieval
    utility_floor: float = 0.01
    stale_patience: int = 3


def canonical_text(text: str) -> str:
    return " ".join(text.split()).lower()


def make_inspiration(text: str, origin_axis: str = "", origin_round: int = 0,
                     evidence_refs: Iterable[int] = (),
                     utility: float = 0.0) -> Inspiration:
    """Canonicalize, clip to 40 words, embed, hash, and bind a template."""
    clipped = truncate_words(" ".join(text.split()), TEXT_WORD_LIMIT)
    canon = clipped.lower()
    return Inspiration(
        id=blake2b(canon.encode(), digest_size=8).hexdigest(),
        text=clipped,
        embedding=embed(canon),
        utility=utility,
        template=bind_template(clipped),
        evidence_refs=tuple(int(r) for r in evidence_refs),
        origin_axis=origin_axis,
        origin_round=origin_round,
    )


class InspirationPool:
    """Insertion-ordered id-keyed pool; iteration order is deterministic."""

    def __init__(self, items: Iterable[Inspiration] = ()):
        self._items: dict[str, Inspiration] = {}
        for item in items:
            self.add(item)

    def add(self, item: Inspiration) -> Inspiration:
        """Insert; an already-present id keeps its existing entry."""
        return self._items.setdefault(item.id, item)

    def get(self, inspiration_id: str) -> Inspiration | None:
        return self._items.get(inspiration_id)

    def remove(self, inspiration_id: str) -> None:
        self._items.pop(inspiration_id, None)

    def __contains__(self, inspiration_id: str) -> bool:
        return inspiration_id in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items.values())

    def inspirations(self) -> list[Inspiration]:
        return list(self._items.values())

    def snapshot(self) -> list[dict]:
        return [{
            "id": i.id,
            "text": i.text,
            "utility": i.utility,
            "template": i.template,
            "evidence_refs": list(i.evidence_refs),
            "origin_axis": i.origin_axis,
            "origin_round": i.origin_round,
            "stale_generations": i.stale_generations,
        } for i in self]

    @classmethod
    def restore(cls, records: Iterable[Mapping]) -> "InspirationPool":
        pool = cls()
        for r in records:
            item = make_inspiration(
                r["text"], origin_axis=r["origin_axis"],
                origin_round=r["origin_round"],
                evidence_refs=r["evidence_refs"], utility=r["utility"])
            item.stale_generations = r["stale_generations"]
            pool.add(item)
        return pool


def extract_subaxes(paper_text: str, provider: Provider,
                    cfg: ConsensusConfig = ConsensusConfig()) -> list[SubAxis]:
    """Split the literature into at most four architecture-shaping axes.

    Overlong axis or keyword lists are clipped with a warning.  When the
    provider never produces a valid reply the search cannot proceed:
    ConsensusError carries the diagnostic.
    """
    try:
        reply = call_json(provider, SUBTASKS_PROMPT,
                          {"paper_numbered": number_sentences(paper_text)},
                          SUBTASKS_SCHEMA)
    except SchemaViolationError as exc:
        raise ConsensusError(
            f"sub-axis extraction failed after {len(exc.bodies)} attempts"
        ) from exc
    sub_tasks = reply["sub_tasks"]
    if len(sub_tasks) > cfg.max_experts:
        log.warning("clipping %d sub-axes to %d", len(sub_tasks), cfg.max_experts)
        sub_tasks = sub_tasks[:cfg.max_experts]
    keywords = reply["keywords"]
    if len(keywords) > cfg.max_keywords:
        log.warning("clipping %d keywords to %d", len(keywords), cfg.max_keywords)
        keywords = keywords[:cfg.max_keywords]
    if not sub_tasks:
        sub_tasks = ["general block design"]
    return [SubAxis(name=name, keywords=tuple(keywords)) for name in sub_tasks]


def expert_propose(axis: SubAxis, paper_numbered: str, current_insp: str,
                   reflections: str, provider: Provider,
                   round_index: int) -> Inspiration | None:
    """One expert's proposal for its axis; None when it fails to comply."""
    field_desc = axis.name
    if axis.keywords:
        field_desc += " (keywords: " + ", ".join(axis.keywords) + ")"
    try:
        reply = call_json(provider, EXPERT_PROMPT, {
            "field": field_desc,
            "paper_numbered": paper_numbered,
            "current_insp": current_insp,
            "reflections": reflections,
        }, EXPERT_SCHEMA)
    except SchemaViolationError:
        log.warning("expert for axis '%s' never produced valid JSON; "
                    "contributing nothing this round", axis.name)
        return None
    return make_inspiration(
        reply["proposal"], origin_axis=axis.name, origin_round=round_index,
        evidence_refs=reply.get("evidence_refs", ()))


def merge(proposals: Sequence[Inspiration], provider: Provider | None,
          cfg: ConsensusConfig = ConsensusConfig()) -> list[Inspiration]:
    """Consolidate a round's proposals into at most four inspirations.

    Without a merge-capable provider (none, or a scripted provider with no
    merge queue) this is exact-duplicate removal keeping first occurrences.
    A provider that fails schema validation degrades to the same rule.
    """
    local = _dedup_first(proposals, MAX_SUB_AXES)
    if provider is None:
        return local
    if getattr(provider, "scripted", False):
        queues = getattr(provider, "queues", {})
        if "merge" not in queues:
            return local
    payload = json.dumps([p.text for p in proposals])
    try:
        reply = call_json(provider, MERGE_PROMPT, {"current_insp": payload},
                          MERGE_SCHEMA)
    except SchemaViolationError:
        log.warning("merge call failed validation; falling back to dedup")
        return local
    texts = reply["inspirations"]
    if len(texts) > MAX_SUB_AXES:
        log.warning("clipping %d merged inspirations to %d",
                    len(texts), MAX_SUB_AXES)
        texts = texts[:MAX_SUB_AXES]
    by_id = {p.id: p for p in proposals}
    merged: list[Inspiration] = []
    for text in texts:
        item = make_inspiration(text, origin_axis="merged", origin_round=0)
        merged.append(by_id.get(item.id, item))
    return _dedup_first(merged, MAX_SUB_AXES)


def _dedup_first(items: Sequence[Inspiration], limit: int) -> list[Inspiration]:
    seen: set[str] = set()
    out: list[Inspiration] = []
    for item in items:
        if item.id in seen:
            continue
        seen.add(item.id)
        out.append(item)
        if len(out) == limit:
            break
    return out


def redundancy_filter(items: Sequence[Inspiration],
                      delta: float) -> list[Inspiration]:
    """Greedy semantic pruning in presentation order.

    An item is kept only when its minimum cosine distance to everything
    already kept is at least delta; the first item is always kept.
    """
    kept: list[Inspiration] = []
    for item in items:
        if all(cosine_distance(item.embedding, k.embedding) >= delta
               for k in kept):
            kept.append(item)
    return kept


def jaccard(a: Iterable[Inspiration], b: Iterable[Inspiration]) -> float:
    """Set overlap of inspiration ids; two empty sets count as identical."""
    ids_a = {i.id for i in a}
    ids_b = {i.id for i in b}
    if not ids_a and not ids_b:
        return 1.0
    return len(ids_a & ids_b) / len(ids_a | ids_b)


def mean_quality(items: Sequence[Inspiration],
                 memory: Sequence[ReflectionRecord]) -> float:
    """Mean remembered reward over the set; raises on an empty set."""
    if not items:
        raise EmptySetError("mean quality of an empty inspiration set")
    return sum(q_value(i.id, memory) for i in items) / len(items)


def run_consensus(paper_text: str, provider: Provider,
                  memory: Sequence[ReflectionRecord],
                  cfg: ConsensusConfig = ConsensusConfig(),
                  reflections: str = "(none)",
                  ) -> tuple[list[Inspiration], list[dict]]:
    """Run expert rounds until the merged set stabilizes.

    Convergence at round t requires all three of: Jaccard overlap with the
    previous round at least tau_j, relative mean-quality drift at most
    tau_q, and t >= t_min.  The loop always stops after t_max rounds.
    Returns the last completed round's set plus a per-round transcript.
    """
    axes = extract_subaxes(paper_text, provider, cfg)
    paper_numbered = number_sentences(paper_text)
    previous: list[Inspiration] = []
    previous_mu = 0.0
    transcript: list[dict] = []
    rounds_done = 0
    converged = False
    while not converged and rounds_done < cfg.t_max:
        t = rounds_done + 1
        current_insp = "\n".join(f"- {i.text}" for i in previous) or "(none)"
        proposals = _fan_out_experts(axes, paper_numbered, current_insp,
                                     reflections, provider, t)
        contributed = [p for p in proposals if p is not None]
        merged = merge(contributed, provider, cfg)
        current = redundancy_filter(merged, cfg.delta)
        j = jaccard(current, previous)
        mu = mean_quality(current, memory) if current else 0.0
        drift = abs(mu - previous_mu) / (abs(previous_mu) + cfg.eps_guard)
        converged = j >= cfg.tau_j and drift <= cfg.tau_q and t >= cfg.t_min
        transcript.append({
            "round": t,
            "proposals": [p.text if p else None for p in proposals],
            "merged": [i.id for i in current],
            "jaccard": j,
            "mean_quality": mu,
            "quality_drift": drift,
            "converged": converged,
        })
        previous, previous_mu = current, mu
        rounds_done += 1
    return previous, transcript


def _fan_out_experts(axes: Sequence[SubAxis], paper_numbered: str,
                     current_insp: str, reflections: str, provider: Provider,
                     round_index: int) -> list[Inspiration | None]:
    """Dispatch one proposal call per axis; results keep axis order.

    Scripted providers serve queues whose order must match the axis order,
    so they are dispatched on a single worker; live providers fan out.
    """
    if getattr(provider, "scripted", False):
        workers = 1
    else:
        workers = max(1, min(len(axes), provider.config.max_concurrency))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(expert_propose, axis, paper_numbered, current_insp,
                        reflections, provider, round_index)
            for axis in axes
        ]
        return [f.result() for f in futures]


def update_utility(pool: InspirationPool,
                   survivors: Sequence[tuple[Iterable[str], float]],
                   gamma: float, credit_kappa: float) -> InspirationPool:
    """Decay every utility, then credit survivors' lineage inspirations.

    survivors pairs each surviving candidate's lineage inspiration ids with
    its reward R; an inspiration appearing in several lineages collects the
    sum.  Staleness counters track consecutive zero-credit generations for
    the aging pass.
    """
    credits: dict[str, float] = defaultdict(float)
    for lineage_ids, reward in survivors:
        for iid in set(lineage_ids):
            credits[iid] += reward
    for item in pool:
        credit = credits.get(item.id, 0.0)
        item.utility = gamma * item.utility + credit_kappa * credit
        item.stale_generations = 0 if credit != 0.0 else item.stale_generations + 1
    return pool


def softmax_weights(values: Sequence[float], temperature: float) -> list[float]:
    """Numerically stable softmax of values / temperature."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not values:
        raise EmptyPoolError("softmax over an empty value list")
    peak = max(values)
    exps = [math.exp((v - peak) / temperature) for v in values]
    total = sum(exps)
    return [e / total for e in exps]


def sample_index(weights: Sequence[float], draw: float) -> int:
    """Index of the weight bucket containing draw in [0, 1)."""
    acc = 0.0
    for i, w in enumerate(weights):
        acc += w
        if draw < acc:
            return i
    return len(weights) - 1


def retrieval_sample(pool: InspirationPool, temperature: float,
                     rng) -> Inspiration:
    """Sample one inspiration with probability softmax(utility / T).

    Deterministic for a seeded rng; equal utilities give a uniform draw.
    """
    items = pool.inspirations()
    if not items:
        raise EmptyPoolError("cannot sample from an empty pool")
    weights = softmax_weights([i.utility for i in items], temperature)
    return items[sample_index(weights, rng.random())]


def age_pool(pool: InspirationPool, cfg: ConsensusConfig) -> list[str]:
    """Drop long-stale, low-utility items; never strand a sub-axis.

    An item ages out after stale_patience consecutive zero-credit
    generations if its utility sits below utility_floor, unless it is the
    last remaining inspiration of its origin axis.  Returns dropped ids.
    """
    axis_counts: dict[str, int] = defaultdict(int)
    for item in pool:
        axis_counts[item.origin_axis] += 1
    dropped: list[str] = []
    for item in pool.inspirations():
        eligible = (item.stale_generations >= cfg.stale_patience
                    and item.utility < cfg.utility_floor)
        if eligible and axis_counts[item.origin_axis] > 1:
            pool.remove(item.id)
            axis_counts[item.origin_axis] -= 1
            dropped.append(item.id)
    return dropped
