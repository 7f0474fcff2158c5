"""Pareto-front construction and bid-based survivor selection.

Candidates are compared on five objectives: accuracy, parameter count,
latency, structural diversity, and confidence.  Accuracy, diversity, and
confidence are maximized; parameters and latency are minimized.  Survivors
come from the first front, ranked by a scalar bid that folds the objectives
together with an uncertainty bonus.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass


class EmptyPopulationError(ValueError):
    """Raised when selection is asked to operate on zero candidates."""


@dataclass(frozen=True)
class ObjectiveVector:
    """One candidate's scores on the five search objectives."""

    acc: float
    params: float
    latency: float
    struct_div: float
    conf: float


@dataclass(frozen=True)
class BidWeights:
    """Coefficients of the scalar bid.

    params_ref and latency_ref are the reference scales used when bids are
    computed in "reference" normalization mode: raw values are divided by
    them so each term stays order one.
    """

    params_penalty: float = 0.10
    latency_penalty: float = 0.10
    diversity_gain: float = 0.10
    conf_gain: float = 0.10
    uncertainty_gain: float = 0.10
    params_ref: float = 1.0
    latency_ref: float = 10.0
    normalization: str = "reference"  # or "minmax"


@dataclass(frozen=True)
class ScoredCandidate:
    """Selection outcome for one pool member."""

    index: int
    objectives: ObjectiveVector
    sigma: float
    front_index: int
    bid: float
    survived: bool


def dominates(a: ObjectiveVector, b: ObjectiveVector) -> bool:
    """Check Pareto dominance of ``a`` over ``b``.

    Parameters
    ----------
    a, b : ObjectiveVector
        Candidates under comparison.

    Returns
    -------
    bool
        True when ``a`` is at least as good as ``b`` on every objective
        (acc, struct_div, conf maximized; params, latency minimized) and
        strictly better on at least one.
    """
    ge = (a.acc >= b.acc and a.params <= b.params and a.latency <= b.latency
          and a.struct_div >= b.struct_div and a.conf >= b.conf)
    gt = (a.acc > b.acc or a.params < b.params or a.latency < b.latency
          or a.struct_div > b.struct_div or a.conf > b.conf)
    return ge and gt


def fast_non_dominated_sort(pop: list[ObjectiveVector]) -> list[list[int]]:
    """Partition a population into Pareto fronts.

    Parameters
    ----------
    pop : list of ObjectiveVector
        The candidate pool.  Must be non-empty.

    Returns
    -------
    list of list of int
        Fronts in ascending rank order.  Front 0 holds the indices of all
        non-dominated candidates; each later front is non-dominated once
        the earlier fronts are removed.  Every input index appears in
        exactly one front, and within a front indices keep input order.

    Raises
    ------
    EmptyPopulationError
        If ``pop`` is empty.

    Notes
    -----
    Standard bookkeeping sort: for each candidate record the set it
    dominates and a counter of how many dominate it, then peel fronts by
    repeatedly releasing candidates whose counter reaches zero.  Runs in
    O(M * N^2) for N candidates and M objectives.
    """
    if not pop:
        raise EmptyPopulationError("cannot sort an empty population")
    n = len(pop)
    dominated_by_me: list[list[int]] = [[] for _ in range(n)]
    dominator_count = [0] * n
    fronts: list[list[int]] = [[]]
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if dominates(pop[i], pop[j]):
                dominated_by_me[i].append(j)
            elif dominates(pop[j], pop[i]):
                dominator_count[i] += 1
        if dominator_count[i] == 0:
            fronts[0].append(i)
    current = 0
    while fronts[current]:
        nxt: list[int] = []
        for i in fronts[current]:
            for j in dominated_by_me[i]:
                dominator_count[j] -= 1
                if dominator_count[j] == 0:
                    nxt.append(j)
        current += 1
        fronts.append(sorted(nxt))
    fronts.pop()
    return fronts


def bid(v: ObjectiveVector, sigma: float, w: BidWeights) -> float:
    """Scalar bid of one candidate.

    ``v.params`` and ``v.latency`` are expected in normalized units (see
    normalize_pool); the formula itself is a plain affine combination:

        acc - wp * params - wl * latency + wd * struct_div
            + wc * conf + wu * sigma
    """
    return (v.acc
            - w.params_penalty * v.params
            - w.latency_penalty * v.latency
            + w.diversity_gain * v.struct_div
            + w.conf_gain * v.conf
            + w.uncertainty_gain * sigma)


def normalize_pool(pop: list[ObjectiveVector], w: BidWeights) -> list[ObjectiveVector]:
    """Rescale params and latency before bidding.

    In "reference" mode (the default) raw values are divided by fixed
    reference scales, so a candidate's bid does not change when the rest of
    the pool changes.  In "minmax" mode both axes are min-max scaled over
    the pool; a constant axis maps to 0.
    """
    if not pop:
        raise EmptyPopulationError("cannot normalize an empty population")
    if w.normalization == "minmax":
        p_lo, p_hi = min(v.params for v in pop), max(v.params for v in pop)
        l_lo, l_hi = min(v.latency for v in pop), max(v.latency for v in pop)
        p_span = p_hi - p_lo
        l_span = l_hi - l_lo
        return [
            ObjectiveVector(
                acc=v.acc,
                params=(v.params - p_lo) / p_span if p_span > 0 else 0.0,
                latency=(v.latency - l_lo) / l_span if l_span > 0 else 0.0,
                struct_div=v.struct_div,
                conf=v.conf,
            ) for v in pop
        ]
    if w.normalization != "reference":
        raise ValueError(f"unknown normalization mode: {w.normalization!r}")
    return [
        ObjectiveVector(
            acc=v.acc,
            params=v.params / w.params_ref,
            latency=v.latency / w.latency_ref,
            struct_div=v.struct_div,
            conf=v.conf,
        ) for v in pop
    ]


def survivor_count(front_size: int, kappa: float) -> int:
    """K = max(1, floor(kappa * front_size))."""
    return max(1, math.floor(kappa * front_size))


def score_population(pop: list[ObjectiveVector], sigmas: list[float],
                     w: BidWeights, kappa: float) -> list[ScoredCandidate]:
    """Rank a pool and mark its survivors.

    Parameters
    ----------
    pop : list of ObjectiveVector
        Raw (unnormalized) objective vectors.
    sigmas : list of float
        Per-candidate uncertainty estimates, same length as ``pop``.
    w : BidWeights
        Bid coefficients and normalization mode.
    kappa : float
        Survival fraction in (0, 1].

    Returns
    -------
    list of ScoredCandidate
        One entry per input index, in input order, carrying the front
        index, bid, and survival flag.  Survivors are the top-K bids within
        the first front, K = max(1, floor(kappa * |front 0|)); bid ties
        break toward lower raw params, then lower index.
    """
    if not pop:
        raise EmptyPopulationError("cannot select from an empty population")
    if len(sigmas) != len(pop):
        raise ValueError("sigmas and population lengths differ")
    fronts = fast_non_dominated_sort(pop)
    front_of = {}
    for rank, front in enumerate(fronts):
        for idx in front:
            front_of[idx] = rank
    normalized = normalize_pool(pop, w)
    bids = [bid(normalized[i], sigmas[i], w) for i in range(len(pop))]
    first = fronts[0]
    k = survivor_count(len(first), kappa)
    ranked = sorted(first, key=lambda i: (-bids[i], pop[i].params, i))
    survivors = set(ranked[:k])
    return [
        ScoredCandidate(index=i, objectives=pop[i], sigma=sigmas[i],
                        front_index=front_of[i], bid=bids[i],
                        survived=i in survivors)
        for i in range(len(pop))
    ]


def select_survivors(pop: list[ObjectiveVector], sigmas: list[float],
                     w: BidWeights, kappa: float) -> list[int]:
    """Indices of the surviving candidates, in descending bid order."""
    scored = score_population(pop, sigmas, w, kappa)
    winners = [s for s in scored if s.survived]
    winners.sort(key=lambda s: (-s.bid, s.objectives.params, s.index))
    return [s.index for s in winners]


def estimate_sigma(trace: list[float]) -> float:
    """Sample standard deviation of the last five trace points.

    A trace shorter than two points has no spread and scores 0.
    """
    if not trace:
        return 0.0
    window = trace[-5:]
    if len(window) < 2:
        return 0.0
    return statistics.stdev(window)
