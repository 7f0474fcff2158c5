"""Structural distance between block graphs.

Three similarity views are blended: op multiset overlap, per-op depth
distributions compared by earth-mover distance, and a two-round
Weisfeiler-Lehman color comparison that is sensitive to wiring.
"""

from __future__ import annotations

import hashlib
import math
from collections import Counter

from .graph import BlockGraph, op_histogram, topological_depths

# Blend weights over (op, depth, WL) similarity; they sum to one.
OP_WEIGHT = 0.50
DEPTH_WEIGHT = 0.30
WL_WEIGHT = 0.20

WL_ROUNDS = 2


def op_similarity(child: Counter, parent: Counter) -> float:
    """Multiset overlap: sum of per-op minima over sum of per-op maxima.

    Returns 1.0 when both histograms are empty.
    """
    ops = set(child) | set(parent)
    lo = sum(min(child.get(op, 0), parent.get(op, 0)) for op in ops)
    hi = sum(max(child.get(op, 0), parent.get(op, 0)) for op in ops)
    if hi == 0:
        return 1.0
    return lo / hi


def depth_distributions(g: BlockGraph) -> dict[str, dict[float, float]]:
    """Per-op distribution of normalized node depths.

    Depths are longest-path depths divided by the graph's maximum depth, so
    every position lands in [0, 1].  Sentinel input/output nodes are skipped.
    """
    depths = topological_depths(g)
    max_depth = max(depths.values(), default=0) or 1
    node_map = g.node_map()
    per_op: dict[str, Counter] = {}
    for nid, d in depths.items():
        op = node_map[nid].op
        if op in ("input", "output"):
            continue
        per_op.setdefault(op, Counter())[d / max_depth] += 1
    out: dict[str, dict[float, float]] = {}
    for op, counts in per_op.items():
        total = sum(counts.values())
        out[op] = {pos: c / total for pos, c in sorted(counts.items())}
    return out


def emd_point_masses(a: dict[float, float], b: dict[float, float]) -> float:
    """1-D earth-mover distance between two unit point-mass distributions.

    Computed as the integral of |CDF_a - CDF_b| over the merged support.
    Both supports live in [0, 1], so the result does too.
    """
    points = sorted(set(a) | set(b))
    dist = 0.0
    cdf_a = 0.0
    cdf_b = 0.0
    for i, x in enumerate(points[:-1]):
        cdf_a += a.get(x, 0.0)
        cdf_b += b.get(x, 0.0)
        dist += abs(cdf_a - cdf_b) * (points[i + 1] - x)
    return dist


def depth_similarity(child: BlockGraph, parent: BlockGraph) -> float:
    """Mean over ops in either graph of (1 - depth-distribution EMD).

    An op present in only one graph scores 0 for that op.
    """
    dists_c = depth_distributions(child)
    dists_p = depth_distributions(parent)
    ops = sorted(set(dists_c) | set(dists_p))
    if not ops:
        return 1.0
    total = 0.0
    for op in ops:
        if op in dists_c and op in dists_p:
            total += 1.0 - emd_point_masses(dists_c[op], dists_p[op])
    return total / len(ops)


def wl_color_histogram(g: BlockGraph, rounds: int = WL_ROUNDS) -> Counter:
    """Weisfeiler-Lehman colors after the given number of refinement rounds.

    Colors start from op labels and are refined by hashing the node's own
    color with the sorted colors of its predecessors and successors, so the
    result reflects directed wiring, not just op counts.  Sentinel
    input/output nodes take part in refinement but are excluded from the
    returned histogram, whose total therefore equals the interior node count.
    """
    preds = g.predecessors()
    succs = g.successors()
    colors = {n.id: _wl_hash(n.op) for n in g.nodes}
    for _ in range(rounds):
        fresh = {}
        for n in g.nodes:
            payload = "|".join([
                colors[n.id],
                ",".join(sorted(colors[p] for p in preds[n.id])),
                ",".join(sorted(colors[s] for s in succs[n.id])),
            ])
            fresh[n.id] = _wl_hash(payload)
        colors = fresh
    node_map = g.node_map()
    return Counter(colors[nid] for nid in colors
                   if node_map[nid].op not in ("input", "output"))


def _wl_hash(label: str) -> str:
    return hashlib.blake2b(label.encode(), digest_size=8).hexdigest()


def wl_similarity(child: BlockGraph, parent: BlockGraph) -> float:
    """Cosine similarity of WL color histograms; 1.0 when both are empty."""
    hc = wl_color_histogram(child)
    hp = wl_color_histogram(parent)
    if not hc and not hp:
        return 1.0
    dot = sum(hc[color] * hp.get(color, 0) for color in hc)
    norm_c = math.sqrt(sum(v * v for v in hc.values()))
    norm_p = math.sqrt(sum(v * v for v in hp.values()))
    if norm_c == 0.0 or norm_p == 0.0:
        return 0.0
    return dot / (norm_c * norm_p)


def blend_similarity(s_op: float, s_depth: float, s_wl: float) -> float:
    """Weighted blend of the three similarity views, clamped to [0, 1]."""
    s = OP_WEIGHT * s_op + DEPTH_WEIGHT * s_depth + WL_WEIGHT * s_wl
    return min(1.0, max(0.0, s))


def structural_diversity(child: BlockGraph | None,
                         parent: BlockGraph | None) -> float:
    """1 minus the blended similarity; 1.0 when either graph is missing."""
    if child is None or parent is None:
        return 1.0
    s = blend_similarity(
        op_similarity(op_histogram(child), op_histogram(parent)),
        depth_similarity(child, parent),
        wl_similarity(child, parent),
    )
    return 1.0 - s
