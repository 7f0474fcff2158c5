"""Shared generators and brute-force oracles for the test suite."""

from __future__ import annotations

import random

from archevo.graph import BlockGraph, OpNode, graph, validate

# Ops that preserve channel count and accept a single input, safe to chain
# in any order without violating a validation rule.
_SAFE_UNARY = ["relu", "gelu", "bn", "identity"]


def make_random_graph(rng: random.Random, max_interior: int = 10,
                      channels: int = 16) -> BlockGraph:
    """A random valid block: a unary chain with optional conv stages and an
    optional residual add from the entry."""
    n_ops = rng.randint(1, max_interior)
    nodes = [OpNode(0, "input")]
    for i in range(1, n_ops + 1):
        roll = rng.random()
        if roll < 0.25:
            nodes.append(OpNode(i, "conv", {
                "in_channels": channels, "out_channels": channels,
                "kernel": rng.choice([1, 3, 5])}))
        elif roll < 0.35:
            nodes.append(OpNode(i, "pwconv", {
                "in_channels": channels, "out_channels": channels}))
        elif roll < 0.45:
            nodes.append(OpNode(i, "dwconv", {
                "in_channels": channels, "out_channels": channels,
                "kernel": rng.choice([3, 5, 7]), "groups": channels}))
        elif roll < 0.55:
            nodes.append(OpNode(i, "pool", {"kernel": 2}))
        else:
            nodes.append(OpNode(i, rng.choice(_SAFE_UNARY)))
    use_add = rng.random() < 0.5
    if use_add:
        add_id = n_ops + 1
        out_id = n_ops + 2
        nodes.append(OpNode(add_id, "add"))
        nodes.append(OpNode(out_id, "output"))
        edges = [(i, i + 1) for i in range(n_ops + 1)]
        edges.append((0, add_id))
        edges.append((add_id, out_id))
    else:
        out_id = n_ops + 1
        nodes.append(OpNode(out_id, "output"))
        edges = [(i, i + 1) for i in range(n_ops + 1)]
    g = graph(nodes, edges, 0, out_id)
    report = validate(g)
    assert report.ok, f"generator produced an invalid graph: {report.violations}"
    return g


def permute_ids(g: BlockGraph, rng: random.Random) -> BlockGraph:
    """Relabel node ids by a random permutation and shuffle listing order.

    The result is isomorphic to the input by construction.
    """
    ids = [n.id for n in g.nodes]
    shuffled = ids[:]
    rng.shuffle(shuffled)
    mapping = dict(zip(ids, shuffled))
    nodes = [OpNode(mapping[n.id], n.op, dict(n.attrs)) for n in g.nodes]
    rng.shuffle(nodes)
    edges = [(mapping[a], mapping[b]) for a, b in g.edges]
    rng.shuffle(edges)
    return graph(nodes, edges, mapping[g.entry], mapping[g.exit])


def brute_force_depths(g: BlockGraph) -> dict[int, int]:
    """Longest entry-to-node path length by exhaustive DFS with memo."""
    preds = g.predecessors()
    memo: dict[int, int | None] = {}

    def longest(nid: int) -> int | None:
        if nid == g.entry:
            return 0
        if nid in memo:
            return memo[nid]
        best = None
        for p in preds[nid]:
            d = longest(p)
            if d is not None:
                best = d + 1 if best is None else max(best, d + 1)
        memo[nid] = best
        return best

    out = {}
    for node in g.nodes:
        d = longest(node.id)
        if d is not None:
            out[node.id] = d
    return out


def brute_force_fronts(pop, dominates) -> list[list[int]]:
    """Peel non-dominated fronts by direct pairwise comparison."""
    remaining = list(range(len(pop)))
    fronts: list[list[int]] = []
    while remaining:
        front = [i for i in remaining
                 if not any(dominates(pop[j], pop[i])
                            for j in remaining if j != i)]
        fronts.append(sorted(front))
        remaining = [i for i in remaining if i not in set(front)]
    return fronts
