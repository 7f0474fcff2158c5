"""Computation-block graphs: the search space every other module operates on.

A block is a small directed acyclic graph of tensor operations with a single
``input`` entry and a single ``output`` exit.  Graphs are immutable after
construction; every rewrite produces a new graph.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Iterable, Mapping

OP_VOCABULARY = frozenset({
    "input", "output", "conv", "dwconv", "pwconv", "bn", "relu", "gelu",
    "add", "concat", "se", "linear", "pool", "identity",
})

# Ops that carry attrs.  Everything else must have an empty attr dict.
PARAMETERIZED_OPS = frozenset({"conv", "dwconv", "pwconv", "linear", "se", "pool"})

# Single-stream compute ops: in-degree exactly 1.
UNARY_OPS = frozenset({
    "conv", "dwconv", "pwconv", "bn", "relu", "gelu", "se", "linear",
    "pool", "identity",
})

# Ops whose output channel count equals their single input's.
_PASSTHROUGH_OPS = frozenset({"bn", "relu", "gelu", "identity"})

_REQUIRED_ATTRS = {
    "conv": ("in_channels", "out_channels", "kernel"),
    "dwconv": ("in_channels", "out_channels", "kernel", "groups"),
    "pwconv": ("in_channels", "out_channels"),
    "linear": ("in_channels", "out_channels"),
    "se": ("in_channels", "out_channels"),
    "pool": ("kernel",),
}

_OPTIONAL_ATTRS = {
    "conv": ("stride", "groups", "dilation"),
    "dwconv": ("stride", "dilation"),
    "pwconv": ("stride",),
    "linear": (),
    "se": (),
    "pool": ("stride",),
}

# Rule codes reported by validate().
GRAPH_NOT_DAG = "GRAPH_NOT_DAG"
NODE_UNUSED = "NODE_UNUSED"
MULTI_INPUT_UNARY = "MULTI_INPUT_UNARY"
CHANNEL_MISMATCH = "CHANNEL_MISMATCH"
UNKNOWN_OP = "UNKNOWN_OP"
MISSING_INPUT = "MISSING_INPUT"
MULTIPLE_INPUTS = "MULTIPLE_INPUTS"
MISSING_OUTPUT = "MISSING_OUTPUT"
MULTIPLE_OUTPUTS = "MULTIPLE_OUTPUTS"
BAD_ENTRY_EXIT = "BAD_ENTRY_EXIT"
DUPLICATE_NODE_ID = "DUPLICATE_NODE_ID"
EDGE_UNKNOWN_NODE = "EDGE_UNKNOWN_NODE"
SELF_LOOP = "SELF_LOOP"
DUPLICATE_EDGE = "DUPLICATE_EDGE"
INPUT_ARITY = "INPUT_ARITY"
OUTPUT_ARITY = "OUTPUT_ARITY"
ADD_ARITY = "ADD_ARITY"
CONCAT_ARITY = "CONCAT_ARITY"
ATTR_MISSING = "ATTR_MISSING"
ATTR_UNKNOWN = "ATTR_UNKNOWN"
ATTR_FORBIDDEN = "ATTR_FORBIDDEN"
ATTR_VALUE = "ATTR_VALUE"
DWCONV_GROUPS = "DWCONV_GROUPS"
GRAPH_DISCONNECTED = "GRAPH_DISCONNECTED"


class GraphCycleError(ValueError):
    """Raised when an operation requiring a DAG meets a cycle."""


class GraphParseError(ValueError):
    """Raised when a serialized graph document cannot be decoded."""


@dataclass(frozen=True, eq=True)
class OpNode:
    """One operation in a block graph.

    attrs holds integer hyperparameters (channels, kernel, ...) and must be
    non-empty exactly for parameterized ops.
    """

    id: int
    op: str
    attrs: Mapping[str, int] = field(default_factory=dict)

    __hash__ = None  # attrs is a dict; nodes are compared, never hashed


@dataclass(frozen=True, eq=True)
class BlockGraph:
    """Immutable DAG of OpNodes with designated entry and exit node ids."""

    nodes: tuple[OpNode, ...]
    edges: tuple[tuple[int, int], ...]
    entry: int
    exit: int

    __hash__ = None

    def node_map(self) -> dict[int, OpNode]:
        return {n.id: n for n in self.nodes}

    def predecessors(self) -> dict[int, list[int]]:
        # edges naming a missing node carry no adjacency; validate() flags them
        preds: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for src, dst in self.edges:
            if dst in preds and src in preds:
                preds[dst].append(src)
        return preds

    def successors(self) -> dict[int, list[int]]:
        succs: dict[int, list[int]] = {n.id: [] for n in self.nodes}
        for src, dst in self.edges:
            if src in succs and dst in succs:
                succs[src].append(dst)
        return succs


@dataclass(frozen=True)
class Violation:
    """A single failed validation rule.  node is None for graph-level rules."""

    rule: str
    message: str
    node: int | None = None


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[Violation, ...]

    def rules(self) -> set[str]:
        return {v.rule for v in self.violations}


def graph(nodes: Iterable[OpNode], edges: Iterable[tuple[int, int]],
          entry: int, exit: int) -> BlockGraph:
    """Convenience constructor accepting any iterables."""
    return BlockGraph(tuple(nodes), tuple(tuple(e) for e in edges), entry, exit)


def chain(ops: list[tuple[str, Mapping[str, int]]]) -> BlockGraph:
    """Build input -> op_1 -> ... -> op_k -> output with ids 0..k+1."""
    nodes = [OpNode(0, "input")]
    for i, (op, attrs) in enumerate(ops, start=1):
        nodes.append(OpNode(i, op, dict(attrs)))
    nodes.append(OpNode(len(ops) + 1, "output"))
    edges = [(i, i + 1) for i in range(len(ops) + 1)]
    return graph(nodes, edges, 0, len(ops) + 1)


def resnet_basic_block(channels: int = 16) -> BlockGraph:
    """Two 3x3 convs with batch norm, ReLU, and a residual add."""
    c = channels
    conv_attrs = {"in_channels": c, "out_channels": c, "kernel": 3}
    nodes = (
        OpNode(0, "input"),
        OpNode(1, "conv", dict(conv_attrs)),
        OpNode(2, "bn"),
        OpNode(3, "relu"),
        OpNode(4, "conv", dict(conv_attrs)),
        OpNode(5, "bn"),
        OpNode(6, "add"),
        OpNode(7, "relu"),
        OpNode(8, "output"),
    )
    edges = ((0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (0, 6), (6, 7), (7, 8))
    return BlockGraph(nodes, edges, entry=0, exit=8)


def topological_order(g: BlockGraph) -> list[int]:
    """Kahn's algorithm; ties broken by ascending node id.

    Raises GraphCycleError if the edge set contains a cycle.
    """
    preds = g.predecessors()
    indeg = {nid: len(ps) for nid, ps in preds.items()}
    succs = g.successors()
    ready = sorted(nid for nid, d in indeg.items() if d == 0)
    order: list[int] = []
    while ready:
        nid = ready.pop(0)
        order.append(nid)
        inserted = False
        for nxt in succs[nid]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                ready.append(nxt)
                inserted = True
        if inserted:
            ready.sort()
    if len(order) != len(g.nodes):
        raise GraphCycleError("graph contains a cycle")
    return order


def topological_depths(g: BlockGraph) -> dict[int, int]:
    """Longest-path depth from the entry node for every reachable node.

    depth(entry) == 0; depth(v) == 1 + max over predecessors on any
    entry-to-v path.  Nodes unreachable from the entry are omitted.
    """
    order = topological_order(g)
    preds = g.predecessors()
    depths: dict[int, int] = {}
    for nid in order:
        if nid == g.entry:
            depths[nid] = 0
            continue
        best = None
        for p in preds[nid]:
            if p in depths:
                d = depths[p] + 1
                best = d if best is None else max(best, d)
        if best is not None:
            depths[nid] = best
    return depths


def op_histogram(g: BlockGraph) -> Counter:
    """Multiset of interior op labels; input/output sentinels excluded."""
    return Counter(n.op for n in g.nodes if n.op not in ("input", "output"))


def _resolve_channels(g: BlockGraph) -> tuple[dict[int, int | None], list[Violation]]:
    """Infer per-node output channel counts by constraint propagation.

    Declared channel attrs are constants; pass-through and add nodes equate
    their class with their predecessors'; concat sums once all inputs are
    known.  Conflicting constants yield CHANNEL_MISMATCH violations.
    """
    node_map = g.node_map()
    preds = g.predecessors()
    parent = {nid: nid for nid in node_map}
    value: dict[int, int] = {}
    violations: list[Violation] = []

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    def set_const(nid: int, c: int, at: int) -> None:
        r = find(nid)
        have = value.get(r)
        if have is None:
            value[r] = c
        elif have != c:
            violations.append(Violation(
                CHANNEL_MISMATCH,
                f"node {at}: channel count {c} conflicts with {have}",
                node=at))

    def union(a: int, b: int, at: int) -> None:
        ra, rb = find(a), find(b)
        if ra == rb:
            return
        va, vb = value.get(ra), value.get(rb)
        parent[ra] = rb
        if va is not None and vb is not None and va != vb:
            violations.append(Violation(
                CHANNEL_MISMATCH,
                f"node {at}: channel count {va} conflicts with {vb}",
                node=at))
        elif vb is None and va is not None:
            value[rb] = va

    for node in g.nodes:
        a = node.attrs
        if "out_channels" in a:
            set_const(node.id, a["out_channels"], node.id)
        if node.op in _PASSTHROUGH_OPS or (node.op == "pool" and "out_channels" not in a):
            for p in preds[node.id]:
                union(node.id, p, node.id)
        elif node.op == "add":
            for p in preds[node.id]:
                union(node.id, p, node.id)
    for src, dst in g.edges:
        if dst not in node_map or src not in node_map:
            continue
        want = node_map[dst].attrs.get("in_channels")
        if want is not None:
            set_const(src, want, dst)

    # Concat outputs become known only after every input does; iterate to a
    # fixpoint (bounded by node count).
    concats = [n for n in g.nodes if n.op == "concat"]
    for _ in range(len(concats) + 1):
        progressed = False
        for node in concats:
            if value.get(find(node.id)) is not None:
                continue
            ins = [value.get(find(p)) for p in preds[node.id]]
            if ins and all(c is not None for c in ins):
                set_const(node.id, sum(ins), node.id)
                progressed = True
        if not progressed:
            break

    resolved = {nid: value.get(find(nid)) for nid in node_map}
    return resolved, violations


def resolved_channels(g: BlockGraph) -> dict[int, int | None]:
    """Output channel count per node where derivable, else None."""
    return _resolve_channels(g)[0]


def validate(g: BlockGraph) -> ValidationReport:
    """Check every structural rule and return the full violation list.

    Violations are data: callers decide whether to raise.  Rules cover node
    identity, vocabulary, attrs, entry/exit uniqueness, acyclicity, arity,
    reachability, and channel consistency.
    """
    violations: list[Violation] = []
    seen_ids: set[int] = set()
    for node in g.nodes:
        if node.id in seen_ids:
            violations.append(Violation(
                DUPLICATE_NODE_ID, f"node id {node.id} appears more than once",
                node=node.id))
        seen_ids.add(node.id)
    node_map = g.node_map()

    seen_edges: set[tuple[int, int]] = set()
    for src, dst in g.edges:
        if src not in node_map or dst not in node_map:
            violations.append(Violation(
                EDGE_UNKNOWN_NODE, f"edge ({src}, {dst}) references a missing node"))
            continue
        if src == dst:
            violations.append(Violation(
                SELF_LOOP, f"node {src} feeds itself", node=src))
        if (src, dst) in seen_edges:
            violations.append(Violation(
                DUPLICATE_EDGE, f"edge ({src}, {dst}) is repeated"))
        seen_edges.add((src, dst))

    for node in g.nodes:
        if node.op not in OP_VOCABULARY:
            violations.append(Violation(
                UNKNOWN_OP, f"node {node.id}: undefined computation '{node.op}'",
                node=node.id))
            continue
        violations.extend(_check_attrs(node))

    inputs = [n for n in g.nodes if n.op == "input"]
    outputs = [n for n in g.nodes if n.op == "output"]
    if not inputs:
        violations.append(Violation(MISSING_INPUT, "no input node"))
    elif len(inputs) > 1:
        violations.append(Violation(
            MULTIPLE_INPUTS, "input must be the only entry node",
            node=inputs[1].id))
    if not outputs:
        violations.append(Violation(MISSING_OUTPUT, "no output node"))
    elif len(outputs) > 1:
        violations.append(Violation(
            MULTIPLE_OUTPUTS, "output must be the only output node",
            node=outputs[1].id))
    if inputs and (g.entry not in node_map or node_map[g.entry].op != "input"):
        violations.append(Violation(
            BAD_ENTRY_EXIT, f"entry {g.entry} is not the input node"))
    if outputs and (g.exit not in node_map or node_map[g.exit].op != "output"):
        violations.append(Violation(
            BAD_ENTRY_EXIT, f"exit {g.exit} is not the output node"))

    acyclic = True
    try:
        topological_order(g)
    except GraphCycleError:
        acyclic = False
        violations.append(Violation(
            GRAPH_NOT_DAG,
            "the computation graph of the block is not a directed acyclic graph"))

    preds = g.predecessors()
    succs = g.successors()
    for node in g.nodes:
        indeg = len(preds[node.id])
        outdeg = len(succs[node.id])
        if node.op == "input" and indeg > 0:
            violations.append(Violation(
                INPUT_ARITY, f"node {node.id}: input cannot have predecessors",
                node=node.id))
        elif node.op == "output" and node.id in node_map:
            if outdeg > 0:
                violations.append(Violation(
                    OUTPUT_ARITY, f"node {node.id}: output cannot have successors",
                    node=node.id))
            if indeg > 1:
                violations.append(Violation(
                    OUTPUT_ARITY, f"node {node.id}: output receives more than one input",
                    node=node.id))
        elif node.op in UNARY_OPS and indeg > 1:
            violations.append(Violation(
                MULTI_INPUT_UNARY,
                f"node {node.id}: {node.op} operation can receive only one input",
                node=node.id))
        elif node.op == "add" and indeg < 2:
            violations.append(Violation(
                ADD_ARITY, f"node {node.id}: add needs at least two inputs",
                node=node.id))
        elif node.op == "concat" and indeg < 2:
            violations.append(Violation(
                CONCAT_ARITY, f"node {node.id}: concat needs at least two inputs",
                node=node.id))

    if acyclic and inputs and outputs:
        on_path = _nodes_on_entry_exit_paths(g)
        if g.exit not in on_path:
            violations.append(Violation(
                GRAPH_DISCONNECTED, "no path from input to output"))
        for node in g.nodes:
            if node.op in ("input", "output"):
                continue
            if node.id not in on_path:
                violations.append(Violation(
                    NODE_UNUSED, f"node {node.id}: the node is not used",
                    node=node.id))

    violations.extend(_resolve_channels(g)[1])
    return ValidationReport(ok=not violations, violations=tuple(violations))


def _check_attrs(node: OpNode) -> list[Violation]:
    out: list[Violation] = []
    if node.op not in PARAMETERIZED_OPS:
        if node.attrs:
            out.append(Violation(
                ATTR_FORBIDDEN, f"node {node.id}: {node.op} takes no attrs",
                node=node.id))
        return out
    required = _REQUIRED_ATTRS[node.op]
    allowed = set(required) | set(_OPTIONAL_ATTRS[node.op])
    for key in required:
        if key not in node.attrs:
            if node.op == "dwconv" and key == "groups":
                out.append(Violation(
                    DWCONV_GROUPS,
                    f"node {node.id}: dwconv groups must equal in_channels",
                    node=node.id))
            else:
                out.append(Violation(
                    ATTR_MISSING, f"node {node.id}: {node.op} requires '{key}'",
                    node=node.id))
    for key, val in node.attrs.items():
        if key not in allowed:
            out.append(Violation(
                ATTR_UNKNOWN, f"node {node.id}: unexpected attr '{key}'",
                node=node.id))
        elif not isinstance(val, int) or val < 1:
            out.append(Violation(
                ATTR_VALUE, f"node {node.id}: attr '{key}' must be a positive integer",
                node=node.id))
    if node.op == "dwconv":
        groups = node.attrs.get("groups")
        cin = node.attrs.get("in_channels")
        if groups is not None and cin is not None and groups != cin:
            out.append(Violation(
                DWCONV_GROUPS,
                f"node {node.id}: dwconv groups must equal in_channels",
                node=node.id))
    return out


def _nodes_on_entry_exit_paths(g: BlockGraph) -> set[int]:
    succs = g.successors()
    preds = g.predecessors()
    fwd = _reach(g.entry, succs)
    bwd = _reach(g.exit, preds)
    return fwd & bwd


def _reach(start: int, adjacency: dict[int, list[int]]) -> set[int]:
    if start not in adjacency:
        return set()
    seen = {start}
    queue = deque([start])
    while queue:
        nid = queue.popleft()
        for nxt in adjacency[nid]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return seen


def canonicalize(g: BlockGraph) -> BlockGraph:
    """Same graph with nodes sorted by id and edges sorted lexicographically."""
    nodes = tuple(sorted(g.nodes, key=lambda n: n.id))
    edges = tuple(sorted(g.edges))
    return BlockGraph(nodes, edges, g.entry, g.exit)


def to_dict(g: BlockGraph) -> dict:
    c = canonicalize(g)
    nodes = []
    for n in c.nodes:
        entry: dict = {"id": n.id, "op": n.op}
        if n.attrs:
            entry["attrs"] = {k: n.attrs[k] for k in sorted(n.attrs)}
        nodes.append(entry)
    return {
        "nodes": nodes,
        "edges": [list(e) for e in c.edges],
        "entry": c.entry,
        "exit": c.exit,
    }


def serialize(g: BlockGraph) -> str:
    """Canonical JSON document; parse(serialize(g)) == canonicalize(g)."""
    return json.dumps(to_dict(g), indent=2) + "\n"


def from_dict(doc: dict) -> BlockGraph:
    try:
        nodes = tuple(
            OpNode(int(n["id"]), str(n["op"]),
                   {str(k): v for k, v in n.get("attrs", {}).items()})
            for n in doc["nodes"])
        edges = tuple((int(s), int(d)) for s, d in doc["edges"])
        return BlockGraph(nodes, edges, int(doc["entry"]), int(doc["exit"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphParseError(f"malformed graph document: {exc}") from exc


def parse(text: str) -> BlockGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GraphParseError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise GraphParseError("graph document must be a JSON object")
    return from_dict(doc)


def _structural_signatures(g: BlockGraph, rounds: int | None = None) -> dict[int, str]:
    """Node signatures stable under id relabeling.

    Seeded with (op, attrs, entry/exit role, degrees) and refined by hashing
    sorted predecessor and successor signature multisets; enough rounds to
    separate every non-automorphic pair in graphs of this size.
    """
    preds = g.predecessors()
    succs = g.successors()
    sig: dict[int, str] = {}
    for n in g.nodes:
        seed = json.dumps([
            n.op, sorted(n.attrs.items()), n.id == g.entry, n.id == g.exit,
            len(preds[n.id]), len(succs[n.id]),
        ])
        sig[n.id] = hashlib.blake2b(seed.encode(), digest_size=16).hexdigest()
    n_rounds = rounds if rounds is not None else len(g.nodes) + 2
    for _ in range(n_rounds):
        nxt = {}
        for n in g.nodes:
            payload = json.dumps([
                sig[n.id],
                sorted(sig[p] for p in preds[n.id]),
                sorted(sig[s] for s in succs[n.id]),
            ])
            nxt[n.id] = hashlib.blake2b(payload.encode(), digest_size=16).hexdigest()
        sig = nxt
    return sig


def canonical_hash(g: BlockGraph) -> str:
    """Digest invariant under node-id relabeling.

    Nodes are renumbered by structural signature before hashing, so any two
    isomorphic graphs produce the same digest.
    """
    sig = _structural_signatures(g)
    order = sorted(g.nodes, key=lambda n: sig[n.id])
    relabel = {n.id: i for i, n in enumerate(order)}
    doc = to_dict(BlockGraph(
        tuple(OpNode(relabel[n.id], n.op, dict(n.attrs)) for n in g.nodes),
        tuple((relabel[s], relabel[d]) for s, d in g.edges),
        relabel[g.entry], relabel[g.exit],
    ))
    payload = json.dumps(doc, separators=(",", ":"), sort_keys=True)
    return hashlib.blake2b(payload.encode(), digest_size=16).hexdigest()
