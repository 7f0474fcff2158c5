"""Graph rewrite templates: how a textual design cue becomes a block edit.

Each template pairs an anchor pattern (which node or edge to rewrite) with a
declarative edit script.  Channel counts inside inserted chains are written
relative to the channel count C observed at the anchor, so one template
applies across block widths.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .graph import (
    BlockGraph,
    OpNode,
    ValidationReport,
    canonicalize,
    resolved_channels,
    topological_order,
    validate,
)


class NoMatchError(ValueError):
    """The template's anchor pattern does not occur in the graph."""


class InvalidResultError(ValueError):
    """The rewritten graph failed validation; carries the report."""

    def __init__(self, template: str, report: ValidationReport):
        super().__init__(
            f"template '{template}' produced an invalid graph: "
            + "; ".join(v.message for v in report.violations))
        self.template = template
        self.report = report


@dataclass(frozen=True)
class NodeSpec:
    """Blueprint for one inserted node; attr values may reference C.

    An attr value is either an int literal or a string expression of the
    forms "C", "k*C", or "C//k".
    """

    op: str
    attrs: dict[str, int | str] = field(default_factory=dict)

    def materialize(self, node_id: int, c: int) -> OpNode:
        return OpNode(node_id, self.op,
                      {k: _resolve_attr(v, c) for k, v in self.attrs.items()})


def _resolve_attr(value: int | str, c: int) -> int:
    if isinstance(value, int):
        return value
    if value == "C":
        return c
    m = re.fullmatch(r"(\d+)\*C", value)
    if m:
        return int(m.group(1)) * c
    m = re.fullmatch(r"C//(\d+)", value)
    if m:
        return max(1, c // int(m.group(1)))
    raise ValueError(f"unsupported attr expression: {value!r}")


@dataclass(frozen=True)
class Anchor:
    """Where a template applies.

    kind "op": the (occurrence+1)-th node with the given op in topological
    order.  kind "skip_edge": an edge from the entry node into an add node.
    """

    kind: str
    op: str = ""
    occurrence: int = 0


@dataclass(frozen=True)
class EditStep:
    """One rewrite action applied at the anchor.

    action is one of:
      replace        anchor node replaced by the chain
      insert_after   chain spliced between anchor and its successors
      insert_before  chain spliced between the anchor's predecessors and it
      branch_into    new chain from the entry node joining the anchor's inputs
      splice_edge    chain inserted along the anchored edge
      set_attrs      attrs merged into the anchor node
    """

    action: str
    chain: tuple[NodeSpec, ...] = ()
    attrs: dict[str, int | str] = field(default_factory=dict)


@dataclass(frozen=True)
class TransformTemplate:
    name: str
    summary: str
    anchor: Anchor
    steps: tuple[EditStep, ...]


def _dw(kernel: int | str = 3) -> NodeSpec:
    return NodeSpec("dwconv", {"in_channels": "C", "out_channels": "C",
                               "kernel": kernel, "groups": "C"})


def _pw(cin: int | str = "C", cout: int | str = "C") -> NodeSpec:
    return NodeSpec("pwconv", {"in_channels": cin, "out_channels": cout})


TEMPLATES: dict[str, TransformTemplate] = {t.name: t for t in (
    TransformTemplate(
        name="dw_ffn",
        summary="replace the second conv with a depthwise-then-pointwise pair",
        anchor=Anchor("op", "conv", occurrence=1),
        steps=(EditStep("replace", chain=(_dw(3), _pw())),),
    ),
    TransformTemplate(
        name="pre_norm",
        summary="normalize before the first conv",
        anchor=Anchor("op", "conv", occurrence=0),
        steps=(EditStep("insert_before", chain=(NodeSpec("bn"),)),),
    ),
    TransformTemplate(
        name="cross_scale_fusion",
        summary="extra 1x1 projection branch merged into the residual join",
        anchor=Anchor("op", "add", occurrence=0),
        steps=(EditStep("branch_into", chain=(_pw(),)),),
    ),
    TransformTemplate(
        name="anti_alias_dilation",
        summary="dilate the second conv instead of striding",
        anchor=Anchor("op", "conv", occurrence=1),
        steps=(EditStep("set_attrs", attrs={"dilation": 2}),),
    ),
    TransformTemplate(
        name="mbconv_expand",
        summary="wide depthwise conv with a 4x pointwise expansion",
        anchor=Anchor("op", "conv", occurrence=1),
        steps=(EditStep("replace", chain=(_dw(7), _pw("C", "4*C"), _pw("4*C", "C"))),),
    ),
    TransformTemplate(
        name="se_insert",
        summary="squeeze-excitation gate after the second conv",
        anchor=Anchor("op", "conv", occurrence=1),
        steps=(EditStep("insert_after",
                        chain=(NodeSpec("se", {"in_channels": "C",
                                               "out_channels": "C"}),)),),
    ),
    TransformTemplate(
        name="gating",
        summary="smooth gate on the joined output",
        anchor=Anchor("op", "add", occurrence=0),
        steps=(EditStep("insert_after", chain=(NodeSpec("gelu"),)),),
    ),
    TransformTemplate(
        name="routing_head",
        summary="light 1x1 routing head on the output path",
        anchor=Anchor("op", "add", occurrence=0),
        steps=(EditStep("insert_after", chain=(_pw(),)),),
    ),
    TransformTemplate(
        name="rmsnorm_swap",
        summary="extra normalization after the residual join",
        anchor=Anchor("op", "add", occurrence=0),
        steps=(EditStep("insert_after", chain=(NodeSpec("bn"),)),),
    ),
    TransformTemplate(
        name="wide_dw_kernel",
        summary="replace the second conv with a 5x5 depthwise pair",
        anchor=Anchor("op", "conv", occurrence=1),
        steps=(EditStep("replace", chain=(_dw(5), _pw())),),
    ),
    TransformTemplate(
        name="residual_scaling",
        summary="learnable projection on the skip connection",
        anchor=Anchor("skip_edge"),
        steps=(EditStep("splice_edge", chain=(_pw(),)),),
    ),
    TransformTemplate(
        name="identity",
        summary="keep the block unchanged",
        anchor=Anchor("op", "input", occurrence=0),
        steps=(),
    ),
)}


def template_names() -> tuple[str, ...]:
    return tuple(TEMPLATES)


def bind_template(text: str) -> str | None:
    """Map free text to a registry template name, or None.

    A leading "name:" prefix wins; otherwise the first registry name appearing
    as a word in the lowercased text.
    """
    lowered = text.strip().lower()
    head = lowered.split(":", 1)[0].strip()
    if head in TEMPLATES:
        return head
    for name in TEMPLATES:
        if re.search(rf"\b{re.escape(name)}\b", lowered):
            return name
    return None


def _find_op_anchor(g: BlockGraph, anchor: Anchor) -> int:
    order = topological_order(g)
    node_map = g.node_map()
    hits = [nid for nid in order if node_map[nid].op == anchor.op]
    if len(hits) <= anchor.occurrence:
        raise NoMatchError(
            f"no {anchor.op} occurrence {anchor.occurrence} in graph")
    return hits[anchor.occurrence]


def _find_skip_edge(g: BlockGraph) -> tuple[int, int]:
    node_map = g.node_map()
    for src, dst in sorted(g.edges):
        if src == g.entry and node_map[dst].op == "add":
            return (src, dst)
    raise NoMatchError("no skip edge from the entry into an add node")


def _channels_at(g: BlockGraph, nid: int) -> int:
    c = resolved_channels(g).get(nid)
    if c is None:
        raise NoMatchError(f"channel count at node {nid} is not derivable")
    return c


def apply_transform(parent: BlockGraph, template: TransformTemplate) -> BlockGraph:
    """Apply one template and return the validated child graph.

    The parent is never modified.  Raises NoMatchError when the anchor is
    absent and InvalidResultError when the rewrite breaks a validation rule.
    """
    g = parent
    for step in _expanded_steps(template):
        g = _apply_step(g, template, step)
    g = canonicalize(g)
    report = validate(g)
    if not report.ok:
        raise InvalidResultError(template.name, report)
    return g


def _expanded_steps(template: TransformTemplate):
    if not template.steps:  # identity: anchor lookup still runs, edits do not
        yield EditStep("noop")
        return
    yield from template.steps


def _apply_step(g: BlockGraph, template: TransformTemplate,
                step: EditStep) -> BlockGraph:
    next_id = max((n.id for n in g.nodes), default=-1) + 1
    if step.action == "noop":
        _find_op_anchor(g, template.anchor)
        return g
    if template.anchor.kind == "skip_edge":
        src, dst = _find_skip_edge(g)
        if step.action != "splice_edge":
            raise ValueError(f"{step.action} needs an op anchor")
        c = _channels_at(g, dst)
        new_nodes = [spec.materialize(next_id + i, c)
                     for i, spec in enumerate(step.chain)]
        edges = [e for e in g.edges if e != (src, dst)]
        path = [src] + [n.id for n in new_nodes] + [dst]
        edges.extend(zip(path, path[1:]))
        return BlockGraph(g.nodes + tuple(new_nodes), tuple(edges),
                          g.entry, g.exit)

    at = _find_op_anchor(g, template.anchor)
    if step.action == "set_attrs":
        c = _channels_at(g, at)
        node_map = g.node_map()
        target = node_map[at]
        merged = dict(target.attrs)
        merged.update({k: _resolve_attr(v, c) for k, v in step.attrs.items()})
        nodes = tuple(OpNode(n.id, n.op, merged) if n.id == at else n
                      for n in g.nodes)
        return BlockGraph(nodes, g.edges, g.entry, g.exit)

    c = _channels_at(g, at)
    new_nodes = [spec.materialize(next_id + i, c)
                 for i, spec in enumerate(step.chain)]
    head, tail = new_nodes[0].id, new_nodes[-1].id
    if step.action == "replace":
        nodes = tuple(n for n in g.nodes if n.id != at) + tuple(new_nodes)
        edges = []
        for src, dst in g.edges:
            if dst == at:
                edges.append((src, head))
            elif src == at:
                edges.append((tail, dst))
            else:
                edges.append((src, dst))
    elif step.action == "insert_after":
        nodes = g.nodes + tuple(new_nodes)
        edges = []
        for src, dst in g.edges:
            if src == at:
                edges.append((tail, dst))
            else:
                edges.append((src, dst))
        edges.append((at, head))
    elif step.action == "insert_before":
        nodes = g.nodes + tuple(new_nodes)
        edges = []
        for src, dst in g.edges:
            if dst == at:
                edges.append((src, head))
            else:
                edges.append((src, dst))
        edges.append((tail, at))
    elif step.action == "branch_into":
        nodes = g.nodes + tuple(new_nodes)
        edges = list(g.edges) + [(g.entry, head), (tail, at)]
    else:
        raise ValueError(f"unknown edit action: {step.action}")
    chain_edges = [(a.id, b.id) for a, b in zip(new_nodes, new_nodes[1:])]
    return BlockGraph(tuple(nodes), tuple(edges) + tuple(chain_edges),
                      g.entry, g.exit)
