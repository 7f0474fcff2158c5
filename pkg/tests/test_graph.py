from __future__ import annotations

import json
import random

import pytest
from hypothesis import given, strategies as st

from archevo.graph import (
    ADD_ARITY,
    ATTR_MISSING,
    ATTR_VALUE,
    CHANNEL_MISMATCH,
    DUPLICATE_EDGE,
    DUPLICATE_NODE_ID,
    DWCONV_GROUPS,
    EDGE_UNKNOWN_NODE,
    GRAPH_NOT_DAG,
    MULTI_INPUT_UNARY,
    MULTIPLE_OUTPUTS,
    NODE_UNUSED,
    SELF_LOOP,
    UNKNOWN_OP,
    BlockGraph,
    GraphParseError,
    OpNode,
    canonical_hash,
    canonicalize,
    chain,
    from_dict,
    graph,
    op_histogram,
    parse,
    resnet_basic_block,
    resolved_channels,
    serialize,
    to_dict,
    topological_depths,
    topological_order,
    validate,
)
from util import brute_force_depths, make_random_graph, permute_ids


def test_base_block_shape():
    g = resnet_basic_block()
    assert len(g.nodes) == 9
    assert validate(g).ok
    assert op_histogram(g) == {"conv": 2, "bn": 2, "relu": 2, "add": 1}


def test_topological_order_respects_edges():
    rng = random.Random(11)
    for _ in range(50):
        g = make_random_graph(rng)
        order = topological_order(g)
        pos = {nid: i for i, nid in enumerate(order)}
        assert sorted(order) == sorted(n.id for n in g.nodes)
        for a, b in g.edges:
            assert pos[a] < pos[b]


def test_depths_match_brute_force():
    rng = random.Random(23)
    for _ in range(100):
        g = make_random_graph(rng)
        assert topological_depths(g) == brute_force_depths(g)


def test_base_block_depths():
    # The residual join sits after the main path: depth via the long branch.
    depths = topological_depths(resnet_basic_block())
    assert depths[0] == 0
    assert depths[6] == 6  # add: 1 longer than the second bn
    assert depths[8] == 8


def _two_node_graph():
    return [OpNode(0, "input"), OpNode(1, "relu"), OpNode(2, "output")]


def test_cycle_reported():
    nodes = _two_node_graph() + [OpNode(3, "gelu")]
    g = graph(nodes, [(0, 1), (1, 3), (3, 1), (1, 2)], 0, 2)
    report = validate(g)
    assert not report.ok
    assert GRAPH_NOT_DAG in report.rules()


def test_unused_node_reported():
    nodes = _two_node_graph() + [OpNode(3, "gelu")]
    g = graph(nodes, [(0, 1), (1, 2), (0, 3)], 0, 2)
    report = validate(g)
    assert NODE_UNUSED in report.rules()
    bad = [v for v in report.violations if v.rule == NODE_UNUSED]
    assert bad[0].node == 3
    assert "not used" in bad[0].message


def test_multi_input_unary_reported():
    nodes = [OpNode(0, "input"), OpNode(1, "relu"), OpNode(2, "gelu"),
             OpNode(3, "output")]
    g = graph(nodes, [(0, 1), (0, 2), (1, 2), (2, 3)], 0, 3)
    report = validate(g)
    assert MULTI_INPUT_UNARY in report.rules()


def test_channel_mismatch_reported():
    nodes = [
        OpNode(0, "input"),
        OpNode(1, "conv", {"in_channels": 16, "out_channels": 32, "kernel": 3}),
        OpNode(2, "conv", {"in_channels": 16, "out_channels": 16, "kernel": 3}),
        OpNode(3, "output"),
    ]
    g = graph(nodes, [(0, 1), (1, 2), (2, 3)], 0, 3)
    report = validate(g)
    assert CHANNEL_MISMATCH in report.rules()


def test_multiple_outputs_reported():
    nodes = _two_node_graph() + [OpNode(3, "output")]
    g = graph(nodes, [(0, 1), (1, 2), (1, 3)], 0, 2)
    report = validate(g)
    assert MULTIPLE_OUTPUTS in report.rules()


def test_unknown_op_reported():
    nodes = [OpNode(0, "input"), OpNode(1, "swizzle"), OpNode(2, "output")]
    g = graph(nodes, [(0, 1), (1, 2)], 0, 2)
    report = validate(g)
    assert UNKNOWN_OP in report.rules()
    assert "undefined computation 'swizzle'" in str(
        [v.message for v in report.violations])


def test_structural_rules():
    dup = graph([OpNode(0, "input"), OpNode(0, "relu"), OpNode(2, "output")],
                [(0, 2)], 0, 2)
    assert DUPLICATE_NODE_ID in validate(dup).rules()

    ghost = graph(_two_node_graph(), [(0, 1), (1, 2), (1, 9)], 0, 2)
    assert EDGE_UNKNOWN_NODE in validate(ghost).rules()

    loop = graph(_two_node_graph(), [(0, 1), (1, 1), (1, 2)], 0, 2)
    assert SELF_LOOP in validate(loop).rules()

    doubled = graph(_two_node_graph(), [(0, 1), (0, 1), (1, 2)], 0, 2)
    assert DUPLICATE_EDGE in validate(doubled).rules()


def test_arity_and_attr_rules():
    one_in_add = graph(
        [OpNode(0, "input"), OpNode(1, "add"), OpNode(2, "output")],
        [(0, 1), (1, 2)], 0, 2)
    assert ADD_ARITY in validate(one_in_add).rules()

    bare_conv = graph(
        [OpNode(0, "input"), OpNode(1, "conv", {"in_channels": 16}),
         OpNode(2, "output")],
        [(0, 1), (1, 2)], 0, 2)
    assert ATTR_MISSING in validate(bare_conv).rules()

    zero_kernel = graph(
        [OpNode(0, "input"),
         OpNode(1, "conv", {"in_channels": 16, "out_channels": 16, "kernel": 0}),
         OpNode(2, "output")],
        [(0, 1), (1, 2)], 0, 2)
    assert ATTR_VALUE in validate(zero_kernel).rules()

    bad_groups = graph(
        [OpNode(0, "input"),
         OpNode(1, "dwconv", {"in_channels": 16, "out_channels": 16,
                              "kernel": 3, "groups": 4}),
         OpNode(2, "output")],
        [(0, 1), (1, 2)], 0, 2)
    assert DWCONV_GROUPS in validate(bad_groups).rules()


def test_channel_resolution_through_concat():
    nodes = [
        OpNode(0, "input"),
        OpNode(1, "pwconv", {"in_channels": 16, "out_channels": 8}),
        OpNode(2, "pwconv", {"in_channels": 16, "out_channels": 8}),
        OpNode(3, "concat"),
        OpNode(4, "relu"),
        OpNode(5, "output"),
    ]
    g = graph(nodes, [(0, 1), (0, 2), (1, 3), (2, 3), (3, 4), (4, 5)], 0, 5)
    assert validate(g).ok
    channels = resolved_channels(g)
    assert channels[3] == 16
    assert channels[4] == 16


def test_serialize_round_trip():
    rng = random.Random(5)
    for _ in range(50):
        g = canonicalize(make_random_graph(rng))
        text = serialize(g)
        assert text.endswith("\n")
        assert parse(text) == g
    assert serialize(g) == serialize(parse(serialize(g)))


def test_serialize_omits_empty_attrs():
    doc = json.loads(serialize(resnet_basic_block()))
    by_id = {n["id"]: n for n in doc["nodes"]}
    assert "attrs" not in by_id[0]
    assert by_id[1]["attrs"] == {"in_channels": 16, "out_channels": 16,
                                 "kernel": 3}


@pytest.mark.parametrize("text", [
    "not json",
    "[1, 2]",
    '{"nodes": []}',
    '{"nodes": [{"id": 0}], "edges": [], "entry": 0, "exit": 0}',
])
def test_parse_rejects_malformed(text):
    with pytest.raises(GraphParseError):
        parse(text)


@given(st.lists(st.sampled_from(["relu", "gelu", "bn", "identity"]),
                min_size=1, max_size=8))
def test_dict_round_trip(ops):
    g = chain([(op, {}) for op in ops])
    assert from_dict(to_dict(g)) == g


def test_canonical_hash_isomorphism_invariant():
    rng = random.Random(99)
    for _ in range(100):
        g = make_random_graph(rng)
        assert canonical_hash(permute_ids(g, rng)) == canonical_hash(g)


def test_canonical_hash_separates_structures():
    base = resnet_basic_block()
    variant = chain([("conv", {"in_channels": 16, "out_channels": 16,
                               "kernel": 3})])
    assert canonical_hash(base) != canonical_hash(variant)
    # attribute changes count as structure
    wider = resnet_basic_block(channels=32)
    assert canonical_hash(base) != canonical_hash(wider)


def test_graphs_are_hashable_never():
    g = resnet_basic_block()
    with pytest.raises(TypeError):
        hash(g)
    with pytest.raises(TypeError):
        {g}
