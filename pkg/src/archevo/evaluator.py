"""Candidate evaluation: a deterministic tabular surrogate plus an external
trainer adapter.

The surrogate is a pure function of the graph's relabeling-invariant digest
and the seed, so isomorphic graphs always score identically and reruns are
bit-identical.  The adapter shells out to a user-supplied command that trains
the block for real and writes a small JSON result file.
"""

from __future__ import annotations

import json
import math
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from hashlib import blake2b
from pathlib import Path
from typing import Sequence

from .graph import (
    BlockGraph,
    ValidationReport,
    canonical_hash,
    resolved_channels,
    serialize,
    validate,
)

CONV_FAMILY = ("conv", "dwconv", "pwconv")

# Surrogate landscape: base score, motif bonuses, and noise amplitude.
BASE_ACC = 0.70
DW_CHAIN_BONUS = 0.025
RESIDUAL_BONUS = 0.01
MAX_RESIDUAL_CREDITS = 2
OVER_BUDGET_PENALTY = 0.03
NOISE_AMPLITUDE = 0.01
CONF_MARGIN = 0.05
TRACE_PROFILE = (0.62, 0.78, 0.88, 0.96, 1.0)

NODE_LATENCY_MS = 0.1
CONV_LATENCY_MS = 0.5
_SPATIAL_POSITIONS = 32 * 32


class InvalidGraphError(ValueError):
    """Evaluation refused: the graph fails validation; carries the report."""

    def __init__(self, report: ValidationReport):
        super().__init__("cannot evaluate an invalid graph: "
                         + "; ".join(v.message for v in report.violations))
        self.report = report


class AdapterTimeoutError(RuntimeError):
    """External trainer exceeded its wall-clock budget."""


class AdapterCrashError(RuntimeError):
    """External trainer exited nonzero; carries its stderr tail."""


class MalformedResultError(RuntimeError):
    """External trainer's result file is missing keys or badly typed."""


@dataclass(frozen=True)
class EvaluationResult:
    acc: float
    params_millions: float
    gflops: float
    latency_ms: float
    conf: float
    trace: tuple[float, ...]


@dataclass(frozen=True)
class AdapterConfig:
    """How to invoke an external trainer.

    command is the executable plus fixed leading arguments; the graph file,
    result path, seed, and epoch budget are appended per call.
    """

    command: tuple[str, ...]
    timeout_s: float = 60.0
    seed: int = 0
    budget_epochs: int = 5

    @classmethod
    def from_string(cls, command: str, **kwargs) -> "AdapterConfig":
        return cls(command=tuple(shlex.split(command)), **kwargs)


def confidence(matrix: Sequence[Sequence[float]]) -> float:
    """Mean over rows of the row maximum of a probability matrix.

    Every row must sum to 1 within 1e-6.
    """
    if not matrix:
        raise ValueError("confidence of an empty prediction matrix")
    total = 0.0
    for i, row in enumerate(matrix):
        if not row:
            raise ValueError(f"row {i} is empty")
        s = sum(row)
        if abs(s - 1.0) > 1e-6:
            raise ValueError(f"row {i} sums to {s}, not 1")
        total += max(row)
    return total / len(matrix)


def node_params(op: str, attrs, channels: int | None) -> int:
    """Learnable parameter count of one node.

    conv-family ops count C_in * C_out * k^2 / groups, linear counts
    C_in * C_out, bn counts 2 * C (using the resolved channel count), and
    everything else is parameter-free.  Unresolvable bn channels count 0.
    """
    if op == "conv" or op == "dwconv":
        k = attrs["kernel"]
        groups = attrs.get("groups", 1)
        return attrs["in_channels"] * attrs["out_channels"] * k * k // groups
    if op == "pwconv" or op == "linear":
        return attrs["in_channels"] * attrs["out_channels"]
    if op == "bn":
        return 2 * channels if channels else 0
    return 0


def params_count(g: BlockGraph) -> int:
    """Exact learnable parameter total of a block."""
    channels = resolved_channels(g)
    return sum(node_params(n.op, n.attrs, channels.get(n.id)) for n in g.nodes)


def latency_estimate(g: BlockGraph) -> float:
    """Crude per-node latency model in milliseconds."""
    conv_nodes = sum(1 for n in g.nodes if n.op in CONV_FAMILY)
    return NODE_LATENCY_MS * len(g.nodes) + CONV_LATENCY_MS * conv_nodes


def flops_estimate(g: BlockGraph) -> float:
    """Rough GFLOPs assuming a 32x32 feature map for spatial ops."""
    channels = resolved_channels(g)
    flops = 0.0
    for n in g.nodes:
        p = node_params(n.op, n.attrs, channels.get(n.id))
        if n.op in CONV_FAMILY or n.op == "bn":
            flops += 2.0 * p * _SPATIAL_POSITIONS
        elif n.op == "linear":
            flops += 2.0 * p
    return flops / 1e9


def _hash_unit(tag: str, graph_digest: str, seed: int) -> float:
    """Deterministic float in [0, 1) keyed by (graph, seed, tag)."""
    payload = f"{graph_digest}:{seed}:{tag}".encode()
    digest = blake2b(payload, digest_size=8).digest()
    return int.from_bytes(digest, "big") / 2 ** 64


def surrogate_evaluate(g: BlockGraph, seed: int,
                       budget_millions: float = 1.0) -> EvaluationResult:
    """Tabular stand-in for training: structure-keyed scores with hash noise.

    Accuracy starts at a base level, earns bonuses for a depthwise-then-
    pointwise edge and for residual adds (capped), pays a penalty above the
    parameter budget, and takes +/- 1 point of hash noise.  A pure function
    of (relabeling-invariant graph digest, seed): isomorphic graphs under
    any node renumbering receive identical results.
    """
    report = validate(g)
    if not report.ok:
        raise InvalidGraphError(report)
    digest = canonical_hash(g)
    node_map = g.node_map()
    dw_chain = any(node_map[s].op == "dwconv" and node_map[d].op == "pwconv"
                   for s, d in g.edges)
    adds = sum(1 for n in g.nodes if n.op == "add")
    params = params_count(g)
    params_m = params / 1e6
    acc = BASE_ACC
    if dw_chain:
        acc += DW_CHAIN_BONUS
    acc += RESIDUAL_BONUS * min(adds, MAX_RESIDUAL_CREDITS)
    if params_m > budget_millions:
        acc -= OVER_BUDGET_PENALTY
    acc += (2.0 * _hash_unit("acc", digest, seed) - 1.0) * NOISE_AMPLITUDE
    trace = []
    for i, frac in enumerate(TRACE_PROFILE[:-1]):
        wiggle = (2.0 * _hash_unit(f"trace{i}", digest, seed) - 1.0) * 0.002
        trace.append(max(0.0, acc * frac + wiggle))
    trace.append(acc)
    return EvaluationResult(
        acc=acc,
        params_millions=params_m,
        gflops=flops_estimate(g),
        latency_ms=latency_estimate(g),
        conf=min(1.0, max(0.0, acc + CONF_MARGIN)),
        trace=tuple(trace),
    )


def external_evaluate(g: BlockGraph, adapter: AdapterConfig) -> EvaluationResult:
    """Run an external trainer on the graph and parse its result file.

    Contract: the command is invoked as
        <command...> --graph <path> --out <path> --seed <int> --budget-epochs <int>
    and must write JSON with keys acc, params_millions, gflops, latency_ms,
    conf (numbers) and trace (non-empty list of numbers).
    """
    report = validate(g)
    if not report.ok:
        raise InvalidGraphError(report)
    with tempfile.TemporaryDirectory(prefix="archevo-adapter-") as tmp:
        graph_path = Path(tmp) / "graph.json"
        out_path = Path(tmp) / "result.json"
        graph_path.write_text(serialize(g), encoding="utf-8")
        cmd = list(adapter.command) + [
            "--graph", str(graph_path),
            "--out", str(out_path),
            "--seed", str(adapter.seed),
            "--budget-epochs", str(adapter.budget_epochs),
        ]
        try:
            proc = subprocess.run(cmd, capture_output=True, text=True,
                                  timeout=adapter.timeout_s)
        except subprocess.TimeoutExpired as exc:
            raise AdapterTimeoutError(
                f"adapter exceeded {adapter.timeout_s}s") from exc
        except OSError as exc:
            raise AdapterCrashError(f"adapter could not start: {exc}") from exc
        if proc.returncode != 0:
            tail = (proc.stderr or "").strip()[-2000:]
            raise AdapterCrashError(
                f"adapter exited {proc.returncode}: {tail}")
        try:
            doc = json.loads(out_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise MalformedResultError(f"unreadable result file: {exc}") from exc
        return _parse_result(doc)


def _parse_result(doc) -> EvaluationResult:
    if not isinstance(doc, dict):
        raise MalformedResultError("result file must hold a JSON object")
    try:
        trace = doc["trace"]
        if (not isinstance(trace, list) or not trace
                or not all(isinstance(x, (int, float)) and math.isfinite(x)
                           for x in trace)):
            raise MalformedResultError(
                "trace must be a non-empty list of finite numbers")
        values = {}
        for key in ("acc", "params_millions", "gflops", "latency_ms", "conf"):
            value = doc[key]
            if not isinstance(value, (int, float)) or not math.isfinite(value):
                raise MalformedResultError(f"{key} must be a finite number")
            values[key] = float(value)
    except KeyError as exc:
        raise MalformedResultError(f"result file missing key {exc}") from exc
    return EvaluationResult(trace=tuple(float(x) for x in trace), **values)
