"""Evolutionary design of neural block architectures, steered by a
multi-expert consensus over literature and a reflective exploration
controller, with Pareto-based survivor selection."""

from .config import ConfigError, RunConfig, config_hash, load_config
from .consensus import (
    ConsensusError,
    Inspiration,
    InspirationPool,
    run_consensus,
)
from .diversity import structural_diversity
from .evaluator import EvaluationResult, surrogate_evaluate
from .explorer import ControllerConfig, ReflectionRecord, choose_action, epsilon
from .gateway import HttpProvider, MockProvider, ProviderConfig
from .graph import (
    BlockGraph,
    OpNode,
    canonical_hash,
    parse,
    resnet_basic_block,
    serialize,
    validate,
)
from .orchestrator import (
    Candidate,
    RunResult,
    best_candidate,
    resume,
    run,
    success_metrics,
)
from .reporting import write_report
from .runlog import read_records
from .selection import BidWeights, ObjectiveVector, score_population
from .transforms import TEMPLATES, apply_transform

__version__ = "0.1.0"

__all__ = [
    "BidWeights",
    "BlockGraph",
    "Candidate",
    "ConfigError",
    "ConsensusError",
    "ControllerConfig",
    "EvaluationResult",
    "HttpProvider",
    "Inspiration",
    "InspirationPool",
    "MockProvider",
    "ObjectiveVector",
    "OpNode",
    "ProviderConfig",
    "ReflectionRecord",
    "RunConfig",
    "RunResult",
    "TEMPLATES",
    "apply_transform",
    "best_candidate",
    "canonical_hash",
    "choose_action",
    "config_hash",
    "epsilon",
    "load_config",
    "parse",
    "read_records",
    "resnet_basic_block",
    "resume",
    "run",
    "run_consensus",
    "score_population",
    "serialize",
    "structural_diversity",
    "success_metrics",
    "surrogate_evaluate",
    "validate",
    "write_report",
]
