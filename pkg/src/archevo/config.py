"""Run configuration: defaults, INI-style file loading, and hashing."""

from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field, fields, replace
from hashlib import blake2b

from .consensus import ConsensusConfig
from .explorer import ControllerConfig
from .gateway import ProviderConfig
from .selection import BidWeights


class ConfigError(ValueError):
    """The configuration file is missing, malformed, or out of range."""


@dataclass(frozen=True)
class SearchConfig:
    generations: int = 3
    candidates_per_generation: int = 5
    seed: int = 0
    elitism: bool = True
    refresh_consensus_each_generation: bool = False
    parent_sampling: str = "softmax"  # or "uniform"
    survival_kappa: float = 0.5
    log_path: str = "archevo-run.log"
    paper_file: str = ""
    base_channels: int = 16


@dataclass(frozen=True)
class EvaluatorConfig:
    kind: str = "surrogate"  # or "external"
    budget_millions: float = 1.0
    workers: int = 4
    adapter_command: str = ""
    adapter_timeout_s: float = 60.0
    budget_epochs: int = 5


@dataclass(frozen=True)
class RunConfig:
    search: SearchConfig = field(default_factory=SearchConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    consensus: ConsensusConfig = field(default_factory=ConsensusConfig)
    selection: BidWeights = field(default_factory=BidWeights)
    provider_kind: str = "mock"  # or "http"
    provider_script: str = ""    # path to a mock script; empty = built-in
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    evaluator: EvaluatorConfig = field(default_factory=EvaluatorConfig)

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["provider_kind"] = self.provider_kind
        doc["provider_script"] = self.provider_script
        return doc


def config_hash(cfg: RunConfig) -> str:
    """Digest of the full configuration; log headers carry it for resume.

    The log path is excluded: where a log lives does not change what the
    run computes, and a moved log must still resume.
    """
    doc = cfg.to_dict()
    doc["search"].pop("log_path", None)
    payload = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return blake2b(payload.encode(), digest_size=16).hexdigest()


_SECTION_TARGETS = {
    "search": SearchConfig,
    "controller": ControllerConfig,
    "consensus": ConsensusConfig,
    "selection": BidWeights,
    "evaluator": EvaluatorConfig,
}

# [selection] keys mapped onto BidWeights plus the survival fraction, which
# lives in SearchConfig so the orchestrator finds it beside the loop knobs.
_SELECTION_SEARCH_KEYS = {"survival_kappa"}

_PROVIDER_EXTRA_KEYS = {"kind", "script"}


def load_config(path: str) -> RunConfig:
    """Parse an INI-style run configuration.

    Unknown sections or keys are errors: a typo silently reverting a knob
    to its default would be worse than a refusal.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc

    cfg = RunConfig()
    for section in parser.sections():
        if section == "provider":
            cfg = _apply_provider(cfg, parser[section])
            continue
        if section not in _SECTION_TARGETS:
            raise ConfigError(f"unknown config section [{section}]")
        cfg = _apply_section(cfg, section, parser[section])
    _check_ranges(cfg)
    return cfg


def _apply_section(cfg: RunConfig, section: str, values) -> RunConfig:
    target_cls = _SECTION_TARGETS[section]
    attr = {"search": "search", "controller": "controller",
            "consensus": "consensus", "selection": "selection",
            "evaluator": "evaluator"}[section]
    current = getattr(cfg, attr)
    updates = {}
    search_updates = {}
    known = {f.name: f for f in fields(target_cls)}
    for key, raw in values.items():
        if section == "selection" and key in _SELECTION_SEARCH_KEYS:
            search_updates[key] = _convert(
                section, key, raw,
                next(f for f in fields(SearchConfig) if f.name == key))
            continue
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in section [{section}]")
        updates[key] = _convert(section, key, raw, known[key])
    cfg = replace(cfg, **{attr: replace(current, **updates)})
    if search_updates:
        cfg = replace(cfg, search=replace(cfg.search, **search_updates))
    return cfg


def _apply_provider(cfg: RunConfig, values) -> RunConfig:
    known = {f.name: f for f in fields(ProviderConfig)}
    updates = {}
    kind = cfg.provider_kind
    script = cfg.provider_script
    for key, raw in values.items():
        if key == "kind":
            if raw not in ("mock", "http"):
                raise ConfigError(f"provider kind must be mock or http, got {raw!r}")
            kind = raw
            continue
        if key == "script":
            script = raw
            continue
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in section [provider]")
        updates[key] = _convert("provider", key, raw, known[key])
    return replace(cfg, provider_kind=kind, provider_script=script,
                   provider=replace(cfg.provider, **updates))


def _convert(section: str, key: str, raw: str, field_def):
    ftype = field_def.type
    try:
        if ftype in ("int", int):
            return int(raw)
        if ftype in ("float", float):
            return float(raw)
        if ftype in ("bool", bool):
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if ftype in ("str | None",):
            return raw or None
        return raw
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def _check_ranges(cfg: RunConfig) -> None:
    s = cfg.search
    c = cfg.controller
    k = cfg.consensus
    checks = [
        (s.generations >= 1, "search.generations must be at least 1"),
        (s.candidates_per_generation >= 1,
         "search.candidates_per_generation must be at least 1"),
        (s.parent_sampling in ("softmax", "uniform"),
         "search.parent_sampling must be softmax or uniform"),
        (0.0 < s.survival_kappa <= 1.0,
         "selection.survival_kappa must be in (0, 1]"),
        (0.0 <= c.eps_min <= c.eps_max <= 1.0,
         "controller epsilon bounds need 0 <= eps_min <= eps_max <= 1"),
        (c.decay >= 0.0, "controller.decay must be non-negative"),
        (c.window >= 1, "controller.window must be at least 1"),
        (c.variance_scale > 0.0, "controller.variance_scale must be positive"),
        (1 <= k.t_min <= k.t_max, "consensus rounds need 1 <= t_min <= t_max"),
        (0.0 < k.gamma <= 1.0, "consensus.gamma must be in (0, 1]"),
        (k.credit_kappa > 0.0, "consensus.credit_kappa must be positive"),
        (k.temperature > 0.0, "consensus.temperature must be positive"),
        (cfg.selection.normalization in ("reference", "minmax"),
         "selection.normalization must be reference or minmax"),
        (cfg.evaluator.kind in ("surrogate", "external"),
         "evaluator.kind must be surrogate or external"),
        (cfg.evaluator.workers >= 1, "evaluator.workers must be at least 1"),
    ]
    if cfg.evaluator.kind == "external" and not cfg.evaluator.adapter_command:
        raise ConfigError("evaluator.adapter_command is required for kind=external")
    for ok, message in checks:
        if not ok:
            raise ConfigError(message)
