"""Variance-driven explore/exploit control over design inspirations.

The controller keeps an append-only reflection memory of (inspiration,
reward) outcomes.  When recent rewards disagree, the exploration rate decays
toward its floor; when they flatten out, it climbs back toward its ceiling,
following an exponential schedule in the reward variance.
"""

from __future__ import annotations

import logging
import math
import statistics
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

from .gateway import (
    EXPERT_PROMPT,
    EXPERT_SCHEMA,
    REFLECT_PROMPT,
    REFLECT_SCHEMA,
    EmptyTextError,
    Provider,
    RateLimitedError,
    SchemaViolationError,
    TransportError,
    call_json,
    truncate_words,
)

if TYPE_CHECKING:  # imported lazily at runtime to avoid a module cycle
    from .consensus import Inspiration

log = logging.getLogger(__name__)

PROPOSAL_WORD_LIMIT = 40
SUMMARY_WORD_LIMIT = 60
STATE_SUMMARY_LIMIT = 10


class EmptyPoolError(ValueError):
    """choose_action needs at least one candidate inspiration."""


@dataclass(frozen=True)
class ControllerConfig:
    """Exploration schedule parameters.

    The schedule is eps_min + (eps_max - eps_min) * exp(-decay * v), where v
    is the variance of recent rewards multiplied by variance_scale.  Rewards
    are accuracy fractions, so their raw variances sit around 1e-4; without
    the scale the schedule would be pinned at eps_max.
    """

    eps_min: float = 0.05
    eps_max: float = 0.5
    decay: float = 3.0
    window: int = 5
    variance_scale: float = 1000.0


@dataclass(frozen=True)
class ReflectionRecord:
    """One remembered outcome: which inspiration earned which reward."""

    step: int
    inspiration_id: str
    reward: float
    summary: str


@dataclass(frozen=True)
class ReflectiveState:
    """Rolling context fed into reflect-conditioned prompts."""

    summaries: tuple[str, ...] = ()
    recent_rewards: tuple[float, ...] = ()
    generation: int = 0
    parent_id: str = ""


@dataclass(frozen=True)
class Choice:
    """Outcome of one explore/exploit decision."""

    inspiration: "Inspiration"
    mode: str  # "explore" or "exploit"
    epsilon: float
    variance: float
    fallback: bool = False


def reward_variance(memory: Sequence[ReflectionRecord], window: int) -> float:
    """Population variance of the last ``window`` recorded rewards.

    Fewer than two records in the window means no spread: returns 0.0.
    """
    rewards = [r.reward for r in memory[-window:]] if window > 0 else []
    if len(rewards) < 2:
        return 0.0
    return statistics.pvariance(rewards)


def epsilon(variance: float, cfg: ControllerConfig) -> float:
    """Exploration rate for a given (already scaled) reward variance.

    Exactly eps_max at zero variance, decaying exponentially toward eps_min
    as the variance grows; always inside [eps_min, eps_max].
    """
    if variance <= 0.0:
        return cfg.eps_max
    decayed = cfg.eps_min + (cfg.eps_max - cfg.eps_min) * math.exp(-cfg.decay * variance)
    # min + span can overshoot max by an ulp; keep the bound exact
    return min(decayed, cfg.eps_max)


def scaled_variance(memory: Sequence[ReflectionRecord],
                    cfg: ControllerConfig) -> float:
    """Reward variance over the window, premultiplied by variance_scale."""
    return cfg.variance_scale * reward_variance(memory, cfg.window)


def q_value(inspiration_id: str, memory: Sequence[ReflectionRecord]) -> float:
    """Mean reward of records matching the inspiration; 0.0 when unseen."""
    rewards = [r.reward for r in memory if r.inspiration_id == inspiration_id]
    if not rewards:
        return 0.0
    return sum(rewards) / len(rewards)


def record(memory: list[ReflectionRecord], inspiration_id: str, reward: float,
           summary: str) -> ReflectionRecord:
    """Append an outcome to the memory; step indices stay dense and ordered."""
    rec = ReflectionRecord(step=len(memory), inspiration_id=inspiration_id,
                           reward=reward, summary=summary)
    memory.append(rec)
    return rec


def exploit_choice(candidates: Sequence["Inspiration"],
                   memory: Sequence[ReflectionRecord]) -> "Inspiration":
    """Highest mean-reward candidate; ties prefer utility, then id order.

    The result does not depend on the candidate list's ordering.
    """
    if not candidates:
        raise EmptyPoolError("no candidate inspirations to exploit")
    return min(candidates,
               key=lambda c: (-q_value(c.id, memory), -c.utility, c.id))


def _best_utility(candidates: Sequence["Inspiration"]) -> "Inspiration":
    return min(candidates, key=lambda c: (-c.utility, c.id))


def choose_action(state: ReflectiveState, candidates: Sequence["Inspiration"],
                  memory: Sequence[ReflectionRecord], cfg: ControllerConfig,
                  rng_draw: float, provider: Provider | None = None) -> Choice:
    """Pick the next inspiration by the epsilon-greedy policy.

    With probability epsilon (explore) the provider is asked for a fresh
    reflect-conditioned proposal; otherwise (exploit) the best remembered
    candidate wins.  Provider failure on the explore branch falls back to
    exploit; a provider reply that validates but cannot become an
    inspiration falls back to the highest-utility candidate.  Both
    fallbacks are flagged on the returned Choice.
    """
    if not candidates:
        raise EmptyPoolError("no candidate inspirations to choose from")
    variance = scaled_variance(memory, cfg)
    eps = epsilon(variance, cfg)
    if rng_draw < eps and provider is not None:
        try:
            proposed = _explore(state, candidates, provider)
        except (SchemaViolationError, TransportError, RateLimitedError) as exc:
            log.warning("explore call failed (%s); falling back to exploit", exc)
            return Choice(exploit_choice(candidates, memory), "exploit",
                          eps, variance, fallback=True)
        if proposed is None:
            return Choice(_best_utility(candidates), "explore",
                          eps, variance, fallback=True)
        for known in candidates:
            if known.id == proposed.id:
                return Choice(known, "explore", eps, variance)
        return Choice(proposed, "explore", eps, variance)
    if rng_draw < eps and provider is None:
        return Choice(exploit_choice(candidates, memory), "exploit",
                      eps, variance, fallback=True)
    return Choice(exploit_choice(candidates, memory), "exploit", eps, variance)


def _explore(state: ReflectiveState, candidates: Sequence["Inspiration"],
             provider: Provider) -> "Inspiration | None":
    from .consensus import make_inspiration  # avoids a module cycle

    current = "\n".join(f"- {c.text}" for c in candidates) or "(none)"
    reflections = "\n".join(state.summaries[-STATE_SUMMARY_LIMIT:]) or "(none)"
    reply = call_json(provider, EXPERT_PROMPT, {
        "field": "reflective design exploration",
        "paper_numbered": "(none)",
        "current_insp": current,
        "reflections": reflections,
    }, EXPERT_SCHEMA)
    try:
        return make_inspiration(
            reply["proposal"],
            origin_axis="reflective",
            origin_round=state.generation,
            evidence_refs=reply.get("evidence_refs", ()),
        )
    except EmptyTextError:
        log.warning("explore proposal had no usable text; using pool fallback")
        return None


def reflect_summary(step: int, outcome_label: str | None, reward: float,
                    provider: Provider | None = None) -> str:
    """Short natural-language note about the latest step.

    Scripted and absent providers get the deterministic template; a live
    provider may rewrite it, with the template as the failure fallback.
    """
    if outcome_label is None:
        return f"step {step}: initialization"
    templated = f"step {step}: {outcome_label} → Δacc {reward:+.4f}"
    if provider is None or getattr(provider, "scripted", False):
        return templated
    try:
        reply = call_json(provider, REFLECT_PROMPT,
                          {"reflections": templated}, REFLECT_SCHEMA)
        return truncate_words(reply["summary"], SUMMARY_WORD_LIMIT)
    except (SchemaViolationError, TransportError, RateLimitedError):
        return templated
