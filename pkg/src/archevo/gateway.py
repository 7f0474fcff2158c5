"""Language-model plumbing: prompt rendering, providers, and strict JSON.

Every model interaction goes through call_json, which renders a template,
sends it to a provider, extracts the first JSON object from the reply, and
validates it against a schema, retrying with the violation appended.  A
scripted mock provider stands in for the network during tests and demos.
"""

from __future__ import annotations

import json
import logging
import math
import os
import re
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from hashlib import blake2b
from string import Template
from typing import Mapping, Protocol, Sequence

import jsonschema

log = logging.getLogger(__name__)

EMBED_DIM = 256
_EMBED_KEY = b"archevo-embed-v1"


class UnboundPlaceholderError(KeyError):
    """A template placeholder had no binding at render time."""


class EmptyTextError(ValueError):
    """embed() was given no usable tokens."""


class JsonExtractionError(ValueError):
    """No parseable JSON object found in a provider reply."""


class SchemaViolationError(RuntimeError):
    """All attempts produced replies that failed extraction or validation."""

    def __init__(self, template: str, bodies: list[str]):
        super().__init__(
            f"provider never returned valid JSON for '{template}' "
            f"({len(bodies)} attempts)")
        self.template = template
        self.bodies = bodies


class TransportError(RuntimeError):
    """Network failure or timeout talking to a live provider."""


class RateLimitedError(RuntimeError):
    """Provider kept answering 429 after backoff was exhausted."""


class MockScriptError(RuntimeError):
    """A scripted queue was missing or exhausted; a test setup error."""


@dataclass(frozen=True)
class ProviderConfig:
    endpoint: str = ""
    model: str = ""
    api_key_env: str = "ARCHEVO_API_KEY"
    max_context_tokens: int = 4096
    temperature: float = 0.7
    top_p: float = 0.9
    max_response_tokens: int = 512
    retries: int = 3
    timeout_s: float = 30.0
    max_concurrency: int = 4
    audit_path: str | None = None


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system: str
    user: str


@dataclass(frozen=True)
class PromptRequest:
    """A fully rendered prompt ready for a provider."""

    template: str
    system: str
    user: str


SUBTASKS_PROMPT = PromptTemplate(
    name="subtasks",
    system=("You are a senior computer-vision architect planning a "
            "block-level design campaign."),
    user=(
        "Read the numbered literature notes below and break the design "
        "problem into independent working axes.\n"
        "\n"
        "LITERATURE (numbered sentences):\n"
        "${paper_numbered}\n"
        "\n"
        "Respond with STRICT JSON only, no prose, using exactly these keys:\n"
        '{"tasks": [main vision tasks the block must serve], '
        '"sub_tasks": [at most 4 axes that shape the block architecture], '
        '"keywords": [at most 5 operator or motif names]}'
    ),
)

EXPERT_PROMPT = PromptTemplate(
    name="expert",
    system="You are a specialist design agent for the axis: ${field}.",
    user=(
        "Propose one concrete, drop-in improvement to the current block "
        "for your axis.\n"
        "\n"
        "LITERATURE (numbered sentences):\n"
        "${paper_numbered}\n"
        "\n"
        "CURRENT INSPIRATIONS:\n"
        "${current_insp}\n"
        "\n"
        "RECENT REFLECTIONS:\n"
        "${reflections}\n"
        "\n"
        "Respond with STRICT JSON only, no prose, using exactly these keys:\n"
        '{"proposal": "one change in at most 40 words", '
        '"rationale": "why it should help, at most 40 words", '
        '"evidence_refs": [sentence numbers you relied on]}'
    ),
)

MERGE_PROMPT = PromptTemplate(
    name="merge",
    system="You chair a design committee and consolidate expert proposals.",
    user=(
        "Merge the proposals below into a deduplicated shortlist, keeping "
        "the strongest and most distinct ideas.\n"
        "\n"
        "EXPERT PROPOSALS (JSON array):\n"
        "${current_insp}\n"
        "\n"
        "Respond with STRICT JSON only, no prose, using exactly this key:\n"
        '{"inspirations": [at most 4 entries, each at most 40 words]}'
    ),
)

REFLECT_PROMPT = PromptTemplate(
    name="reflect",
    system="You keep a terse lab notebook for an architecture search.",
    user=(
        "Summarize what the recent steps below imply for the next design "
        "choice.\n"
        "\n"
        "RECENT STEPS:\n"
        "${reflections}\n"
        "\n"
        "Respond with STRICT JSON only, no prose, using exactly this key:\n"
        '{"summary": "at most 60 words"}'
    ),
)

PROMPTS: dict[str, PromptTemplate] = {
    t.name: t for t in
    (SUBTASKS_PROMPT, EXPERT_PROMPT, MERGE_PROMPT, REFLECT_PROMPT)
}

SUBTASKS_SCHEMA = {
    "type": "object",
    "required": ["tasks", "sub_tasks", "keywords"],
    "additionalProperties": False,
    "properties": {
        "tasks": {"type": "array", "items": {"type": "string"}},
        "sub_tasks": {"type": "array", "items": {"type": "string"}},
        "keywords": {"type": "array", "items": {"type": "string"}},
    },
}

EXPERT_SCHEMA = {
    "type": "object",
    "required": ["proposal", "rationale"],
    "additionalProperties": False,
    "properties": {
        "proposal": {"type": "string", "minLength": 1},
        "rationale": {"type": "string"},
        "evidence_refs": {"type": "array", "items": {"type": "integer"}},
    },
}

MERGE_SCHEMA = {
    "type": "object",
    "required": ["inspirations"],
    "additionalProperties": False,
    "properties": {
        "inspirations": {"type": "array", "items": {"type": "string"}},
    },
}

REFLECT_SCHEMA = {
    "type": "object",
    "required": ["summary"],
    "additionalProperties": False,
    "properties": {"summary": {"type": "string"}},
}

SCHEMAS: dict[str, dict] = {
    "subtasks": SUBTASKS_SCHEMA,
    "expert": EXPERT_SCHEMA,
    "merge": MERGE_SCHEMA,
    "reflect": REFLECT_SCHEMA,
}


def render(template: PromptTemplate, bindings: Mapping[str, str]) -> PromptRequest:
    """Substitute placeholders; byte-identical for identical inputs."""
    try:
        system = Template(template.system).substitute(bindings)
        user = Template(template.user).substitute(bindings)
    except KeyError as exc:
        raise UnboundPlaceholderError(
            f"template '{template.name}' placeholder {exc} has no binding"
        ) from exc
    return PromptRequest(template=template.name, system=system, user=user)


def number_sentences(text: str) -> str:
    """One numbered sentence per line, split on period plus whitespace."""
    parts = [s.strip() for s in re.split(r"(?<=\.)\s+", text.strip())
             if s.strip()]
    return "\n".join(f"{i}. {s}" for i, s in enumerate(parts, start=1))


def truncate_words(text: str, limit: int) -> str:
    """Clip to the first ``limit`` words; logs when something was dropped."""
    words = text.split()
    if len(words) <= limit:
        return text
    log.warning("truncating %d-word text to %d words", len(words), limit)
    return " ".join(words[:limit])


def extract_json(body: str) -> dict:
    """Pull the first balanced JSON object out of a possibly noisy reply.

    Tolerates surrounding prose and markdown code fences.  Raises
    JsonExtractionError when no substring parses as a JSON object.
    """
    for start, end in _balanced_spans(body):
        try:
            obj = json.loads(body[start:end])
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise JsonExtractionError("no JSON object found in the reply")


def _balanced_spans(body: str):
    for start, ch in enumerate(body):
        if ch != "{":
            continue
        depth = 0
        in_string = False
        escaped = False
        for pos in range(start, len(body)):
            c = body[pos]
            if in_string:
                if escaped:
                    escaped = False
                elif c == "\\":
                    escaped = True
                elif c == '"':
                    in_string = False
                continue
            if c == '"':
                in_string = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    yield start, pos + 1
                    break


class Provider(Protocol):
    config: ProviderConfig

    def complete(self, request: PromptRequest) -> str:
        ...


def call_json(provider: Provider, template: PromptTemplate,
              bindings: Mapping[str, str], schema: dict | None = None) -> dict:
    """Render, send, extract, and validate; retry with the violation quoted.

    Makes at most 1 + retries attempts.  When every attempt fails extraction
    or validation the SchemaViolationError carries all raw response bodies.
    Transport and rate-limit errors propagate immediately.
    """
    schema = schema if schema is not None else SCHEMAS[template.name]
    request = render(template, bindings)
    attempts = 1 + max(0, provider.config.retries)
    bodies: list[str] = []
    for _ in range(attempts):
        body = provider.complete(request)
        bodies.append(body)
        try:
            obj = extract_json(body)
        except JsonExtractionError as exc:
            violation = str(exc)
        else:
            try:
                jsonschema.validate(obj, schema)
                return obj
            except jsonschema.ValidationError as exc:
                violation = exc.message
        request = replace(request, user=(
            request.user
            + f"\n\nYour previous reply was rejected: {violation}\n"
              "Return STRICT JSON matching the required schema and nothing else."))
    raise SchemaViolationError(template.name, bodies)


class MockProvider:
    """Scripted provider: ordered response queues keyed by template name.

    Exhausting or missing a queue raises MockScriptError; scripts must be
    sized for the run they serve.  Call counts are recorded per template so
    budgets can be asserted exactly.
    """

    scripted = True

    def __init__(self, script: Mapping[str, Sequence[str]],
                 config: ProviderConfig | None = None):
        self.config = config or ProviderConfig()
        self.queues: dict[str, deque[str]] = {}
        self._script = {k: list(v) for k, v in script.items()}
        for name, entries in self._script.items():
            self.queues[name] = deque(
                e if isinstance(e, str) else json.dumps(e) for e in entries)
        self.call_counts: Counter[str] = Counter()
        self.requests: list[PromptRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: str,
                  config: ProviderConfig | None = None) -> "MockProvider":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh), config=config)

    def complete(self, request: PromptRequest) -> str:
        with self._lock:
            self.call_counts[request.template] += 1
            self.requests.append(request)
            queue = self.queues.get(request.template)
            if not queue:
                raise MockScriptError(
                    f"mock script for '{request.template}' is exhausted")
            return queue.popleft()

    def consumed(self) -> dict[str, int]:
        """How many entries each queue has released, for resume snapshots."""
        return {name: len(self._script[name]) - len(self.queues[name])
                for name in self.queues}

    def fast_forward(self, consumed: Mapping[str, int]) -> None:
        """Drop already-consumed entries when resuming a run mid-script."""
        for name, count in consumed.items():
            queue = self.queues.get(name)
            if queue is None:
                if count:
                    raise MockScriptError(f"no mock queue named '{name}'")
                continue
            if count > len(queue):
                raise MockScriptError(
                    f"mock queue '{name}' shorter than its consumed count")
            for _ in range(count):
                queue.popleft()

    def total_calls(self) -> int:
        return sum(self.call_counts.values())


class FairSemaphore:
    """Counting semaphore that wakes waiters in arrival order."""

    def __init__(self, permits: int):
        self._permits = permits
        self._lock = threading.Lock()
        self._waiters: deque[threading.Event] = deque()

    def acquire(self) -> None:
        with self._lock:
            if self._permits > 0 and not self._waiters:
                self._permits -= 1
                return
            gate = threading.Event()
            self._waiters.append(gate)
        gate.wait()

    def release(self) -> None:
        with self._lock:
            if self._waiters:
                self._waiters.popleft().set()
            else:
                self._permits += 1

    def __enter__(self) -> "FairSemaphore":
        self.acquire()
        return self

    def __exit__(self, *exc) -> None:
        self.release()


class HttpProvider:
    """Chat-completions client over HTTP with backoff and an audit trail.

    The API key is read from the environment at call time and never written
    to the audit log.
    """

    scripted = False

    def __init__(self, config: ProviderConfig, session=None):
        if not config.endpoint:
            raise ValueError("HttpProvider requires an endpoint")
        self.config = config
        if session is None:
            import requests
            session = requests.Session()
        self._session = session
        self._gate = FairSemaphore(config.max_concurrency)
        self._audit_lock = threading.Lock()

    def complete(self, request: PromptRequest) -> str:
        import requests
        payload = {
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
            "max_tokens": self.config.max_response_tokens,
        }
        headers = {}
        key = os.environ.get(self.config.api_key_env, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        with self._gate:
            backoff = 1.0
            for attempt in range(1 + max(0, self.config.retries)):
                try:
                    response = self._session.post(
                        self.config.endpoint, json=payload, headers=headers,
                        timeout=self.config.timeout_s)
                except requests.RequestException as exc:
                    raise TransportError(str(exc)) from exc
                if response.status_code == 429:
                    time.sleep(backoff)
                    backoff *= 2
                    continue
                if response.status_code >= 400:
                    raise TransportError(
                        f"provider returned HTTP {response.status_code}")
                try:
                    content = response.json()["choices"][0]["message"]["content"]
                except (KeyError, IndexError, ValueError) as exc:
                    raise TransportError(
                        f"malformed provider response: {exc}") from exc
                self._audit(request, content)
                return content
        raise RateLimitedError("provider kept rate-limiting after backoff")

    def _audit(self, request: PromptRequest, response: str) -> None:
        if not self.config.audit_path:
            return
        record = {
            "template": request.template,
            "endpoint": self.config.endpoint,
            "model": self.config.model,
            "system": request.system,
            "user": request.user,
            "response": response,
        }
        with self._audit_lock:
            with open(self.config.audit_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record) + "\n")


def embed(text: str, dim: int = EMBED_DIM) -> tuple[float, ...]:
    """Deterministic unit vector for a text: hashed token counts.

    Tokens are lowercased alphanumeric runs; each token's count lands in a
    bin chosen by a keyed hash, and the vector is L2-normalized.  Identical
    texts always embed identically.  Raises EmptyTextError when no token
    survives tokenization.
    """
    tokens = re.findall(r"[a-z0-9]+", text.lower())
    if not tokens:
        raise EmptyTextError("cannot embed text with no tokens")
    vec = [0.0] * dim
    for token, count in Counter(tokens).items():
        digest = blake2b(token.encode(), digest_size=8, key=_EMBED_KEY).digest()
        vec[int.from_bytes(digest, "big") % dim] += float(count)
    norm = math.sqrt(sum(v * v for v in vec))
    return tuple(v / norm for v in vec)


def cosine_distance(a: Sequence[float], b: Sequence[float]) -> float:
    """1 minus the cosine of two unit vectors."""
    return 1.0 - sum(x * y for x, y in zip(a, b))
