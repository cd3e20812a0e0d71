"""Retrieval-grounded generation: context assembly and generation backends."""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np
import requests

from .embedders import EmbedderConfig, Query
from .encoder import FrozenEncoder
from .errors import (
    BackendRejected,
    BackendUnavailable,
    ConfigError,
    EmptyQuery,
    GenerationTimeout,
    PipelineError,
    UniRagError,
)
from .pipeline import Pipeline
from .promptbank import PromptBank
from .vecindex import EvidenceSet, QueryCache, VectorIndex

log = logging.getLogger(__name__)

SECTION_MARKERS = ("PROMPT:", "EVIDENCE:", "QUERY:")
INDENT = "  "
DEFAULT_BUDGET = 4000

ENV_ENDPOINT = "UNIRAG_LLM_ENDPOINT"
ENV_MODEL = "UNIRAG_LLM_MODEL"
ENV_API_KEY = "UNIRAG_LLM_API_KEY"


@dataclass(frozen=True)
class SystemPrompt:
    text: str
    id: str = "stem-educator"
    version: str = "1"

    def __post_init__(self):
        if not self.text.strip():
            raise ConfigError("system prompt is empty")


DEFAULT_SYSTEM_PROMPT = SystemPrompt(
    "You are a professional STEM educator. Answer the student's query using the "
    "numbered evidence items, cite them by rank, and say so when the evidence "
    "does not cover the question."
)


@dataclass(frozen=True)
class GenerationContext:
    prompt_section: str
    evidence_section: tuple[str, ...]
    query_section: str
    rendered: str
    evidence: EvidenceSet
    degraded: bool


@dataclass(frozen=True)
class GenerationResult:
    text: str
    backend: str
    attempts: int
    latency_ms: float
    prompt_chars: int
    completion_chars: int


def _indent(text: str) -> str:
    return "\n".join(INDENT + line for line in text.splitlines() or [""])


def _one_line(text: str) -> str:
    return " ".join(text.split())


def render_evidence_line(rank: int, item, score: float) -> str:
    return f"[{rank}] (score={score:.4f}, style={item.style}, id={item.id}) {_one_line(item.content)}"


def query_text(q: Query) -> str:
    if isinstance(q.payload, bytes):
        try:
            return q.payload.decode("utf-8")
        except UnicodeDecodeError:
            return f"<{len(q.payload)}-byte {q.style} payload>"
    return q.payload


def build_context(system_prompt: SystemPrompt, ev: EvidenceSet, q: Query, budget: int = DEFAULT_BUDGET) -> GenerationContext:
    """Render ``PROMPT:``, ``EVIDENCE:`` and ``QUERY:`` blocks.

    Section bodies are indented, so the three markers are the only lines that
    start in column 0. Evidence lines are kept whole, best rank first, while
    their total length (with newlines) fits in ``budget`` characters.
    """
    qtext = query_text(q)
    if not qtext.strip():
        raise EmptyQuery("query text is empty")
    lines, kept, used = [], [], 0
    for rank, (item, score) in enumerate(ev.items, start=1):
        line = render_evidence_line(rank, item, score)
        if used + len(line) + 1 > budget:
            break
        used += len(line) + 1
        lines.append(line)
        kept.append((item, score))
    rendered = "\n".join(
        [
            "PROMPT:",
            _indent(system_prompt.text),
            "EVIDENCE:",
            *(INDENT + line for line in lines),
            "QUERY:",
            _indent(qtext),
        ]
    ) + "\n"
    return GenerationContext(
        system_prompt.text,
        tuple(lines),
        qtext,
        rendered,
        EvidenceSet(tuple(kept), ev.k),
        degraded=not kept,
    )


# -- backends ----------------------------------------------------------------------


class EchoBackend:
    """Offline stub: the response is the rendered context itself."""

    id = "echo"

    def complete(self, ctx: GenerationContext) -> str:
        return ctx.rendered


class StubBackend(EchoBackend):
    """Echo stub that raises a transient error on its first ``fail_times`` calls."""

    def __init__(self, fail_times: int = 0, error: type[UniRagError] = BackendUnavailable):
        self.fail_times = fail_times
        self.error = error
        self.calls = 0
        self.id = "stub"

    def complete(self, ctx: GenerationContext) -> str:
        self.calls += 1
        if self.calls <= self.fail_times:
            raise self.error(f"scripted failure {self.calls}/{self.fail_times}")
        return ctx.rendered


class ChatCompletionsBackend:
    """Client for the chat-completions JSON wire format."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str = "",
        timeout: float = 30.0,
        temperature: float = 0.0,
        max_in_flight: int = 4,
        session: requests.Session | None = None,
    ):
        if not endpoint:
            raise ConfigError(f"no chat-completions endpoint; set {ENV_ENDPOINT}")
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.temperature = temperature
        self.session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.id = f"chat:{model}"

    @classmethod
    def from_env(cls, env=None, **kwargs) -> "ChatCompletionsBackend":
        env = os.environ if env is None else env
        endpoint = env.get(ENV_ENDPOINT, "")
        if not endpoint:
            raise ConfigError(f"live backend needs {ENV_ENDPOINT} (and usually {ENV_MODEL}, {ENV_API_KEY})")
        return cls(endpoint, env.get(ENV_MODEL, "qwen3-0.6b"), env.get(ENV_API_KEY, ""), **kwargs)

    def request_body(self, ctx: GenerationContext) -> dict:
        return {
            "model": self.model,
            "messages": [
                {"role": "system", "content": ctx.prompt_section},
                {"role": "user", "content": ctx.rendered},
            ],
            "temperature": self.temperature,
        }

    def complete(self, ctx: GenerationContext) -> str:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            with self._slots:
                resp = self.session.post(self.endpoint, json=self.request_body(ctx), headers=headers, timeout=self.timeout)
        except requests.Timeout as e:
            raise GenerationTimeout(f"no response within {self.timeout}s") from e
        except requests.RequestException as e:
            raise BackendUnavailable(str(e)) from e
        if resp.status_code == 429 or resp.status_code >= 500:
            raise BackendUnavailable(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise BackendRejected(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            text = resp.json()["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise BackendRejected(f"malformed completion response: {e}") from e
        if text is None:
            raise BackendRejected("completion has no content")
        return text


TRANSIENT = (BackendUnavailable, GenerationTimeout)


def generate(ctx: GenerationContext, backend, retries: int = 3, backoff: float = 0.5, sleep=time.sleep) -> GenerationResult:
    """Call the backend, retrying transient failures with exponential backoff."""
    t0 = time.perf_counter()
    delay = backoff
    attempt = 0
    while True:
        attempt += 1
        try:
            text = backend.complete(ctx)
            break
        except TRANSIENT as e:
            if attempt > retries:
                raise
            log.warning("backend %s failed (%s); retry %d/%d in %.2fs", backend.id, e, attempt, retries, delay)
            sleep(delay)
            delay *= 2
    return GenerationResult(
        text,
        backend.id,
        attempt,
        1000.0 * (time.perf_counter() - t0),
        len(ctx.rendered),
        len(text),
    )


# -- pipeline ----------------------------------------------------------------------


@dataclass
class AnswerConfig:
    k: int = 5
    budget: int = DEFAULT_BUDGET
    retries: int = 3
    backoff: float = 0.5
    sleep: object = field(default=time.sleep, repr=False)


def answer(
    q: Query,
    index: VectorIndex,
    bank: PromptBank,
    encoder: FrozenEncoder,
    embedder: EmbedderConfig,
    system_prompt: SystemPrompt = DEFAULT_SYSTEM_PROMPT,
    k: int = 5,
    backend=None,
    cache: QueryCache | None = None,
    cfg: AnswerConfig | None = None,
) -> tuple[GenerationResult, EvidenceSet]:
    """Embed, condition on adapted prompts, retrieve top-k, build the context
    and generate. Returns the answer and the evidence actually shown to the
    backend; failures come back as :class:`PipelineError` tagged by stage."""
    cfg = cfg or AnswerConfig(k=k)
    backend = backend or EchoBackend()
    pipe = Pipeline(embedder, bank, encoder, cache)

    def stage(name, fn, *args):
        try:
            return fn(*args)
        except UniRagError as e:
            raise PipelineError(name, e) from e

    E, content = stage("embed", pipe.prepare, [q])
    X, prefix, *_ = stage("bank", pipe.assemble, E, content)
    feat = stage("encode", lambda: encoder.forward(X, prefix, encoder.cfg.insertion)[0])
    ev = stage("retrieval", index.top_k, feat, k)
    ctx = stage("context", build_context, system_prompt, ev, q, cfg.budget)
    result = stage("generation", generate, ctx, backend, cfg.retries, cfg.backoff, cfg.sleep)
    return result, ctx.evidence


def query_feature(q: Query, bank: PromptBank, encoder: FrozenEncoder, embedder: EmbedderConfig, cache=None) -> np.ndarray:
    return Pipeline(embedder, bank, encoder, cache).feature(q)
