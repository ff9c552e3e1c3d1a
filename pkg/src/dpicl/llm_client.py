"""Prompt templates, an OpenAI-compatible chat client, and offline mock models."""

import json
import logging
import os
import random
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import httpx

from dpicl.errors import ClientError, InvalidParameterError, MockParseError, TransportError
from dpicl.mechanisms import METRIC_TOKENIZER, tokenize

logger = logging.getLogger(__name__)

API_KEY_ENV = "DPICL_API_KEY"

CLASSIFY_INSTRUCTION = "Instruction: Classify each article into one of the following categories separated by comma: "
ARTICLE = "Article: "
CLASS_SEP = ", Class:"
READ_TEXT = "Read the text: "
QUESTION = "Answer the question with at most 4 words: "
ANSWER = "Do not provide a Yes/No answer:"
KEYWORDS = "Using the following keywords, answer the question concisely: "


def _clean(value):
    """Collapse a slot value onto one line."""
    return " ".join(str(value).splitlines()).strip() if value is not None else ""


def render_classification_prompt(classes, demos, query):
    """Few-shot classification prompt; ``demos`` are ``(text, label)`` pairs."""
    if not classes:
        raise InvalidParameterError("class list must not be empty")
    lines = [CLASSIFY_INSTRUCTION + ", ".join(_clean(c) for c in classes) + "."]
    for text, label in demos:
        lines.append(f"{ARTICLE}{_clean(text)}{CLASS_SEP} {_clean(label)}")
    lines.append(f"{ARTICLE}{_clean(query)}{CLASS_SEP}")
    return "\n".join(lines)


def _qa_block(text, question, answer=None):
    last = ANSWER if answer is None else f"{ANSWER} {_clean(answer)}"
    return f"{READ_TEXT}{_clean(text)}\n{QUESTION}{_clean(question)}\n{last}"


def render_qa_prompt(demos, query):
    """Few-shot QA prompt; ``demos`` are ``(text, question, answer)`` and ``query`` is ``(text, question)``."""
    text, question = query
    if not _clean(text) and not _clean(question):
        raise InvalidParameterError("query must have text or a question")
    blocks = [_qa_block(*d) for d in demos]
    blocks.append(_qa_block(text, question))
    return "\n\n".join(blocks)


def render_keyword_followup_prompt(keywords, query):
    """Zero-shot QA prompt preceded by the privately released keywords."""
    head = KEYWORDS + ", ".join(_clean(k) for k in keywords) + "."
    return head + "\n" + render_qa_prompt([], query)


def extract_answer(response):
    """First line of the response, trimmed."""
    lines = (response or "").strip().splitlines()
    return lines[0].strip() if lines else ""


def extract_label(response, classes):
    """Longest class name that prefixes the response (case-insensitive), else None."""
    text = (response or "").strip().lower()
    best = None
    for c in classes:
        if text.startswith(c.lower()) and (best is None or len(c) > len(best)):
            best = c
    return best


@dataclass(frozen=True)
class ChatRequest:
    prompt: str
    model: str = "default"
    temperature: float = 0.0
    max_tokens: int = 32
    query_id: Optional[str] = None
    shard: Optional[int] = None

    def __post_init__(self):
        if not self.prompt:
            raise InvalidParameterError("prompt must not be empty")
        if self.temperature < 0:
            raise InvalidParameterError("temperature must be >= 0")

    def payload(self):
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": self.prompt}],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        }


@dataclass(frozen=True)
class ChatResponse:
    text: str
    latency: float = 0.0
    attempt_count: int = 1


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str = "http://localhost:8000"
    model: str = "default"
    api_key_env: str = API_KEY_ENV
    timeout: float = 60.0
    max_attempts: int = 5
    backoff_base: float = 1.0
    backoff_factor: float = 2.0
    max_tokens: int = 32
    trace_path: Optional[str] = None


RETRYABLE_STATUS = frozenset({429})


class ChatClient:
    """Blocking client for ``POST {base_url}/v1/chat/completions``.

    Timeouts, connection errors, 429 and 5xx responses are retried with
    full-jitter exponential backoff; other 4xx responses fail immediately.

    Args:
      config: Endpoint settings.
      transport: Optional httpx transport (e.g. ``httpx.MockTransport``).
      sleep: Replacement for :func:`time.sleep`, mainly for tests.
      jitter: Callable mapping a backoff cap to the actual delay.
    """

    def __init__(self, config=None, transport=None, sleep=time.sleep, jitter=None):
        self.config = config or EndpointConfig()
        key = os.environ.get(self.config.api_key_env)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._http = httpx.Client(
            base_url=self.config.base_url, headers=headers, timeout=self.config.timeout, transport=transport
        )
        self._sleep = sleep
        self._jitter = jitter or (lambda cap: random.uniform(0.0, cap))
        self._trace_lock = threading.Lock()

    def close(self):
        self._http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _trace(self, request, record):
        if not self.config.trace_path:
            return
        entry = {"query_id": request.query_id, "shard": request.shard, "request": request.payload(), **record}
        with self._trace_lock, open(self.config.trace_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry) + "\n")

    def complete(self, request: ChatRequest) -> ChatResponse:
        cfg = self.config
        start = time.monotonic()
        last_error = None
        for attempt in range(1, cfg.max_attempts + 1):
            try:
                resp = self._http.post("/v1/chat/completions", json=request.payload())
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last_error = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code == 200:
                    try:
                        text = resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        raise ClientError(
                            f"malformed completion body: {exc}", request.query_id, request.shard
                        ) from None
                    self._trace(request, {"status": 200, "text": text, "attempts": attempt})
                    return ChatResponse(text or "", time.monotonic() - start, attempt)
                if resp.status_code in RETRYABLE_STATUS or resp.status_code >= 500:
                    last_error = f"HTTP {resp.status_code}"
                else:
                    self._trace(request, {"status": resp.status_code, "attempts": attempt})
                    raise ClientError(
                        f"HTTP {resp.status_code}: {resp.text[:200]}", request.query_id, request.shard
                    )
            logger.warning("completion attempt %d/%d failed: %s", attempt, cfg.max_attempts, last_error)
            if attempt < cfg.max_attempts:
                self._sleep(self._jitter(cfg.backoff_base * cfg.backoff_factor ** (attempt - 1)))
        self._trace(request, {"error": last_error, "attempts": cfg.max_attempts})
        raise TransportError(
            f"gave up after {cfg.max_attempts} attempts ({last_error})", request.query_id, request.shard
        )


def complete_all(llm, requests: Sequence[ChatRequest], max_workers=None) -> List[ChatResponse]:
    """Run ``llm.complete`` over ``requests`` concurrently, returning results in input order.

    The first failure is re-raised after all submitted calls have settled.
    """
    requests = list(requests)
    if not requests:
        return []
    workers = max_workers or len(requests)
    if workers <= 1 or len(requests) == 1:
        return [llm.complete(r) for r in requests]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(llm.complete, r) for r in requests]
        return [f.result() for f in futures]


# Mock models


def _parse_classification(prompt):
    lines = prompt.split("\n")
    if not lines or not lines[0].startswith(CLASSIFY_INSTRUCTION) or not lines[-1].endswith(CLASS_SEP):
        raise MockParseError("not a classification prompt")
    labels = []
    for line in lines[1:-1]:
        if not line.startswith(ARTICLE) or CLASS_SEP + " " not in line:
            raise MockParseError(f"unparseable demonstration line: {line[:80]!r}")
        labels.append(line.rsplit(CLASS_SEP + " ", 1)[1])
    return labels


def _parse_qa(prompt):
    """Demo answers and released keywords from a QA or follow-up prompt."""
    keywords = []
    body = prompt
    if prompt.startswith(KEYWORDS):
        head, _, body = prompt.partition("\n")
        keywords = [k for k in head[len(KEYWORDS):].rstrip(".").split(", ") if k]
    blocks = body.split("\n\n")
    answers = []
    for i, block in enumerate(blocks):
        parts = block.split("\n")
        if len(parts) != 3 or not parts[0].startswith(READ_TEXT) or not parts[1].startswith(QUESTION):
            raise MockParseError(f"unparseable QA block {i}")
        if not parts[2].startswith(ANSWER):
            raise MockParseError(f"QA block {i} lacks the answer line")
        answer = parts[2][len(ANSWER):].strip()
        if i == len(blocks) - 1:
            if answer:
                raise MockParseError("query block must leave the answer empty")
        else:
            answers.append(answer)
    return answers, keywords


def mock_complete(behavior, prompt, fixed_text="N/A"):
    """Offline stand-ins for a model, driven by the prompt structure.

    ``majority-label``: most frequent demonstration label (ties go to the
    lexicographically smallest; empty string with no demonstrations).
    ``keyword-echo``: demonstration answers joined by spaces, or the released
    keywords for a follow-up prompt.
    ``fixed-text``: always ``fixed_text``.
    """
    if behavior == "fixed-text":
        return fixed_text
    if behavior == "majority-label":
        labels = _parse_classification(prompt)
        if not labels:
            return ""
        counts = Counter(labels)
        top = max(counts.values())
        return min(label for label, c in counts.items() if c == top)
    if behavior == "keyword-echo":
        answers, keywords = _parse_qa(prompt)
        if keywords:
            return " ".join(keywords)
        return " ".join(" ".join(tokenize(a, METRIC_TOKENIZER)) for a in answers)
    raise InvalidParameterError(f"unknown mock behavior {behavior!r}")


MOCK_BEHAVIORS = ("majority-label", "keyword-echo", "fixed-text")


@dataclass
class MockLLM:
    """Network-free model with the same ``complete`` interface as :class:`ChatClient`."""

    behavior: str
    fixed_text: str = "N/A"
    calls: int = field(default=0, init=False)

    def __post_init__(self):
        if self.behavior not in MOCK_BEHAVIORS:
            raise InvalidParameterError(f"unknown mock behavior {self.behavior!r}")
        self._lock = threading.Lock()

    def complete(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.calls += 1
        try:
            text = mock_complete(self.behavior, request.prompt, self.fixed_text)
        except MockParseError as exc:
            raise MockParseError(str(exc), request.query_id, request.shard) from None
        return ChatResponse(text, 0.0, 1)
