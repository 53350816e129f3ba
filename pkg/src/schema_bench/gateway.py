"""Provider-agnostic chat-completion client.

Three layers:

* providers (`OpenAIChatProvider`, `MockProvider`) that turn a ChatRequest
  into a ChatCompletion or raise a GatewayError;
* `chat()` which adds bounded retries with exponential backoff for transient
  failures, and `chat_cached()` which adds a content-addressed on-disk cache
  keyed by the canonical request;
* `Gateway`, a small wrapper holding provider + cache + retry policy with a
  concurrency bound and call counters, which is what the pipelines consume.

Every cached run is resumable and, with the mock provider, byte-deterministic.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import re
import threading
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Protocol

from .errors import (
    AuthError,
    CacheIoError,
    GatewayError,
    NoJsonFound,
    ProviderError,
    RateLimited,
    TransportError,
    UnbalancedJson,
)

DEFAULT_TEMPERATURE = 0.7
# Nucleus sampling used when talking to locally hosted fine-tuned endpoints.
LOCAL_ENDPOINT_TOP_P = 0.9

API_KEY_ENV = "SCHEMA_BENCH_API_KEY"
BASE_URL_ENV = "SCHEMA_BENCH_BASE_URL"


@dataclass(frozen=True)
class ChatRequest:
    model: str
    system_prompt: str
    user_prompt: str
    temperature: float = DEFAULT_TEMPERATURE
    top_p: float = 1.0
    max_tokens: int | None = None
    seed_tag: str | None = None

    def __post_init__(self):
        if not self.system_prompt or not self.user_prompt:
            raise ValueError("system_prompt and user_prompt must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature {self.temperature} outside [0, 2]")
        if not 0.0 < self.top_p <= 1.0:
            raise ValueError(f"top_p {self.top_p} outside (0, 1]")
        if self.max_tokens is not None and self.max_tokens <= 0:
            raise ValueError("max_tokens must be positive")

    def canonical(self) -> str:
        return json.dumps(
            {
                "model": self.model,
                "system_prompt": self.system_prompt,
                "user_prompt": self.user_prompt,
                "temperature": self.temperature,
                "top_p": self.top_p,
                "max_tokens": self.max_tokens,
                "seed_tag": self.seed_tag,
            },
            sort_keys=True,
            separators=(",", ":"),
            ensure_ascii=False,
        )

    def with_seed_suffix(self, suffix: str) -> "ChatRequest":
        base = self.seed_tag or ""
        return replace(self, seed_tag=f"{base}{suffix}")


@dataclass(frozen=True)
class ChatCompletion:
    text: str
    model: str
    finish_reason: str = "stop"  # stop | length | error
    usage: tuple[int, int] | None = None  # (prompt_tokens, completion_tokens)

    def __post_init__(self):
        if self.finish_reason == "stop" and self.text is None:
            raise ValueError("completed responses must carry text")


class Provider(Protocol):
    name: str

    def complete(self, request: ChatRequest) -> ChatCompletion: ...


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 5          # retries after the first attempt
    base_backoff: float = 1.0     # seconds, doubled per retry
    jitter: float = 0.1           # uniform fraction added to each sleep


def _backoff_seconds(policy: RetryPolicy, attempt: int, rng: random.Random) -> float:
    base = policy.base_backoff * (2 ** attempt)
    return base * (1.0 + rng.uniform(0.0, policy.jitter))


def chat(
    provider: Provider,
    request: ChatRequest,
    retry: RetryPolicy = RetryPolicy(),
    sleeper: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
) -> ChatCompletion:
    """One completion with bounded retries.

    Transient failures (timeouts, 429, 5xx) are retried up to
    ``retry.max_retries`` times with doubling, jittered backoff.
    Non-retryable errors (auth) surface after exactly one attempt.
    """
    rng = rng or random.Random(0)
    last: GatewayError | None = None
    for attempt in range(retry.max_retries + 1):
        try:
            return provider.complete(request)
        except GatewayError as exc:
            if not exc.retryable:
                raise
            last = exc
            if attempt < retry.max_retries:
                sleeper(_backoff_seconds(retry, attempt, rng))
    assert last is not None
    if isinstance(last, RateLimited):
        raise RateLimited(f"rate limited after {retry.max_retries + 1} attempts") from last
    raise last


class ResponseCache:
    """One JSON file per request hash under ``<root>/<first2>/<hash>.json``.

    Writes go through a temp file + atomic rename, so concurrent writers are
    safe and a crashed run never leaves a truncated entry behind.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @staticmethod
    def key(request: ChatRequest) -> str:
        return hashlib.sha256(request.canonical().encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, request: ChatRequest) -> ChatCompletion | None:
        path = self._path(self.key(request))
        if not path.exists():
            return None
        try:
            body = json.loads(path.read_text(encoding="utf-8"))
            comp = body["completion"]
            usage = comp.get("usage")
            return ChatCompletion(
                text=comp["text"],
                model=comp["model"],
                finish_reason=comp.get("finish_reason", "stop"),
                usage=tuple(usage) if usage else None,
            )
        except (OSError, KeyError, ValueError) as exc:
            raise CacheIoError(f"unreadable cache entry {path}: {exc}") from exc

    def put(self, request: ChatRequest, completion: ChatCompletion) -> None:
        key = self.key(request)
        path = self._path(key)
        body = {
            "request": json.loads(request.canonical()),
            "completion": {
                "text": completion.text,
                "model": completion.model,
                "finish_reason": completion.finish_reason,
                "usage": list(completion.usage) if completion.usage else None,
            },
            "timestamp": int(os.environ.get("SOURCE_DATE_EPOCH", time.time())),
        }
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
            tmp.write_text(json.dumps(body, ensure_ascii=False, indent=2), encoding="utf-8")
            os.replace(tmp, path)
        except OSError as exc:
            raise CacheIoError(f"cannot write cache entry {path}: {exc}") from exc


def chat_cached(
    provider: Provider,
    cache: ResponseCache,
    request: ChatRequest,
    retry: RetryPolicy = RetryPolicy(),
    sleeper: Callable[[float], None] = time.sleep,
) -> ChatCompletion:
    hit = cache.get(request)
    if hit is not None:
        return hit
    completion = chat(provider, request, retry=retry, sleeper=sleeper)
    cache.put(request, completion)
    return completion


# --- JSON payload extraction --------------------------------------------------

_FENCE = re.compile(r"```[a-zA-Z0-9_-]*\n(.*?)```", re.DOTALL)


def _scan_balanced(text: str, start: int) -> int | None:
    """Return the index one past the balanced close of the JSON value opening
    at ``start``, or None if it never balances. String-aware."""
    opener = text[start]
    closer = {"{": "}", "[": "]"}[opener]
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(text)):
        c = text[i]
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
        elif c in "{[":
            depth += 1
        elif c in "}]":
            depth -= 1
            if depth == 0:
                return i + 1 if c == closer else None
    return None


def _try_parse(fragment: str):
    try:
        return json.loads(fragment)
    except (json.JSONDecodeError, ValueError):
        pass
    # Models sometimes copy the single-quoted pseudo-JSON from prompt format
    # examples verbatim; accept it when it evaluates to a plain dict/list.
    import ast

    try:
        value = ast.literal_eval(fragment)
    except (ValueError, SyntaxError):
        return None
    return value if isinstance(value, (dict, list)) else None


def extract_json_payload(completion_text: str):
    """Locate and parse the first balanced top-level JSON object or array.

    Markdown code fences are searched first, then the raw text. Raises
    NoJsonFound when no opener exists, UnbalancedJson when candidates exist
    but none parses.
    """
    candidates = [m.group(1) for m in _FENCE.finditer(completion_text)]
    candidates.append(completion_text)

    saw_opener = False
    for blob in candidates:
        pos = 0
        while True:
            starts = [blob.find(ch, pos) for ch in "{["]
            starts = [s for s in starts if s != -1]
            if not starts:
                break
            start = min(starts)
            saw_opener = True
            end = _scan_balanced(blob, start)
            if end is None:
                break
            value = _try_parse(blob[start:end])
            if value is not None:
                return value
            pos = start + 1
    if saw_opener:
        raise UnbalancedJson("found JSON-like text but no balanced parseable value")
    raise NoJsonFound("completion contains no JSON object or array")


# --- HTTP provider -------------------------------------------------------------


class OpenAIChatProvider:
    """OpenAI-compatible chat-completions endpoint over HTTPS."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        timeout: float = 120.0,
    ):
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV, "")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.timeout = timeout
        self.name = f"openai-compat:{self.base_url}"
        if not self.base_url:
            raise TransportError(
                f"no base URL configured (set {BASE_URL_ENV} or provider.base_url)"
            )

    def complete(self, request: ChatRequest) -> ChatCompletion:
        import requests

        body = {
            "model": request.model,
            "messages": [
                {"role": "system", "content": request.system_prompt},
                {"role": "user", "content": request.user_prompt},
            ],
            "temperature": request.temperature,
            "top_p": request.top_p,
        }
        if request.max_tokens is not None:
            body["max_tokens"] = request.max_tokens
        try:
            resp = requests.post(
                f"{self.base_url}/chat/completions",
                json=body,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise TransportError(f"transport failure: {exc}") from exc

        if resp.status_code in (401, 403):
            raise AuthError(f"authentication rejected (HTTP {resp.status_code})")
        if resp.status_code == 429:
            raise RateLimited("provider rate limit (HTTP 429)")
        if resp.status_code != 200:
            raise ProviderError(resp.status_code, resp.text)
        try:
            payload = resp.json()
            choice = payload["choices"][0]
            usage = payload.get("usage")
            return ChatCompletion(
                text=choice["message"]["content"] or "",
                model=payload.get("model", request.model),
                finish_reason=choice.get("finish_reason", "stop"),
                usage=(
                    (usage["prompt_tokens"], usage["completion_tokens"]) if usage else None
                ),
            )
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise ProviderError(resp.status_code, f"malformed response body: {exc}") from exc


# --- deterministic mock ---------------------------------------------------------


def _stable_hash(text: str, chars: int = 6) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:chars]


def _extract_after_marker(prompt: str, marker: str):
    """Parse the JSON value immediately following a `[Marker]` line, if any."""
    idx = prompt.find(marker)
    if idx == -1:
        return None
    for opener in "{[":
        start = prompt.find(opener, idx)
        if start == -1:
            continue
        end = _scan_balanced(prompt, start)
        if end is None:
            continue
        value = _try_parse(prompt[start:end])
        if value is not None:
            return value
    return None


def _canned_schema(seed_text: str) -> str:
    h = _stable_hash(seed_text)
    obj = {
        "Approach": {
            "definition": f"The core method or technique each paper proposes (group {h}).",
            "output_format": "string values",
        },
        "Evaluation Setting": {
            "definition": "The datasets and protocols used to measure performance.",
            "output_format": "string values",
        },
        f"Key Findings {h}": {
            "definition": "The main empirical result reported by each paper.",
            "output_format": "string values",
        },
    }
    return json.dumps(obj, ensure_ascii=False)


def synthesize_mock_reply(prompt: str) -> str:
    """Deterministic, contract-valid reply for every prompt family in the
    pipelines. Pure function of the prompt text, stable across processes."""
    h = _stable_hash(prompt)

    if "task is to generate this goal" in prompt:
        return json.dumps(
            {
                "goal": f"How do the compared papers differ in their methods and findings ({h})?",
                "justification": "The table contrasts approaches and results across the papers.",
            },
            ensure_ascii=False,
        )
    if "select the best user intent" in prompt:
        m = re.search(r"Candidate 1: (.+)", prompt)
        best = m.group(1).strip() if m else "None"
        return json.dumps(
            {"justification": "Candidate 1 scores 5; the rest score 3.", "best_goal": best},
            ensure_ascii=False,
        )
    if '"bullets"' in prompt:
        return json.dumps(
            {
                "bullets": [
                    f"The paper introduces a method identified by tag {h}.",
                    f"Experiments cover the benchmark family {h[:3]}.",
                    f"The main result improves over prior work on metric {h[3:]}.",
                ]
            },
            ensure_ascii=False,
        )
    if "unifying patterns" in prompt:
        ids = re.findall(r"\[id=(\d+)\]", prompt)
        return json.dumps(
            {
                "patterns": [
                    {
                        "name": f"Pattern {h[:4]}",
                        "prompt": f"Does the example discuss theme {h[:4]}?",
                        "example_ids": ids[:2] or ["0"],
                    }
                ]
            },
            ensure_ascii=False,
        )
    if "DO NOT relate to the THEME" in prompt or "should be REMOVED" in prompt:
        return json.dumps({"remove": []})
    if "should be MERGED" in prompt:
        return json.dumps({"merge": []})
    if "A SINGLE PIECE OF feedback" in prompt:
        return json.dumps(
            {"model_feedback": f"Add a column capturing the evaluation datasets ({h})."},
            ensure_ascii=False,
        )
    if "[Reference Schema]" in prompt or "[Reference examples of critiques]" in prompt:
        return json.dumps(
            {"critique": f"Add a column describing the datasets each paper uses ({h})."},
            ensure_ascii=False,
        )
    if "[Feedback to be used]" in prompt:
        original = _extract_after_marker(prompt, "[Original Schema]")
        if isinstance(original, dict) and len(original) >= 2:
            return json.dumps(original, ensure_ascii=False)
        return _canned_schema(prompt)
    if "[Current Schema]" in prompt:
        current = _extract_after_marker(prompt, "[Current Schema]")
        if isinstance(current, dict) and len(current) >= 2:
            return json.dumps(current, ensure_ascii=False)
        return _canned_schema(prompt)
    if "[Candidate Schema]" in prompt:
        candidate = _extract_after_marker(prompt, "[Candidate Schema]")
        if isinstance(candidate, dict) and candidate:
            return json.dumps(candidate, ensure_ascii=False)
        return _canned_schema(prompt)
    if "find the appropriate number of attributes" in prompt or "create the schema" in prompt:
        return _canned_schema(prompt)
    return json.dumps({"text": f"ok {h}"})


class MockProvider:
    """Scripted/deterministic provider for offline runs and tests.

    Script format (also accepted as a JSON file via the CLI)::

        {"rules": [{"match": "<substring or regex>", "responses": [<item>, ...]}],
         "default": "auto"}

    A response item is a plain string, ``{"text": ...}``, or
    ``{"error": {"status": 503}}`` for fault injection. Each rule's responses
    are consumed FIFO; when exhausted (or when nothing matches) the default
    applies. The default "auto" synthesizes a contract-valid reply as a pure
    function of the prompt, so whole pipelines run deterministically offline.
    """

    name = "mock"

    def __init__(self, script: dict | None = None):
        script = script or {}
        self._lock = threading.Lock()
        self._rules = []
        for rule in script.get("rules", []):
            self._rules.append(
                {"pattern": rule["match"], "queue": list(rule.get("responses", []))}
            )
        self._default = script.get("default", "auto")
        self.calls = 0
        self.requests: list[ChatRequest] = []

    @classmethod
    def from_file(cls, path: str | Path) -> "MockProvider":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def _match(self, rule, prompt: str) -> bool:
        pat = rule["pattern"]
        if pat in prompt:
            return True
        try:
            return re.search(pat, prompt) is not None
        except re.error:
            return False

    def _materialize(self, item, request: ChatRequest) -> ChatCompletion:
        if isinstance(item, str):
            return ChatCompletion(text=item, model=request.model)
        if "error" in item:
            err = item["error"]
            status = int(err.get("status", 500))
            if status in (401, 403):
                raise AuthError(f"mock auth failure (HTTP {status})")
            if status == 429:
                raise RateLimited("mock rate limit")
            if status == 0:
                raise TransportError(err.get("message", "mock transport failure"))
            raise ProviderError(status, err.get("message", "mock provider failure"))
        return ChatCompletion(
            text=item.get("text", ""),
            model=request.model,
            finish_reason=item.get("finish_reason", "stop"),
        )

    def complete(self, request: ChatRequest) -> ChatCompletion:
        with self._lock:
            self.calls += 1
            self.requests.append(request)
            full_prompt = request.system_prompt + "\n" + request.user_prompt
            for rule in self._rules:
                if rule["queue"] and self._match(rule, full_prompt):
                    return self._materialize(rule["queue"].pop(0), request)
            if self._default == "auto":
                return ChatCompletion(
                    text=synthesize_mock_reply(request.user_prompt), model=request.model
                )
            return self._materialize(self._default, request)


class Gateway:
    """Provider + cache + retry policy, with bounded concurrency and counters.

    `calls` counts actual provider invocations (cache hits do not count).
    """

    def __init__(
        self,
        provider: Provider,
        cache: ResponseCache | None = None,
        retry: RetryPolicy = RetryPolicy(),
        max_concurrency: int = 4,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self.provider = provider
        self.cache = cache
        self.retry = retry
        self.sleeper = sleeper
        self._sem = threading.Semaphore(max_concurrency)
        self._lock = threading.Lock()
        self.calls = 0
        self.cache_hits = 0
        self.prompt_chars = 0

    def complete(self, request: ChatRequest) -> ChatCompletion:
        if self.cache is not None:
            hit = self.cache.get(request)
            if hit is not None:
                with self._lock:
                    self.cache_hits += 1
                return hit
        with self._sem:
            completion = chat(
                self.provider, request, retry=self.retry, sleeper=self.sleeper
            )
        with self._lock:
            self.calls += 1
            self.prompt_chars += len(request.system_prompt) + len(request.user_prompt)
        if self.cache is not None:
            self.cache.put(request, completion)
        return completion
