"""Chat-completion gateway: backends, response cache, retries, JSON repair
and the apology-retry loop."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
import time
from concurrent.futures import Future
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

from .corpus import DEFAULT_TOKENIZER, Tokenizer
from .errors import (
    ApologyPersisted,
    BackendUnavailable,
    ContextOverflow,
    InvalidJson,
    ScriptMiss,
    TransientBackendError,
)
from .prompts import PromptRegistry, get_registry

logger = logging.getLogger(__name__)

API_KEY_ENV = "PROFILE_FORGE_API_KEY"
APOLOGY_LEXEMES = ("i'm sorry", "i apologize", "sorry,")
APOLOGY_WINDOW = 40
WORD_TO_TOKEN = 1.5


@dataclass(frozen=True)
class CompletionRequest:
    model_id: str
    prompt: str
    max_output_tokens: int = 3600
    temperature: float = 0.0
    request_tag: str = ""

    def __post_init__(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    backend_latency_ms: int = 0
    cached: bool = False
    attempt_count: int = 1


@dataclass
class BackendSpec:
    kind: str  # "http_openai_compatible" | "scripted"
    base_url: str = ""
    script: dict[str, Any] = field(default_factory=dict)
    rate_limit: float | None = None  # requests per minute
    max_retries: int = 3
    context_window: int | None = None  # tokens; scripted backends enforce it locally
    timeout_s: float = 600.0

    @classmethod
    def from_dict(cls, data: dict, base_dir: Path | None = None) -> "BackendSpec":
        data = dict(data)
        script_path = data.pop("script_path", None)
        if script_path:
            path = Path(script_path)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            data["script"] = load_script(path)
        return cls(**data)


def max_tokens_for_words(words: int) -> int:
    """Output-token cap for a step whose answer should stay within ``words`` words."""
    return int(2 * words * WORD_TO_TOKEN)


def prompt_hash(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def cache_key(req: CompletionRequest) -> str:
    payload = json.dumps(
        {
            "model_id": req.model_id,
            "prompt": req.prompt,
            "temperature": req.temperature,
            "max_output_tokens": req.max_output_tokens,
        },
        sort_keys=True,
        ensure_ascii=False,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def is_apology(text: str, lexemes: tuple[str, ...] = APOLOGY_LEXEMES) -> bool:
    head = text.lstrip().lower().replace("’", "'")[:APOLOGY_WINDOW]
    return any(head.startswith(lex) for lex in lexemes)


# --- backends -------------------------------------------------------------


class Backend(Protocol):
    def send(self, req: CompletionRequest) -> str: ...


def load_script(path: Path) -> dict[str, Any]:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def save_script(script: dict[str, Any], path: Path) -> None:
    atomic_write_text(Path(path), json.dumps(script, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


class ScriptedBackend:
    """Replays canned outputs keyed by prompt hash.

    A script value is either a string or a list of strings; lists are
    served in order on repeated calls and the last entry then repeats.
    """

    def __init__(self, script: dict[str, Any], context_window: int | None = None,
                 tokenizer: Tokenizer = DEFAULT_TOKENIZER):
        self.script = script
        self.context_window = context_window
        self.tokenizer = tokenizer
        self.calls = 0
        self._served: dict[str, int] = {}
        self._lock = threading.Lock()

    def send(self, req: CompletionRequest) -> str:
        if self.context_window is not None and self.tokenizer.count(req.prompt) > self.context_window:
            raise ContextOverflow(f"prompt exceeds the {self.context_window}-token window")
        h = prompt_hash(req.prompt)
        with self._lock:
            self.calls += 1
            if h not in self.script:
                raise ScriptMiss(h, req.request_tag)
            entry = self.script[h]
            if isinstance(entry, list):
                i = self._served.get(h, 0)
                self._served[h] = i + 1
                return entry[min(i, len(entry) - 1)]
            return entry


class RecordingBackend:
    """Wraps another backend and records every answer into a replayable script."""

    def __init__(self, inner: Backend):
        self.inner = inner
        self.script: dict[str, Any] = {}
        self._lock = threading.Lock()

    def send(self, req: CompletionRequest) -> str:
        text = self.inner.send(req)
        h = prompt_hash(req.prompt)
        with self._lock:
            prev = self.script.get(h)
            if prev is None:
                self.script[h] = text
            elif prev != text:
                seq = prev if isinstance(prev, list) else [prev]
                self.script[h] = seq + [text]
        return text


class HttpBackend:
    """OpenAI-compatible ``/chat/completions`` client."""

    _OVERFLOW_HINTS = ("context_length", "context length", "maximum context", "too many tokens")

    def __init__(self, base_url: str, api_key: str | None = None, timeout_s: float = 600.0, client=None):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self._httpx = httpx
        self._client = client or httpx.Client(timeout=timeout_s)

    def send(self, req: CompletionRequest) -> str:
        httpx = self._httpx
        body = {
            "model": req.model_id,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self._client.post(f"{self.base_url}/chat/completions", json=body, headers=headers)
        except httpx.TransportError as exc:
            raise TransientBackendError(str(exc)) from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        if resp.status_code >= 400:
            detail = resp.text
            if any(h in detail.lower() for h in self._OVERFLOW_HINTS):
                raise ContextOverflow(detail[:500])
            raise BackendUnavailable(f"HTTP {resp.status_code}: {detail[:500]}")
        data = resp.json()
        try:
            return data["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendUnavailable(f"malformed completion payload: {str(data)[:200]}") from exc


def make_backend(spec: BackendSpec, tokenizer: Tokenizer = DEFAULT_TOKENIZER) -> Backend:
    if spec.kind == "scripted":
        return ScriptedBackend(spec.script, spec.context_window, tokenizer)
    if spec.kind == "http_openai_compatible":
        if not spec.base_url:
            raise ValueError("http backend needs base_url")
        return HttpBackend(spec.base_url, timeout_s=spec.timeout_s)
    raise ValueError(f"unknown backend kind {spec.kind!r}")


# --- cache and rate limiting ---------------------------------------------


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ResponseCache:
    """Content-addressed cache: ``{cache_dir}/{key}.json``."""

    def __init__(self, cache_dir: Path, clock: Callable[[], float] = time.time):
        self.cache_dir = Path(cache_dir)
        self.clock = clock

    def path(self, key: str) -> Path:
        return self.cache_dir / f"{key}.json"

    def get(self, key: str) -> str | None:
        p = self.path(key)
        if not p.exists():
            return None
        return json.loads(p.read_text(encoding="utf-8"))["response"]["text"]

    def put(self, key: str, req: CompletionRequest, text: str) -> None:
        record = {
            "key": key,
            "request": asdict(req),
            "response": {"text": text},
            "timestamp": self.clock(),
        }
        atomic_write_text(self.path(key), json.dumps(record, indent=2, ensure_ascii=False) + "\n")


class TokenBucket:
    """Requests-per-minute limiter that admits callers in arrival order."""

    def __init__(self, rate_per_minute: float, clock=time.monotonic, sleep=time.sleep):
        self.interval = 60.0 / rate_per_minute
        self.clock = clock
        self.sleep = sleep
        self._next_free = 0.0
        self._lock = threading.Lock()
        self._cond = threading.Condition(self._lock)
        self._next_ticket = 0
        self._serving = 0

    def acquire(self) -> None:
        with self._cond:
            ticket = self._next_ticket
            self._next_ticket += 1
            while ticket != self._serving:
                self._cond.wait()
            now = self.clock()
            wait = self._next_free - now
            self._next_free = max(now, self._next_free) + self.interval
        if wait > 0:
            self.sleep(wait)
        with self._cond:
            self._serving += 1
            self._cond.notify_all()


# --- JSON output ----------------------------------------------------------

_FENCE = re.compile(r"```(?:json|JSON)?\s*\n?(.*?)\n?\s*```", re.DOTALL)


@dataclass(frozen=True)
class JsonSchema:
    """Required fields and their primitive types; ``many`` expects a JSON array."""

    fields: dict[str, type] = field(default_factory=dict)
    many: bool = False

    def describe(self) -> str:
        names = {int: "int", str: "string", float: "number", bool: "bool"}
        body = ", ".join(f'"{k}": {names.get(t, t.__name__)}' for k, t in self.fields.items())
        return f"[{{{body}}}, ...]" if self.many else f"{{{body}}}"


@dataclass(frozen=True)
class JsonCompletion:
    value: Any
    text: str
    attempt_count: int


def extract_json_text(text: str) -> str:
    m = _FENCE.search(text)
    if m:
        text = m.group(1)
    starts = [i for i in (text.find("{"), text.find("[")) if i >= 0]
    if not starts:
        return text.strip()
    start = min(starts)
    closer = "}" if text[start] == "{" else "]"
    end = text.rfind(closer)
    return text[start : end + 1] if end > start else text[start:]


def _type_ok(value: Any, expected: type) -> bool:
    if expected is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if expected is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, expected)


def parse_json_output(text: str, schema: JsonSchema) -> Any:
    """Parse and validate model output; raises ``ValueError`` describing the problem."""
    candidate = extract_json_text(text)
    try:
        value = json.loads(candidate)
    except json.JSONDecodeError as exc:
        raise ValueError(f"not valid JSON ({exc.msg})") from None
    if schema.many:
        if not isinstance(value, list):
            raise ValueError("expected a JSON array")
        return value
    if not isinstance(value, dict):
        raise ValueError("expected a JSON object")
    for name, expected in schema.fields.items():
        if name not in value:
            raise ValueError(f"missing field {name!r}")
        if not _type_ok(value[name], expected):
            raise ValueError(f"field {name!r} should be {expected.__name__}, got {type(value[name]).__name__}")
    return value


# --- gateway ------------------------------------------------------------


class Gateway:
    """Thread-safe front door to one backend.

    Identical in-flight requests are collapsed into one backend call. With
    a cache, a response is written once and replayed byte-for-byte.
    """

    def __init__(
        self,
        backend: BackendSpec | Backend,
        cache_dir: Path | None = None,
        *,
        tokenizer: Tokenizer = DEFAULT_TOKENIZER,
        prompts: PromptRegistry | None = None,
        max_retries: int | None = None,
        backoff_base: float = 1.0,
        clock: Callable[[], float] = time.time,
        sleep: Callable[[float], None] = time.sleep,
    ):
        spec = backend if isinstance(backend, BackendSpec) else None
        self.backend = make_backend(spec, tokenizer) if spec else backend
        self.max_retries = max_retries if max_retries is not None else (spec.max_retries if spec else 3)
        self.cache = ResponseCache(cache_dir, clock) if cache_dir is not None else None
        self.limiter = TokenBucket(spec.rate_limit, sleep=sleep) if spec and spec.rate_limit else None
        self.prompts = prompts or get_registry()
        self.backoff_base = backoff_base
        self.sleep = sleep
        self.backend_calls = 0
        self._inflight: dict[str, Future] = {}
        self._lock = threading.Lock()

    def complete(self, req: CompletionRequest, *, bypass_cache: bool = False) -> CompletionResponse:
        key = cache_key(req)
        if self.cache is not None and not bypass_cache:
            hit = self.cache.get(key)
            if hit is not None:
                return CompletionResponse(hit, 0, True, 1)
        if bypass_cache:
            return self._call(req, key, store=False)

        with self._lock:
            fut = self._inflight.get(key)
            owner = fut is None
            if owner:
                fut = self._inflight[key] = Future()
        if not owner:
            resp = fut.result()
            return CompletionResponse(resp.text, 0, True, resp.attempt_count)
        try:
            resp = self._call(req, key, store=True)
        except BaseException as exc:
            fut.set_exception(exc)
            raise
        else:
            fut.set_result(resp)
            return resp
        finally:
            with self._lock:
                self._inflight.pop(key, None)

    def _call(self, req: CompletionRequest, key: str, store: bool) -> CompletionResponse:
        attempt = 0
        while True:
            attempt += 1
            if self.limiter:
                self.limiter.acquire()
            started = time.monotonic()
            try:
                with self._lock:
                    self.backend_calls += 1
                text = self.backend.send(req)
            except TransientBackendError as exc:
                if attempt > self.max_retries:
                    raise BackendUnavailable(f"{req.request_tag or 'request'} failed after {attempt} attempts: {exc}") from exc
                delay = self.backoff_base * 2 ** (attempt - 1)
                logger.warning("transient backend failure (%s); retry %d in %.1fs", exc, attempt, delay)
                self.sleep(delay)
                continue
            latency = int((time.monotonic() - started) * 1000)
            if store and self.cache is not None:
                self.cache.put(key, req, text)
            return CompletionResponse(text, latency, False, attempt)

    def complete_json(self, req: CompletionRequest, schema: JsonSchema, *, bypass_cache: bool = False) -> JsonCompletion:
        """Complete and parse JSON, allowing exactly one repair turn."""
        first = self.complete(req, bypass_cache=bypass_cache)
        try:
            return JsonCompletion(parse_json_output(first.text, schema), first.text, 1)
        except ValueError as problem:
            logger.info("repairing JSON output for %s: %s", req.request_tag, problem)
            repair = self.prompts.render(
                "json_repair", problem=str(problem), raw_output=first.text, schema=schema.describe()
            )
            second_req = CompletionRequest(
                req.model_id, f"{req.prompt}\n\n{repair}", req.max_output_tokens, req.temperature,
                f"{req.request_tag}:repair",
            )
        second = self.complete(second_req, bypass_cache=bypass_cache)
        try:
            return JsonCompletion(parse_json_output(second.text, schema), second.text, 2)
        except ValueError as problem:
            raise InvalidJson(f"{req.request_tag or 'request'}: {problem}; needs manual correction", second.text) from None

    def complete_with_apology_retry(self, req: CompletionRequest, feedback: str) -> CompletionResponse:
        if not feedback.strip():
            raise ValueError("feedback prompt must be non-empty")
        first = self.complete(req)
        if not is_apology(first.text):
            return first
        retry = CompletionRequest(
            req.model_id, f"{req.prompt}\n\n{feedback}", req.max_output_tokens, req.temperature,
            f"{req.request_tag}:feedback",
        )
        second = self.complete(retry)
        if is_apology(second.text):
            raise ApologyPersisted(second.text)
        return CompletionResponse(second.text, second.backend_latency_ms, second.cached, 2)
