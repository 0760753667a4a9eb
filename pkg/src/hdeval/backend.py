"""LLM access for criteria decomposition and per-criterion scoring.

Three backend kinds share one code path:

* ``remote``  POSTs chat-completions style JSON to ``endpoint``.
* ``mock``    answers from a fixture table, falling back to a seeded hash of
              the prompt bytes; never touches the network.
* ``replay``  answers only from the on-disk cache and raises on a miss.

Any kind with ``cache_dir`` set records every reply, one JSON file per key,
so a later ``replay`` run can reproduce it offline.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from .criteria import CriteriaTree, Criterion
from .datasets import EvalSample
from .errors import DecompositionParseError, ReplayMissError, TransportError, ValidationError
from .prompts import SCORE_CUE, render_decomposition_prompt, render_evaluation_prompt

log = logging.getLogger(__name__)

BACKEND_KINDS = ("remote", "mock", "replay")
SCORE_MIN, SCORE_MAX = 1.0, 5.0
IMPUTED_SCORE = 3.0
DEFAULT_API_KEY_ENV = "HDEVAL_API_KEY"


@dataclass(frozen=True)
class BackendConfig:
    kind: str = "mock"
    endpoint: str | None = None
    model_name: str = "mock"
    temperature: float = 0.0
    top_p: float = 1.0
    max_tokens: int = 32
    max_retries: int = 2
    cache_dir: str | None = None
    api_key_env: str = DEFAULT_API_KEY_ENV
    max_in_flight: int = 1
    requests_per_minute: int | None = None
    backoff_base: float = 1.0
    backoff_max: float = 30.0
    timeout: float = 60.0
    seed: int = 0
    fixtures: dict[str, Any] | None = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in BACKEND_KINDS:
            raise ValidationError(f"backend kind must be one of {BACKEND_KINDS}, got {self.kind!r}")
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if self.max_tokens < 1:
            raise ValidationError("max_tokens must be >= 1")
        if self.max_retries < 0:
            raise ValidationError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValidationError("max_in_flight must be >= 1")
        if self.kind == "remote" and not self.endpoint:
            raise ValidationError("remote backend needs an endpoint")
        if self.kind == "replay" and not self.cache_dir:
            raise ValidationError("replay backend needs a cache_dir")

    def to_dict(self) -> dict[str, Any]:
        out = {
            k: getattr(self, k)
            for k in (
                "kind", "endpoint", "model_name", "temperature", "top_p", "max_tokens",
                "max_retries", "cache_dir", "api_key_env", "max_in_flight",
                "requests_per_minute", "backoff_base", "backoff_max", "timeout", "seed",
            )
        }
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BackendConfig:
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True)
class ScoreValue:
    value: float
    raw_text: str
    retries_used: int = 0
    imputed: bool = False

    def __post_init__(self) -> None:
        if not SCORE_MIN <= self.value <= SCORE_MAX:
            raise ValidationError(f"score {self.value} outside [1, 5]")
        if self.imputed and self.value != IMPUTED_SCORE:
            raise ValidationError("imputed scores must equal the scale midpoint")


@dataclass(frozen=True)
class Request:
    """What a prompt is asking for; the mock uses it to find fixtures."""

    kind: str  # "score" or "decompose"
    criterion_name: str = ""
    sample_id: str | None = None
    attempt: int = 0


# --- reply parsing ---------------------------------------------------------

_CUE_RE = re.compile(r"Score\s*\(\s*1\s*-\s*5\s*\)\s*:\s*([-+]?\d+(?:\.\d+)?)", re.IGNORECASE)
_CUE_TEXT_RE = re.compile(r"Score\s*\(\s*1\s*-\s*5\s*\)\s*:?", re.IGNORECASE)
_NUMBER_RE = re.compile(r"(?<![\w.\-+])(\d+(?:\.\d+)?)(?![\w]|\.\d)")


def parse_score(raw: str) -> float | None:
    """Extract a score in [1, 5] from a model reply, or None when nothing parses.

    The number right after ``Score (1-5):`` wins and is clamped into range;
    otherwise the first standalone number already inside [1, 5] is used.
    """
    m = _CUE_RE.search(raw)
    if m:
        return min(max(float(m.group(1)), SCORE_MIN), SCORE_MAX)
    text = _CUE_TEXT_RE.sub(" ", raw)
    for m in _NUMBER_RE.finditer(text):
        v = float(m.group(1))
        if SCORE_MIN <= v <= SCORE_MAX:
            return v
    return None


_DECOMP_LINE_RE = re.compile(
    r"""^\s*
    (?:[-*•]\s*|\(?\d{1,3}[.)]\s*|\#{1,6}\s*)?   # bullet, number or heading marker
    \**\s*(?P<name>[^:*\n]{1,80}?)\s*\**\s*           # name, optionally bold
    :\s*\**\s*(?P<definition>\S.*?)\s*$""",
    re.VERBOSE,
)


def parse_decomposition(raw: str, limit: int | None = None) -> list[tuple[str, str]]:
    out: list[tuple[str, str]] = []
    seen: set[str] = set()
    for line in raw.splitlines():
        m = _DECOMP_LINE_RE.match(line)
        if not m:
            continue
        name = m.group("name").strip().strip("*").strip()
        definition = m.group("definition").strip()
        if not name or not definition or name.lower() in seen:
            continue
        seen.add(name.lower())
        out.append((name, definition))
    if not out:
        raise DecompositionParseError("no 'Name: definition' lines in decomposition reply", raw)
    return out[:limit] if limit is not None else out


# --- cache -----------------------------------------------------------------


def cache_key(config: BackendConfig, prompt: str, attempt: int = 0) -> str:
    material: dict[str, Any] = {
        "model": config.model_name,
        "prompt": prompt,
        "temperature": config.temperature,
        "top_p": config.top_p,
        "max_tokens": config.max_tokens,
    }
    if attempt:
        material["attempt"] = attempt
    blob = json.dumps(material, sort_keys=True, ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


class ResponseCache:
    def __init__(self, directory: str | Path) -> None:
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def _path(self, key: str) -> Path:
        return self.dir / f"{key}.json"

    def lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def get(self, key: str) -> str | None:
        path = self._path(key)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))["reply"]

    def put(self, key: str, prompt: str, reply: str) -> None:
        record = {
            "key": key,
            "prompt": prompt,
            "reply": reply,
            "timestamp": datetime.now(timezone.utc).isoformat(),
        }
        tmp = self._path(key).with_suffix(f".tmp{threading.get_ident()}")
        tmp.write_text(json.dumps(record, ensure_ascii=False, indent=1), encoding="utf-8")
        os.replace(tmp, self._path(key))


# --- backends --------------------------------------------------------------


class Backend:
    def __init__(self, config: BackendConfig) -> None:
        self.config = config
        self.cache = ResponseCache(config.cache_dir) if config.cache_dir else None

    def complete(self, prompt: str, request: Request) -> str:
        key = cache_key(self.config, prompt, request.attempt)
        if self.cache is None:
            return self._query(prompt, request, key)
        with self.cache.lock(key):
            hit = self.cache.get(key)
            if hit is not None:
                return hit
            reply = self._query(prompt, request, key)
            self.cache.put(key, prompt, reply)
            return reply

    def _query(self, prompt: str, request: Request, key: str) -> str:
        raise NotImplementedError


class ReplayBackend(Backend):
    def _query(self, prompt: str, request: Request, key: str) -> str:
        detail = request.kind
        if request.sample_id is not None:
            detail += f" sample={request.sample_id}"
        if request.criterion_name:
            detail += f" criterion={request.criterion_name!r}"
        raise ReplayMissError(key, detail)


class MockBackend(Backend):
    """Deterministic offline backend.

    Fixture layout::

        {"decompositions": {parent_name: reply_text | [[name, definition], ...]},
         "scores": {sample_id: {criterion_name: reply | value | [reply, ...]}}}

    A list of score replies is consumed by retry attempt. Requests without a
    fixture get a reply derived from sha256(seed, prompt).
    """

    def __init__(self, config: BackendConfig) -> None:
        super().__init__(config)
        self.fixtures = config.fixtures or {}

    def _query(self, prompt: str, request: Request, key: str) -> str:
        if request.kind == "decompose":
            hit = self.fixtures.get("decompositions", {}).get(request.criterion_name)
            if hit is None:
                return self._generic_decomposition(prompt, request)
            if isinstance(hit, str):
                return hit
            return "\n".join(f"{name}: {definition}" for name, definition in hit)
        scores = self.fixtures.get("scores", {})
        hit = scores.get(request.sample_id, {}).get(request.criterion_name)
        if hit is None:
            digest = hashlib.sha256(f"{self.config.seed}\x00{prompt}".encode("utf-8")).digest()
            return f"{SCORE_CUE} {1 + digest[0] % 5}"
        if isinstance(hit, list):
            hit = hit[min(request.attempt, len(hit) - 1)]
        if isinstance(hit, (int, float)):
            return f"{SCORE_CUE} {hit:g}"
        return str(hit)

    def _generic_decomposition(self, prompt: str, request: Request) -> str:
        m = re.search(r"around (\d+) fine-grained", prompt)
        count = int(m.group(1)) if m else 4
        name = request.criterion_name
        return "\n".join(
            f"{name} facet {i}: Aspect {i} of {name.lower()} in the evaluated text."
            for i in range(1, count + 1)
        )


class _RateLimiter:
    def __init__(self, per_minute: int | None) -> None:
        self.per_minute = per_minute
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def wait(self) -> None:
        if not self.per_minute:
            return
        while True:
            with self._lock:
                now = time.monotonic()
                while self._stamps and now - self._stamps[0] >= 60.0:
                    self._stamps.popleft()
                if len(self._stamps) < self.per_minute:
                    self._stamps.append(now)
                    return
                delay = 60.0 - (now - self._stamps[0])
            time.sleep(max(delay, 0.01))


class RemoteBackend(Backend):
    def __init__(self, config: BackendConfig, client: Any = None) -> None:
        super().__init__(config)
        import httpx

        self._httpx = httpx
        self._client = client or httpx.Client(timeout=config.timeout)
        self._slots = threading.BoundedSemaphore(config.max_in_flight)
        self._limiter = _RateLimiter(config.requests_per_minute)
        self._jitter = random.Random(config.seed)

    def request_body(self, prompt: str) -> dict[str, Any]:
        return {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
            "top_p": self.config.top_p,
            "max_tokens": self.config.max_tokens,
        }

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.api_key_env, "").strip()
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers

    def _backoff(self, attempt: int) -> float:
        base = min(self.config.backoff_base * (2 ** attempt), self.config.backoff_max)
        return base * (0.5 + self._jitter.random() / 2)

    def _query(self, prompt: str, request: Request, key: str) -> str:
        body = self.request_body(prompt)
        last: Exception | None = None
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                time.sleep(self._backoff(attempt - 1))
            self._limiter.wait()
            try:
                with self._slots:
                    resp = self._client.post(self.config.endpoint, json=body, headers=self._headers())
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = TransportError(f"HTTP {resp.status_code} from {self.config.endpoint}")
                    continue
                if resp.status_code >= 400:
                    raise TransportError(f"HTTP {resp.status_code} from {self.config.endpoint}: {resp.text[:200]}")
                return extract_reply(resp.json())
            except self._httpx.HTTPError as e:
                last = e
                log.debug("transport error on attempt %d: %s", attempt, e)
        raise TransportError(
            f"request failed after {self.config.max_retries + 1} attempts: {last}"
        ) from last


def extract_reply(payload: dict[str, Any]) -> str:
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise TransportError(f"unexpected response shape: {str(payload)[:200]}") from None
    return content or ""


def make_backend(config: BackendConfig) -> Backend:
    if config.kind == "mock":
        return MockBackend(config)
    if config.kind == "replay":
        return ReplayBackend(config)
    return RemoteBackend(config)


def _as_backend(backend: Backend | BackendConfig) -> Backend:
    return backend if isinstance(backend, Backend) else make_backend(backend)


# --- operations ------------------------------------------------------------


def decompose(
    backend: Backend | BackendConfig,
    tree: CriteriaTree,
    parent_id: str,
    desired_children: int,
    task_background: str = "",
) -> list[tuple[str, str]]:
    backend = _as_backend(backend)
    parent = tree.get(parent_id)
    if desired_children > tree.max_children:
        raise ValidationError(f"desired_children {desired_children} exceeds max_children {tree.max_children}")
    prompt = render_decomposition_prompt(tree.task.name, task_background, parent, desired_children)
    raw = backend.complete(prompt, Request(kind="decompose", criterion_name=parent.name))
    return parse_decomposition(raw, limit=desired_children)


def score(
    backend: Backend | BackendConfig,
    sample: EvalSample,
    criterion: Criterion,
    tree: CriteriaTree,
    template_id: str = "summarization",
) -> ScoreValue:
    backend = _as_backend(backend)
    prompt = render_evaluation_prompt(sample, criterion, tree, template_id)
    raw = ""
    for attempt in range(backend.config.max_retries + 1):
        request = Request(kind="score", criterion_name=criterion.name, sample_id=sample.sample_id, attempt=attempt)
        raw = backend.complete(prompt, request)
        value = parse_score(raw)
        if value is not None:
            return ScoreValue(value=value, raw_text=raw, retries_used=attempt)
    log.warning("imputing midpoint for sample %s criterion %s", sample.sample_id, criterion.id)
    return ScoreValue(IMPUTED_SCORE, raw, retries_used=backend.config.max_retries, imputed=True)


def with_overrides(config: BackendConfig, **changes: Any) -> BackendConfig:
    return replace(config, **{k: v for k, v in changes.items() if v is not None})
