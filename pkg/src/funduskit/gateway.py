"""Uniform client for the text-LLM, vision-MLLM, judge, and retrieval
endpoints, with retry, rate limiting, and record/replay caching.

No other module performs network activity; everything upstream talks to a
``Gateway`` handle. Three implementations are provided: ``HttpGateway`` (live,
OpenAI-compatible wire format, records exchanges), ``ReplayGateway`` (serves
from a recorded cache only), and ``ScriptedGateway`` (in-process programmable
responder for tests).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import httpx

log = logging.getLogger(__name__)

KNOWLEDGE_LLM = "knowledge-llm"
VISION_MLLM = "vision-mllm"
JUDGE_LLM = "judge-llm"
RETRIEVAL = "retrieval"
ROLES = (KNOWLEDGE_LLM, VISION_MLLM, JUDGE_LLM, RETRIEVAL)


class GatewayError(RuntimeError):
    pass


class TransportError(GatewayError):
    """Live request failed after all retry attempts."""


class ReplayMissError(GatewayError):
    """Replay mode received a request with no recorded exchange."""


class RateLimitError(GatewayError):
    """The per-role token bucket stayed empty past the acquire timeout."""


@dataclass(frozen=True)
class EndpointRole:
    role: str
    base_url: str
    model_name: str
    temperature: float = 0.0
    max_tokens: int = 1024
    api_key_env: Optional[str] = None


@dataclass(frozen=True)
class ChatMessage:
    role: str
    content: str
    image_ref: Optional[str] = None


@dataclass(frozen=True)
class ChatRequest:
    endpoint_role: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = 1024
    rollout_index: int = 0

    def cache_key(self) -> str:
        """Stable digest over a canonical serialization of the request.

        rollout_index is part of the key so repeated sampling rollouts stay
        distinct under replay.
        """
        canonical = json.dumps(
            {
                "endpoint_role": self.endpoint_role,
                "messages": [
                    [m.role, m.content, m.image_ref] for m in self.messages
                ],
                "temperature": self.temperature,
                "max_tokens": self.max_tokens,
                "rollout_index": self.rollout_index,
            },
            sort_keys=True,
            ensure_ascii=False,
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: str = "stop"
    usage: Optional[dict] = None


def _retrieval_key(query: str, sources: Sequence[str]) -> str:
    canonical = json.dumps({"query": query, "sources": sorted(sources)}, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ReplayCache:
    """Content-addressed exchange store: one JSON file per exchange, chat
    responses under the root, retrieval fixtures under ``retrieval/``.
    Concurrent reads are free; writes are atomic via rename."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / "retrieval").mkdir(exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, key: str, kind: str = "chat") -> Path:
        sub = self.root if kind == "chat" else self.root / "retrieval"
        return sub / f"{key}.json"

    def get(self, key: str, kind: str = "chat") -> Optional[dict]:
        path = self._path(key, kind)
        if not path.exists():
            return None
        return json.loads(path.read_text(encoding="utf-8"))

    def put(self, key: str, record: dict, kind: str = "chat") -> None:
        path = self._path(key, kind)
        tmp = path.with_suffix(".tmp")
        with self._lock:
            tmp.write_text(
                json.dumps(record, sort_keys=True, ensure_ascii=False), encoding="utf-8"
            )
            tmp.replace(path)


class _TokenBucket:
    def __init__(self, rate: float, capacity: float):
        self.rate = rate
        self.capacity = capacity
        self.tokens = capacity
        self.updated = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self, timeout: float = 30.0) -> None:
        deadline = time.monotonic() + timeout
        while True:
            with self._lock:
                now = time.monotonic()
                self.tokens = min(self.capacity, self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            if time.monotonic() + wait > deadline:
                raise RateLimitError("token bucket saturated")
            time.sleep(min(wait, 0.05))


class Gateway:
    """Interface shared by all gateway implementations."""

    def __init__(self):
        self.chat_calls: list[str] = []
        self.retrieval_calls: list[str] = []
        self._log_lock = threading.Lock()
        self.call_log: Optional[Path] = None

    def _record_call(self, key: str, kind: str = "chat") -> None:
        with self._log_lock:
            (self.chat_calls if kind == "chat" else self.retrieval_calls).append(key)
            if self.call_log is not None:
                with open(self.call_log, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps({"kind": kind, "key": key}) + "\n")

    def chat(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError

    def retrieve(self, query: str, sources: Sequence[str] = ()) -> list:
        raise NotImplementedError


class ReplayGateway(Gateway):
    """Serves every exchange from a recorded cache; a novel chat request is a
    hard error, a novel retrieval query returns an empty list with a logged
    miss."""

    def __init__(self, cache: ReplayCache | str | Path, call_log: Optional[Path] = None):
        super().__init__()
        self.cache = cache if isinstance(cache, ReplayCache) else ReplayCache(cache)
        self.call_log = Path(call_log) if call_log else None

    def chat(self, request: ChatRequest) -> ChatResponse:
        key = request.cache_key()
        self._record_call(key)
        record = self.cache.get(key)
        if record is None:
            raise ReplayMissError(f"no cached exchange for key {key}")
        return ChatResponse(
            text=record["response"]["text"],
            finish_reason=record["response"].get("finish_reason", "stop"),
            usage=record["response"].get("usage"),
        )

    def retrieve(self, query: str, sources: Sequence[str] = ()) -> list:
        from funduskit.knowledge import ReferencePassage

        key = _retrieval_key(query, sources)
        self._record_call(key, kind="retrieval")
        record = self.cache.get(key, kind="retrieval")
        if record is None:
            log.warning("retrieval fixture miss for query %r", query)
            return []
        return [ReferencePassage.from_dict(p) for p in record["passages"]]


class HttpGateway(Gateway):
    """Live OpenAI-compatible chat client with exponential backoff and
    record-to-cache. Retrieval POSTs ``{query, sources}`` to the retrieval
    endpoint's base_url."""

    def __init__(
        self,
        endpoints: dict[str, EndpointRole],
        cache: Optional[ReplayCache] = None,
        max_attempts: int = 3,
        backoff: float = 0.2,
        rate_per_second: float = 50.0,
        call_log: Optional[Path] = None,
        timeout: float = 60.0,
    ):
        super().__init__()
        self.endpoints = endpoints
        self.cache = cache
        self.max_attempts = max_attempts
        self.backoff = backoff
        self.timeout = timeout
        self.call_log = Path(call_log) if call_log else None
        self._buckets = {
            role: _TokenBucket(rate_per_second, max(rate_per_second, 1.0))
            for role in endpoints
        }
        self.attempt_count = 0

    def _endpoint(self, role: str) -> EndpointRole:
        try:
            return self.endpoints[role]
        except KeyError:
            raise GatewayError(f"no endpoint configured for role {role!r}") from None

    def _headers(self, endpoint: EndpointRole) -> dict:
        headers = {"Content-Type": "application/json"}
        if endpoint.api_key_env:
            key = os.environ.get(endpoint.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    def _post_with_retry(self, url: str, payload: dict, headers: dict) -> dict:
        last_error: Exception | None = None
        for attempt in range(self.max_attempts):
            self.attempt_count += 1
            try:
                reply = httpx.post(url, json=payload, headers=headers, timeout=self.timeout)
                if reply.status_code >= 500 or reply.status_code == 429:
                    raise TransportError(f"status {reply.status_code}")
                reply.raise_for_status()
                return reply.json()
            except (httpx.HTTPError, TransportError) as exc:
                last_error = exc
                if attempt + 1 < self.max_attempts:
                    time.sleep(self.backoff * (2 ** attempt))
        raise TransportError(f"request failed after {self.max_attempts} attempts: {last_error}")

    def chat(self, request: ChatRequest) -> ChatResponse:
        key = request.cache_key()
        if self.cache is not None:
            cached = self.cache.get(key)
            if cached is not None:
                self._record_call(key)
                return ChatResponse(**cached["response"])
        endpoint = self._endpoint(request.endpoint_role)
        self._buckets[request.endpoint_role].acquire()
        self._record_call(key)
        messages = []
        for m in request.messages:
            if m.image_ref:
                content = [
                    {"type": "text", "text": m.content},
                    {"type": "image_url", "image_url": {"url": m.image_ref}},
                ]
            else:
                content = m.content
            messages.append({"role": m.role, "content": content})
        payload = {
            "model": endpoint.model_name,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "x_cache_key": key,
            "x_rollout_index": request.rollout_index,
        }
        body = self._post_with_retry(
            endpoint.base_url.rstrip("/") + "/v1/chat/completions",
            payload,
            self._headers(endpoint),
        )
        choice = body["choices"][0]
        response = ChatResponse(
            text=choice["message"]["content"] or "",
            finish_reason=choice.get("finish_reason", "stop"),
            usage=body.get("usage"),
        )
        if self.cache is not None:
            self.cache.put(key, {"request": payload, "response": {
                "text": response.text,
                "finish_reason": response.finish_reason,
                "usage": response.usage,
            }})
        return response

    def retrieve(self, query: str, sources: Sequence[str] = ()) -> list:
        from funduskit.knowledge import ReferencePassage

        key = _retrieval_key(query, sources)
        if self.cache is not None:
            cached = self.cache.get(key, kind="retrieval")
            if cached is not None:
                self._record_call(key, kind="retrieval")
                return [ReferencePassage.from_dict(p) for p in cached["passages"]]
        endpoint = self._endpoint(RETRIEVAL)
        self._buckets[RETRIEVAL].acquire()
        self._record_call(key, kind="retrieval")
        body = self._post_with_retry(
            endpoint.base_url.rstrip("/") + "/v1/retrieve",
            {"query": query, "sources": list(sources)},
            self._headers(endpoint),
        )
        passages = [ReferencePassage.from_dict(p) for p in body.get("passages", [])]
        if self.cache is not None:
            self.cache.put(
                key,
                {"query": query, "passages": [p.to_dict() for p in passages]},
                kind="retrieval",
            )
        return passages


class ScriptedGateway(Gateway):
    """In-process gateway driven by a responder callable; used by tests and
    offline fixtures. The responder gets the ChatRequest and returns reply
    text (or raises)."""

    def __init__(
        self,
        responder: Callable[[ChatRequest], str],
        retriever: Optional[Callable[[str, Sequence[str]], list]] = None,
    ):
        super().__init__()
        self.responder = responder
        self.retriever = retriever

    def chat(self, request: ChatRequest) -> ChatResponse:
        self._record_call(request.cache_key())
        result = self.responder(request)
        if isinstance(result, ChatResponse):
            return result
        return ChatResponse(text=result)

    def retrieve(self, query: str, sources: Sequence[str] = ()) -> list:
        self._record_call(_retrieval_key(query, sources), kind="retrieval")
        if self.retriever is None:
            return []
        return self.retriever(query, sources)


def record_chat_fixture(cache: ReplayCache, request: ChatRequest, text: str) -> str:
    """Author a replay-cache entry for a request; returns the cache key."""
    key = request.cache_key()
    cache.put(key, {"response": {"text": text, "finish_reason": "stop", "usage": None}})
    return key


def record_retrieval_fixture(cache: ReplayCache, query: str, sources: Sequence[str],
                             passages: Sequence) -> str:
    key = _retrieval_key(query, sources)
    cache.put(
        key,
        {"query": query, "passages": [p.to_dict() for p in passages]},
        kind="retrieval",
    )
    return key
