"""Async client for OpenAI-compatible chat-completion services with image input.

Every endpoint gets one admission semaphore (``max_in_flight``) and one token
bucket (``requests_per_minute``) per :class:`ChatClient`; both bounds apply to
all calls made through that client, however many ``fan_out`` calls overlap.
"""

from __future__ import annotations

import asyncio
import base64
import contextlib
import logging
import os
import random
import time
from dataclasses import dataclass
from typing import Any, Awaitable, Callable, Mapping, Sequence

import httpx

from .exceptions import AuthMissing, ConfigInvalid, EndpointError, ExhaustedRetries, NonRetryable

log = logging.getLogger(__name__)

BACKOFF_CAP_S = 60.0


@dataclass(frozen=True)
class EndpointConfig:
    id: str
    base_url: str
    model_name: str
    api_key_env: str | None = None
    max_in_flight: int = 4
    requests_per_minute: int | None = None  # None means unlimited
    timeout: float = 120.0
    max_retries: int = 3
    retry_backoff_base: float = 1.0

    def __post_init__(self):
        if not self.id:
            raise ConfigInvalid("endpoint id must be non-empty")
        if self.max_in_flight < 1:
            raise ConfigInvalid(f"endpoint {self.id}: max_in_flight must be >= 1")
        if self.timeout <= 0:
            raise ConfigInvalid(f"endpoint {self.id}: timeout must be > 0")
        if self.max_retries < 0:
            raise ConfigInvalid(f"endpoint {self.id}: max_retries must be >= 0")
        if self.requests_per_minute is not None and self.requests_per_minute < 1:
            raise ConfigInvalid(f"endpoint {self.id}: requests_per_minute must be >= 1 or unset")
        if self.retry_backoff_base < 0:
            raise ConfigInvalid(f"endpoint {self.id}: retry_backoff_base must be >= 0")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EndpointConfig":
        known = {
            "id", "base_url", "model_name", "api_key_env", "max_in_flight",
            "requests_per_minute", "timeout", "max_retries", "retry_backoff_base",
        }
        unknown = set(data) - known
        if unknown:
            raise ConfigInvalid(f"endpoint {data.get('id', '?')}: unknown keys {sorted(unknown)}")
        missing = {"id", "base_url", "model_name"} - set(data)
        if missing:
            raise ConfigInvalid(f"endpoint {data.get('id', '?')}: missing keys {sorted(missing)}")
        rpm = data.get("requests_per_minute")
        if rpm in ("unlimited", 0):
            rpm = None
        try:
            return cls(
                id=str(data["id"]),
                base_url=str(data["base_url"]),
                model_name=str(data["model_name"]),
                api_key_env=data.get("api_key_env"),
                max_in_flight=int(data.get("max_in_flight", 4)),
                requests_per_minute=None if rpm is None else int(rpm),
                timeout=float(data.get("timeout", 120.0)),
                max_retries=int(data.get("max_retries", 3)),
                retry_backoff_base=float(data.get("retry_backoff_base", 1.0)),
            )
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(f"endpoint {data.get('id', '?')}: {exc}") from exc

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/chat/completions"


@dataclass(frozen=True)
class ImagePart:
    data: bytes
    media_type: str = "image/png"

    def data_url(self) -> str:
        return f"data:{self.media_type};base64,{base64.b64encode(self.data).decode('ascii')}"


@dataclass(frozen=True)
class UserTurn:
    texts: tuple[str, ...] = ()
    images: tuple[ImagePart, ...] = ()


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_turns: tuple[UserTurn, ...]
    temperature: float = 0.2
    max_output_tokens: int = 1024
    seed: int | None = 0

    def __post_init__(self):
        if not self.user_turns:
            raise ValueError("chat request needs at least one user turn")
        for turn in self.user_turns:
            if any(not img.data for img in turn.images):
                raise ValueError("image parts must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")

    @classmethod
    def simple(cls, system_prompt: str, text: str, images: Sequence[ImagePart] = (), **kw) -> "ChatRequest":
        return cls(system_prompt, (UserTurn((text,), tuple(images)),), **kw)

    def to_body(self, model: str) -> dict:
        messages: list[dict] = []
        if self.system_prompt:
            messages.append({"role": "system", "content": self.system_prompt})
        for turn in self.user_turns:
            content: list[dict] = [{"type": "text", "text": t} for t in turn.texts]
            content += [{"type": "image_url", "image_url": {"url": img.data_url()}} for img in turn.images]
            messages.append({"role": "user", "content": content})
        body = {
            "model": model,
            "messages": messages,
            "temperature": self.temperature,
            "max_tokens": self.max_output_tokens,
            "stream": False,
        }
        if self.seed is not None:
            body["seed"] = self.seed
        return body


@dataclass(frozen=True)
class ChatResponse:
    endpoint_id: str
    text: str
    latency: float
    attempt_count: int
    usage: Mapping[str, int] | None = None


class TokenBucket:
    """Async token bucket; starts full, refills at ``rate_per_minute / 60`` tokens per second.

    Over any window of length T at most ``capacity + rate * T`` acquisitions succeed.
    """

    def __init__(self, rate_per_minute: float, capacity: float,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], Awaitable[Any]] = asyncio.sleep):
        if rate_per_minute <= 0 or capacity < 1:
            raise ValueError("token bucket needs positive rate and capacity >= 1")
        self.rate = rate_per_minute / 60.0
        self.capacity = float(capacity)
        self._tokens = float(capacity)
        self._clock = clock
        self._sleep = sleep
        self._last = clock()
        self._lock = asyncio.Lock()

    def _refill(self) -> None:
        now = self._clock()
        self._tokens = min(self.capacity, self._tokens + (now - self._last) * self.rate)
        self._last = now

    async def acquire(self) -> None:
        async with self._lock:
            while True:
                self._refill()
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                await self._sleep((1.0 - self._tokens) / self.rate)


class _Gate:
    def __init__(self, endpoint: EndpointConfig, clock, sleep):
        self.semaphore = asyncio.Semaphore(endpoint.max_in_flight)
        self.bucket = None
        if endpoint.requests_per_minute is not None:
            # burst capped at max_in_flight keeps any 60 s window within rpm + max_in_flight
            capacity = max(1, min(endpoint.max_in_flight, endpoint.requests_per_minute))
            self.bucket = TokenBucket(endpoint.requests_per_minute, capacity, clock=clock, sleep=sleep)

    @contextlib.asynccontextmanager
    async def slot(self):
        async with self.semaphore:
            if self.bucket is not None:
                await self.bucket.acquire()
            yield


RequestBuilder = Callable[[EndpointConfig], ChatRequest]
Slot = tuple[str, "ChatResponse | Exception"]


class ChatClient:
    """Shared client: one HTTP connection pool, per-endpoint admission and rate bounds.

    Use as an async context manager, or call :meth:`aclose` when done. ``transport``
    lets tests route requests to an in-process handler.
    """

    def __init__(self, *, transport: httpx.AsyncBaseTransport | None = None,
                 env: Mapping[str, str] | None = None,
                 rng: random.Random | None = None,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], Awaitable[Any]] = asyncio.sleep):
        self._transport = transport
        self._env = os.environ if env is None else env
        self._rng = rng or random.Random()
        self._clock = clock
        self._sleep = sleep
        self._http: httpx.AsyncClient | None = None
        self._gates: dict[str, _Gate] = {}
        self.calls: dict[str, int] = {}

    async def __aenter__(self) -> "ChatClient":
        return self

    async def __aexit__(self, *exc) -> None:
        await self.aclose()

    async def aclose(self) -> None:
        if self._http is not None:
            await self._http.aclose()
            self._http = None

    def _client(self) -> httpx.AsyncClient:
        if self._http is None:
            limits = httpx.Limits(max_connections=256, max_keepalive_connections=64)
            self._http = httpx.AsyncClient(transport=self._transport, limits=limits)
        return self._http

    def _gate(self, endpoint: EndpointConfig) -> _Gate:
        gate = self._gates.get(endpoint.id)
        if gate is None:
            gate = self._gates[endpoint.id] = _Gate(endpoint, self._clock, self._sleep)
        return gate

    def backoff_delay(self, endpoint: EndpointConfig, retry_index: int) -> float:
        """Full-jitter exponential backoff: uniform in [0, min(cap, base * 2**retry_index)]."""
        ceiling = min(BACKOFF_CAP_S, endpoint.retry_backoff_base * (2 ** retry_index))
        return self._rng.uniform(0.0, ceiling)

    def _headers(self, endpoint: EndpointConfig) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        if endpoint.api_key_env:
            key = self._env.get(endpoint.api_key_env)
            if not key:
                raise AuthMissing(endpoint.id, f"environment variable {endpoint.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        return headers

    async def send_chat(self, endpoint: EndpointConfig, request: ChatRequest) -> ChatResponse:
        headers = self._headers(endpoint)
        body = request.to_body(endpoint.model_name)
        gate = self._gate(endpoint)
        http = self._client()
        started = self._clock()
        attempt = 0
        while True:
            attempt += 1
            self.calls[endpoint.id] = self.calls.get(endpoint.id, 0) + 1
            cause: BaseException | str
            try:
                async with gate.slot():
                    resp = await http.post(endpoint.url, json=body, headers=headers, timeout=endpoint.timeout)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                cause = exc
            else:
                status = resp.status_code
                if 200 <= status < 300:
                    text, usage = _parse_completion(endpoint.id, resp)
                    return ChatResponse(endpoint.id, text, self._clock() - started, attempt, usage)
                if status == 429 or status >= 500:
                    cause = f"HTTP {status}"
                else:
                    raise NonRetryable(endpoint.id, f"HTTP {status}: {resp.text[:200]}", status)
            if attempt > endpoint.max_retries:
                raise ExhaustedRetries(endpoint.id, attempt, cause)
            delay = self.backoff_delay(endpoint, attempt - 1)
            log.debug("endpoint %s attempt %d failed (%s); retrying in %.2fs", endpoint.id, attempt, cause, delay)
            await self._sleep(delay)

    async def fan_out(self, endpoints: Sequence[EndpointConfig], build: RequestBuilder) -> list[Slot]:
        """Query every endpoint concurrently; one ``(endpoint_id, response-or-error)`` slot each, in input order."""
        if not endpoints:
            raise ValueError("fan_out needs at least one endpoint")

        async def one(ep: EndpointConfig):
            try:
                return await self.send_chat(ep, build(ep))
            except Exception as exc:  # per-slot isolation
                return exc

        results = await asyncio.gather(*(one(ep) for ep in endpoints))
        return [(ep.id, res) for ep, res in zip(endpoints, results)]


def _parse_completion(endpoint_id: str, resp: httpx.Response) -> tuple[str, dict | None]:
    try:
        payload = resp.json()
        text = payload["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise NonRetryable(endpoint_id, f"malformed completion body: {exc!r}") from exc
    if isinstance(text, list):  # some servers return content parts
        text = "".join(p.get("text", "") for p in text if isinstance(p, dict))
    if not isinstance(text, str):
        raise NonRetryable(endpoint_id, "completion content is not text")
    usage = payload.get("usage") if isinstance(payload, dict) else None
    return text, usage if isinstance(usage, dict) else None


async def send_chat(endpoint: EndpointConfig, request: ChatRequest, client: ChatClient | None = None) -> ChatResponse:
    if client is not None:
        return await client.send_chat(endpoint, request)
    async with ChatClient() as own:
        return await own.send_chat(endpoint, request)


async def fan_out(endpoints: Sequence[EndpointConfig], build: RequestBuilder,
                  client: ChatClient | None = None) -> list[Slot]:
    if client is not None:
        return await client.fan_out(endpoints, build)
    async with ChatClient() as own:
        return await own.fan_out(endpoints, build)


def is_error(slot_value: Any) -> bool:
    return isinstance(slot_value, Exception)


__all__ = [
    "ChatClient", "ChatRequest", "ChatResponse", "EndpointConfig", "EndpointError", "ImagePart",
    "TokenBucket", "UserTurn", "fan_out", "send_chat", "is_error",
]
