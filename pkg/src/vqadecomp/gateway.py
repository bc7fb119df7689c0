"""Chat-completions client with an on-disk response cache, retries and an in-flight bound."""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import os
import tempfile
import threading
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Mapping, Sequence, Union

logger = logging.getLogger(__name__)


class GatewayError(Exception):
    pass


class ConfigError(GatewayError):
    """Endpoint or credentials missing or rejected; never retried."""


class AuthError(ConfigError):
    pass


class TransportError(GatewayError):
    def __init__(self, message: str, retries: int = 0, status: int | None = None):
        self.retries = retries
        self.status = status
        super().__init__(message)


class TransientTransportError(Exception):
    """Raised by transports for connection-level failures worth retrying."""


@dataclass(frozen=True)
class TextPart:
    text: str


@dataclass(frozen=True)
class ImagePart:
    ref: str  # local file path or URL


Part = Union[TextPart, ImagePart]


def _file_sha256(path: str) -> str | None:
    try:
        with open(path, "rb") as fh:
            return hashlib.sha256(fh.read()).hexdigest()
    except OSError:
        return None


@dataclass(frozen=True)
class ChatRequest:
    model_id: str
    user_parts: tuple[Part, ...]
    system: str | None = None
    temperature: float = 0.0
    max_tokens: int = 512

    def canonical(self) -> dict:
        parts = []
        for p in self.user_parts:
            if isinstance(p, TextPart):
                parts.append({"type": "text", "text": p.text})
            else:
                parts.append({"type": "image", "ref": p.ref, "sha256": _file_sha256(p.ref)})
        return {
            "model_id": self.model_id,
            "system": self.system,
            "temperature": float(self.temperature),
            "max_tokens": int(self.max_tokens),
            "user_parts": parts,
        }

    @cached_property
    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    @classmethod
    def text(cls, model_id: str, text: str, images: Sequence[str] = (), **kw) -> "ChatRequest":
        parts = tuple(ImagePart(str(i)) for i in images) + (TextPart(text),)
        return cls(model_id=model_id, user_parts=parts, **kw)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    finish_reason: str | None = None
    latency_ms: float = 0.0
    usage: Mapping = field(default_factory=dict)
    cached: bool = False
    retries: int = 0
    digest: str = ""


@dataclass
class EndpointConfig:
    base_url: str
    model: str
    api_key: str | None = None
    api_key_env: str | None = None
    require_key: bool = True
    timeout: float = 120.0
    max_retries: int = 3
    backoff_base: float = 1.0
    backoff_max: float = 30.0
    image_mode: str = "base64"
    max_images: int | None = None

    def resolve_key(self) -> str | None:
        if self.api_key:
            return self.api_key
        if self.api_key_env:
            return os.environ.get(self.api_key_env) or None
        return None

    @property
    def url(self) -> str:
        base = self.base_url.rstrip("/")
        return base if base.endswith("/chat/completions") else base + "/chat/completions"


Transport = Callable[[str, Mapping, Mapping, float], "tuple[int, dict | None]"]


class HttpTransport:
    """POST JSON with httpx; connection problems surface as TransientTransportError."""

    def __init__(self):
        import httpx

        self._httpx = httpx
        self._client = httpx.Client()

    def __call__(self, url, headers, payload, timeout):
        try:
            resp = self._client.post(url, headers=dict(headers), json=payload, timeout=timeout)
        except self._httpx.TransportError as exc:
            raise TransientTransportError(str(exc)) from exc
        try:
            body = resp.json()
        except ValueError:
            body = None
        return resp.status_code, body

    def close(self):
        self._client.close()


def downsample(items: Sequence, limit: int | None) -> list:
    """Keep at most ``limit`` items with a uniform stride (floor(j * n / limit))."""
    items = list(items)
    if limit is None or len(items) <= limit:
        return items
    n = len(items)
    return [items[j * n // limit] for j in range(limit)]


class ResponseCache:
    """Content-addressed records, one JSON file per request digest."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, digest: str) -> Path:
        return self.root / digest[:2] / f"{digest}.json"

    def get(self, digest: str) -> dict | None:
        try:
            return json.loads(self._path(digest).read_text("utf-8"))
        except FileNotFoundError:
            return None
        except (OSError, json.JSONDecodeError):
            logger.warning("ignoring unreadable cache record %s", digest)
            return None

    def put(self, digest: str, record: Mapping) -> None:
        path = self._path(digest)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                json.dump(record, fh, sort_keys=True, ensure_ascii=False)
            os.replace(tmp, path)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise


class Gateway:
    """Shared client for every model role.

    ``endpoints`` maps a model id to its :class:`EndpointConfig`.  At most
    ``max_in_flight`` network calls are outstanding at once, across threads.
    """

    def __init__(
        self,
        endpoints: Mapping[str, EndpointConfig],
        cache_dir: str | Path | None = None,
        transport: Transport | None = None,
        max_in_flight: int = 8,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self.endpoints = dict(endpoints)
        self.cache = ResponseCache(cache_dir) if cache_dir is not None else None
        self._transport = transport
        self._sem = threading.BoundedSemaphore(max_in_flight)
        self._lock = threading.Lock()
        self._sleep = sleep
        self.telemetry: Counter = Counter()

    @property
    def transport(self) -> Transport:
        if self._transport is None:
            self._transport = HttpTransport()
        return self._transport

    def _count(self, key: str, n: int = 1):
        with self._lock:
            self.telemetry[key] += n

    def endpoint(self, model_id: str) -> EndpointConfig:
        try:
            return self.endpoints[model_id]
        except KeyError:
            raise ConfigError(f"no endpoint configured for model {model_id!r}") from None

    def check_credentials(self, model_ids) -> None:
        """Fail before any network traffic if a model lacks an endpoint or key."""
        for model_id in model_ids:
            ep = self.endpoint(model_id)
            if ep.require_key and not ep.resolve_key():
                where = f"environment variable {ep.api_key_env}" if ep.api_key_env else "config"
                raise ConfigError(f"no API key for model {model_id!r} (expected in {where})")

    def _payload(self, request: ChatRequest, ep: EndpointConfig) -> dict:
        images = [p for p in request.user_parts if isinstance(p, ImagePart)]
        keep = set(map(id, downsample(images, ep.max_images)))
        content = []
        for p in request.user_parts:
            if isinstance(p, TextPart):
                content.append({"type": "text", "text": p.text})
            elif id(p) in keep:
                content.append({"type": "image_url", "image_url": {"url": _image_url(p.ref, ep.image_mode)}})
        messages = []
        if request.system:
            messages.append({"role": "system", "content": request.system})
        messages.append({"role": "user", "content": content})
        return {
            "model": ep.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

    def chat(self, request: ChatRequest) -> ChatResponse:
        digest = request.digest
        if self.cache is not None:
            hit = self.cache.get(digest)
            if hit is not None:
                self._count("cache_hits")
                return ChatResponse(
                    text=hit["text"],
                    finish_reason=hit.get("finish_reason"),
                    latency_ms=hit.get("latency_ms", 0.0),
                    usage=hit.get("usage") or {},
                    cached=True,
                    digest=digest,
                )
        ep = self.endpoint(request.model_id)
        key = ep.resolve_key()
        if ep.require_key and not key:
            raise ConfigError(f"no API key for model {request.model_id!r}")
        headers = {"Content-Type": "application/json"}
        if key:
            headers["Authorization"] = f"Bearer {key}"
        payload = self._payload(request, ep)

        retries = 0
        while True:
            started = time.perf_counter()
            status, body, error = None, None, None
            with self._sem:
                self._count("requests")
                try:
                    status, body = self.transport(ep.url, headers, payload, ep.timeout)
                except TransientTransportError as exc:
                    error = str(exc)
            latency = (time.perf_counter() - started) * 1000.0
            if error is None and status in (401, 403):
                raise AuthError(f"endpoint rejected credentials for {request.model_id!r} (HTTP {status})")
            if error is None and status == 200:
                try:
                    choice = body["choices"][0]
                    text = choice["message"]["content"] or ""
                except (KeyError, IndexError, TypeError) as exc:
                    raise TransportError(f"malformed completion body: {exc}", retries, status) from None
                response = ChatResponse(
                    text=text,
                    finish_reason=choice.get("finish_reason"),
                    latency_ms=latency,
                    usage=body.get("usage") or {},
                    retries=retries,
                    digest=digest,
                )
                if self.cache is not None:
                    self.cache.put(
                        digest,
                        {
                            "digest": digest,
                            "model_id": request.model_id,
                            "text": text,
                            "finish_reason": response.finish_reason,
                            "usage": dict(response.usage),
                            "latency_ms": latency,
                        },
                    )
                return response
            transient = error is not None or status == 429 or (status is not None and status >= 500)
            reason = error or f"HTTP {status}"
            if not transient:
                raise TransportError(f"request failed: {reason}", retries, status)
            if retries >= ep.max_retries:
                self._count("failures")
                raise TransportError(f"gave up after {retries} retries: {reason}", retries, status)
            delay = min(ep.backoff_max, ep.backoff_base * (2**retries))
            retries += 1
            self._count("retries")
            logger.warning("transient failure for %s (%s); retry %d in %.1fs", request.model_id, reason, retries, delay)
            self._sleep(delay)

    def run_batch(self, requests: Sequence[ChatRequest], max_in_flight: int = 8) -> list:
        """Run requests concurrently; slot i holds the response or the exception for request i."""
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        requests = list(requests)
        if not requests:
            return []

        def one(req):
            try:
                return self.chat(req)
            except Exception as exc:  # reported per slot
                return exc

        with ThreadPoolExecutor(max_workers=min(max_in_flight, len(requests))) as pool:
            return list(pool.map(one, requests))


def _image_url(ref: str, mode: str) -> str:
    if mode == "url" or ref.startswith(("http://", "https://", "data:")):
        return ref
    mime = mimetypes.guess_type(ref)[0] or "image/jpeg"
    with open(ref, "rb") as fh:
        return f"data:{mime};base64,{base64.b64encode(fh.read()).decode('ascii')}"
