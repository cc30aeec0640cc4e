"""Model backends: HTTP client, scripted mock, and record/replay cache.

All backends expose ``complete(request) -> VlmResponse``. Rate limiting and
bounded concurrency live in :func:`run_batch`; retries live in the HTTP
backend itself.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import os
import random
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Collection, Mapping, Optional, Sequence, Union

import httpx

from .errors import AuthMissing, CacheConflict, IoFailure, RateLimitExceeded, ReplayMiss, Transport
from .gaze import FrameGaze
from .prompts import PromptBundle, render_response


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.0
    max_output_tokens: int = 1024
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens < 1:
            raise ValueError("max_output_tokens must be positive")


@dataclass(frozen=True)
class VlmRequest:
    request_id: str
    bundle: PromptBundle
    model_id: str
    generation: GenerationParams
    media_checksums: tuple[str, ...]

    def summary(self) -> dict:
        return {
            "model_id": self.model_id,
            "strategy": self.bundle.strategy.name,
            "segment_id": self.bundle.segment_id,
            "template_version": self.bundle.template_version,
            "media_checksums": list(self.media_checksums),
            "generation": asdict(self.generation),
        }


@dataclass(frozen=True)
class VlmResponse:
    request_id: str
    text: str
    latency_ms: int = 0
    token_usage: Optional[Mapping[str, int]] = None
    backend_tag: str = ""

    def to_json(self) -> dict:
        return {
            "text": self.text,
            "latency_ms": self.latency_ms,
            "token_usage": dict(self.token_usage) if self.token_usage else None,
            "backend_tag": self.backend_tag,
        }


def file_checksum(path: Union[str, Path]) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    except OSError as exc:
        raise IoFailure(path, str(exc)) from exc
    return h.hexdigest()


def request_hash(bundle: PromptBundle, media_checksums: Sequence[str], model_id: str, generation: GenerationParams) -> str:
    """Stable content hash; media enter by checksum, never by path."""
    payload = {
        "strategy": bundle.strategy.name,
        "system_text": bundle.system_text,
        "user_text": bundle.user_text,
        "schema_hint": bundle.response_schema_hint,
        "blind_mapping": dict(sorted(bundle.blind_mapping.items())) if bundle.blind_mapping else None,
        "segment_id": bundle.segment_id,
        "template_version": bundle.template_version,
        "media": list(media_checksums),
        "model_id": model_id,
        "generation": asdict(generation),
    }
    blob = json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def make_request(
    bundle: PromptBundle,
    model_id: str,
    generation: GenerationParams = GenerationParams(),
    media_checksums: Optional[Sequence[str]] = None,
) -> VlmRequest:
    if media_checksums is None:
        media_checksums = [file_checksum(p) for p in bundle.media]
    sums = tuple(media_checksums)
    return VlmRequest(request_hash(bundle, sums, model_id, generation), bundle, model_id, generation, sums)


# --- clocks and rate limiting -------------------------------------------------------


class SystemClock:
    def now(self) -> float:
        return time.monotonic()

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class FakeClock:
    """Manually advanced clock; ``sleep`` jumps time forward instead of blocking."""

    def __init__(self, start: float = 0.0) -> None:
        self._t = start
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._t

    def sleep(self, seconds: float) -> None:
        with self._lock:
            self._t += max(0.0, seconds)

    def advance(self, seconds: float) -> None:
        self.sleep(seconds)


class RateLimiter:
    """Sliding-window limiter: at most ``limit`` admissions in any ``window_s``."""

    def __init__(self, limit: int, window_s: float = 60.0, clock=None, blocking: bool = True) -> None:
        if limit < 1:
            raise ValueError("rate limit must be >= 1")
        self.limit = limit
        self.window_s = window_s
        self.clock = clock or SystemClock()
        self.blocking = blocking
        self._times: deque[float] = deque()
        self._lock = threading.Lock()

    def acquire(self) -> float:
        while True:
            with self._lock:
                now = self.clock.now()
                while self._times and self._times[0] <= now - self.window_s:
                    self._times.popleft()
                if len(self._times) < self.limit:
                    self._times.append(now)
                    return now
                if not self.blocking:
                    raise RateLimitExceeded(f"more than {self.limit} requests per {self.window_s:g} s")
                wait = self._times[0] + self.window_s - now
            self.clock.sleep(wait)


# --- configuration -----------------------------------------------------------------


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    base_backoff_ms: int = 500
    jitter: float = 0.2
    max_backoff_ms: int = 60_000

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if not 0 <= self.jitter <= 1:
            raise ValueError("jitter must lie in [0, 1]")

    def backoff_ms(self, attempt: int, rng: random.Random) -> float:
        """Delay after failed attempt number ``attempt`` (1-based)."""
        base = min(self.max_backoff_ms, self.base_backoff_ms * 2 ** (attempt - 1))
        return base * (1 + self.jitter * (2 * rng.random() - 1))


@dataclass(frozen=True)
class BackendConfig:
    endpoint_url: str = ""
    auth_env_var: str = "VLM_API_KEY"
    adapter: str = "generic"
    max_in_flight: int = 4
    rate_limit_per_min: Optional[int] = 60
    retry: RetryPolicy = RetryPolicy()
    timeout_ms: int = 120_000
    blocking_rate_limit: bool = True

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    @classmethod
    def from_mapping(cls, cfg: Mapping) -> "BackendConfig":
        cfg = dict(cfg)
        retry = RetryPolicy(**cfg.pop("retry", {}))
        known = {k: v for k, v in cfg.items() if k in cls.__dataclass_fields__}
        return cls(retry=retry, **known)


# --- response cache -------------------------------------------------------------------


class ResponseCache:
    """Append-only JSON-lines store of responses keyed by ``request_id``."""

    def __init__(self, path: Optional[Union[str, Path]] = None) -> None:
        self.path = Path(path) if path is not None else None
        self._entries: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                rec = json.loads(line)
                rid = rec["request_id"]
                prev = self._entries.get(rid)
                if prev is not None and prev["response"]["text"] != rec["response"]["text"]:
                    raise CacheConflict(rid)
                self._entries.setdefault(rid, rec)

    def __contains__(self, request_id: str) -> bool:
        return request_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, request_id: str) -> Optional[dict]:
        return self._entries.get(request_id)

    def put(self, request: VlmRequest, response: VlmResponse) -> bool:
        """Store a pair; returns False when an identical entry already existed."""
        rec = {"request_id": request.request_id, "request": request.summary(), "response": response.to_json()}
        with self._lock:
            prev = self._entries.get(request.request_id)
            if prev is not None:
                if prev["response"]["text"] != response.text:
                    raise CacheConflict(request.request_id)
                return False
            if self.path is not None:
                try:
                    self.path.parent.mkdir(parents=True, exist_ok=True)
                    with open(self.path, "a", encoding="utf-8") as fh:
                        fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
                except OSError as exc:
                    raise IoFailure(self.path, str(exc)) from exc
            self._entries[request.request_id] = rec
            return True


def record(request: VlmRequest, response: VlmResponse, cache: ResponseCache) -> None:
    if response.request_id != request.request_id:
        raise ValueError("response does not belong to this request")
    cache.put(request, response)


# --- backends ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GazeStats:
    on_content_fraction: float
    dispersion: float
    n_frames: int


def gaze_statistics(
    frame_gaze: Sequence[FrameGaze], content_box: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)
) -> GazeStats:
    """Fraction of frames whose gaze falls inside ``content_box`` and RMS spread.

    Frames without gaze count as off-content.
    """
    x0, y0, x1, y1 = content_box
    pts = [f.point for f in frame_gaze if f.point is not None]
    n = len(frame_gaze)
    if n == 0:
        return GazeStats(0.0, 0.0, 0)
    inside = sum(1 for x, y in pts if x0 <= x <= x1 and y0 <= y <= y1)
    if pts:
        mx = math.fsum(p[0] for p in pts) / len(pts)
        my = math.fsum(p[1] for p in pts) / len(pts)
        disp = math.sqrt(math.fsum((x - mx) ** 2 + (y - my) ** 2 for x, y in pts) / len(pts))
    else:
        disp = 0.0
    return GazeStats(inside / n, disp, n)


class Backend:
    tag = "backend"

    def complete(self, request: VlmRequest) -> VlmResponse:  # pragma: no cover - interface
        raise NotImplementedError


class MockBackend(Backend):
    """Deterministic stand-in for a model, driven by gaze statistics.

    A segment is called Attentive when its on-content fraction reaches
    ``threshold``. ``script`` (a mapping or a callable on the request)
    overrides the decision; segments listed in ``fail`` raise ``Transport``.
    """

    tag = "mock"

    def __init__(
        self,
        stats: Optional[Mapping[str, GazeStats]] = None,
        threshold: float = 0.6,
        script: Union[Mapping[str, int], Callable[[VlmRequest], int], None] = None,
        fail: Collection[str] = (),
        delay_s: float = 0.0,
    ) -> None:
        self.stats = dict(stats or {})
        self.threshold = threshold
        self.script = script
        self.fail = set(fail)
        self.delay_s = delay_s
        self.calls = 0
        self.max_concurrency = 0
        self._active = 0
        self._lock = threading.Lock()

    def _decide(self, request: VlmRequest) -> tuple[int, Optional[GazeStats]]:
        seg = request.bundle.segment_id
        st = self.stats.get(seg)
        if callable(self.script):
            return int(self.script(request)), st
        if self.script is not None and seg in self.script:
            return int(self.script[seg]), st
        if st is None:
            raise Transport(f"mock backend has no statistics for segment {seg!r}")
        return (1 if st.on_content_fraction >= self.threshold else 0), st

    def complete(self, request: VlmRequest) -> VlmResponse:
        with self._lock:
            self.calls += 1
            self._active += 1
            self.max_concurrency = max(self.max_concurrency, self._active)
        try:
            if self.delay_s:
                time.sleep(self.delay_s)
            if request.bundle.segment_id in self.fail:
                raise Transport(f"scripted failure for {request.bundle.segment_id!r}")
            label, st = self._decide(request)
            frac = st.on_content_fraction if st is not None else float(label)
            relation = ">=" if frac >= self.threshold else "<"
            text = render_response(
                label,
                request.bundle.strategy,
                request.bundle.blind_mapping,
                alignment_score=int(round(100 * frac)),
                justification=f"On-content gaze fraction {frac:.3f} {relation} {self.threshold:g}.",
                evidence=[f"gaze inside the content area on {frac:.1%} of frames"],
            )
            return VlmResponse(request.request_id, text, 0, None, self.tag)
        finally:
            with self._lock:
                self._active -= 1


class ReplayBackend(Backend):
    """Serves responses from a :class:`ResponseCache`; never touches the network."""

    tag = "replay"

    def __init__(self, cache: ResponseCache) -> None:
        self.cache = cache

    def complete(self, request: VlmRequest) -> VlmResponse:
        rec = self.cache.get(request.request_id)
        if rec is None:
            raise ReplayMiss(request.request_id)
        resp = rec["response"]
        return VlmResponse(request.request_id, resp["text"], 0, resp.get("token_usage"), self.tag)


class RecordingBackend(Backend):
    """Wraps another backend and records every successful response."""

    def __init__(self, inner: Backend, cache: ResponseCache) -> None:
        self.inner = inner
        self.cache = cache
        self.tag = inner.tag

    def complete(self, request: VlmRequest) -> VlmResponse:
        resp = self.inner.complete(request)
        record(request, resp, self.cache)
        return resp


_MIME = {
    ".mp4": "video/mp4",
    ".webm": "video/webm",
    ".mov": "video/quicktime",
    ".avi": "video/x-msvideo",
    ".png": "image/png",
    ".jpg": "image/jpeg",
    ".jpeg": "image/jpeg",
}


def _media_parts(paths: Sequence[str]) -> list[dict]:
    parts = []
    for p in paths:
        mime = _MIME.get(Path(p).suffix.lower())
        if mime is None:
            raise Transport(f"unsupported media type for upload: {p}")
        try:
            data = Path(p).read_bytes()
        except OSError as exc:
            raise IoFailure(p, str(exc)) from exc
        parts.append({"mime_type": mime, "data": base64.b64encode(data).decode("ascii")})
    return parts


class GenericAdapter:
    """Plain JSON wire format: ``{model, system, prompt, media[], generation}`` in, ``{text}`` out."""

    name = "generic"

    def url(self, endpoint: str, model_id: str) -> str:
        return endpoint

    def headers(self, key: str) -> dict:
        return {"Authorization": f"Bearer {key}"}

    def body(self, request: VlmRequest) -> dict:
        b = request.bundle
        return {
            "model": request.model_id,
            "system": b.system_text,
            "prompt": b.user_text,
            "media": _media_parts(b.media),
            "generation": asdict(request.generation),
        }

    def parse(self, payload: dict) -> tuple[str, Optional[dict]]:
        if not isinstance(payload.get("text"), str):
            raise Transport("response body lacks a 'text' field")
        return payload["text"], payload.get("usage")


class GeminiAdapter:
    """``generateContent``-style wire format (inline media parts, candidates out)."""

    name = "gemini"

    def url(self, endpoint: str, model_id: str) -> str:
        return f"{endpoint.rstrip('/')}/models/{model_id}:generateContent"

    def headers(self, key: str) -> dict:
        return {"x-goog-api-key": key}

    def body(self, request: VlmRequest) -> dict:
        b = request.bundle
        parts = [{"inline_data": p} for p in _media_parts(b.media)]
        parts.append({"text": b.user_text})
        gen = {"temperature": request.generation.temperature, "maxOutputTokens": request.generation.max_output_tokens}
        if request.generation.seed is not None:
            gen["seed"] = request.generation.seed
        return {
            "systemInstruction": {"parts": [{"text": b.system_text}]},
            "contents": [{"role": "user", "parts": parts}],
            "generationConfig": gen,
        }

    def parse(self, payload: dict) -> tuple[str, Optional[dict]]:
        try:
            parts = payload["candidates"][0]["content"]["parts"]
        except (KeyError, IndexError, TypeError):
            raise Transport("response has no candidate content") from None
        text = "".join(p.get("text", "") for p in parts)
        usage = payload.get("usageMetadata")
        if usage:
            usage = {
                "input_tokens": usage.get("promptTokenCount", 0),
                "output_tokens": usage.get("candidatesTokenCount", 0),
            }
        return text, usage


ADAPTERS = {"generic": GenericAdapter, "gemini": GeminiAdapter}

_RETRYABLE_STATUS = {429, 500, 502, 503, 504}


class HttpBackend(Backend):
    """Generic "video + text in, text out" HTTP client with retries."""

    def __init__(
        self,
        config: BackendConfig,
        client: Optional[httpx.Client] = None,
        sleep: Callable[[float], None] = time.sleep,
    ) -> None:
        if config.adapter not in ADAPTERS:
            raise ValueError(f"unknown adapter {config.adapter!r}")
        self.config = config
        self.adapter = ADAPTERS[config.adapter]()
        self.tag = f"http:{self.adapter.name}"
        self._client = client or httpx.Client(timeout=config.timeout_ms / 1000)
        self._sleep = sleep

    def complete(self, request: VlmRequest) -> VlmResponse:
        key = os.environ.get(self.config.auth_env_var)
        if not key:
            raise AuthMissing(f"environment variable {self.config.auth_env_var} is not set")
        url = self.adapter.url(self.config.endpoint_url, request.model_id)
        body = self.adapter.body(request)
        headers = self.adapter.headers(key)
        # jitter is seeded per request so retry schedules are reproducible
        rng = random.Random(request.request_id)
        retry = self.config.retry
        last = ""
        for attempt in range(1, retry.max_attempts + 1):
            t0 = time.monotonic()
            delay_floor = 0.0
            try:
                r = self._client.post(url, json=body, headers=headers, timeout=self.config.timeout_ms / 1000)
            except httpx.TimeoutException as exc:
                last = f"timeout: {exc}"
            except httpx.TransportError as exc:
                last = f"transport error: {exc}"
            else:
                if r.status_code == 200:
                    try:
                        payload = r.json()
                    except ValueError:
                        raise Transport("response body is not JSON") from None
                    text, usage = self.adapter.parse(payload)
                    latency = int((time.monotonic() - t0) * 1000)
                    return VlmResponse(request.request_id, text, latency, usage, self.tag)
                last = f"HTTP {r.status_code}: {r.text[:200]}"
                if r.status_code not in _RETRYABLE_STATUS:
                    raise Transport(last)
                retry_after = r.headers.get("retry-after")
                if retry_after and retry_after.replace(".", "", 1).isdigit():
                    delay_floor = float(retry_after)
            if attempt < retry.max_attempts:
                self._sleep(max(delay_floor, retry.backoff_ms(attempt, rng) / 1000))
        raise Transport(f"giving up after {retry.max_attempts} attempts; last error {last}")


# --- dispatch ----------------------------------------------------------------------------


def classify(request: VlmRequest, backend: Backend, limiter: Optional[RateLimiter] = None) -> VlmResponse:
    if limiter is not None:
        limiter.acquire()
    resp = backend.complete(request)
    if resp.request_id != request.request_id:
        raise Transport("backend answered a different request")
    return resp


@dataclass(frozen=True)
class RequestFailure:
    request_id: str
    error_type: str
    message: str

    def to_json(self) -> dict:
        return {"request_id": self.request_id, "error_type": self.error_type, "message": self.message}


def run_batch(
    requests: Sequence[VlmRequest],
    backend: Backend,
    budget: BackendConfig = BackendConfig(),
    progress: Optional[Callable[[int, int, object], None]] = None,
    clock=None,
) -> list[Union[VlmResponse, RequestFailure]]:
    """Resolve every request, in input order, never aborting on single failures."""
    ids = [r.request_id for r in requests]
    if len(set(ids)) != len(ids):
        raise ValueError("run_batch requires distinct request ids")
    limiter = None
    if budget.rate_limit_per_min:
        limiter = RateLimiter(budget.rate_limit_per_min, 60.0, clock, blocking=budget.blocking_rate_limit)
    results: list = [None] * len(requests)
    done = 0
    lock = threading.Lock()

    def one(i: int) -> None:
        nonlocal done
        req = requests[i]
        try:
            out = classify(req, backend, limiter)
        except Exception as exc:  # partial-results contract: record and continue
            out = RequestFailure(req.request_id, type(exc).__name__, str(exc))
        results[i] = out
        if progress is not None:
            with lock:
                done += 1
                progress(done, len(requests), out)

    if budget.max_in_flight == 1 or len(requests) <= 1:
        for i in range(len(requests)):
            one(i)
    else:
        with ThreadPoolExecutor(max_workers=budget.max_in_flight) as pool:
            list(pool.map(one, range(len(requests))))
    return results
