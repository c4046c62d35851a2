"""Chat and embedding backends behind one interface.

Three backends are available:

* ``http``: an OpenAI-compatible ``/chat/completions`` + ``/embeddings`` client
  with retry and exponential backoff.
* ``mock_scripted``: returns queued responses looked up by request key.
* ``mock_hash``: fully deterministic.  Chat is answered by the rule-based
  responder in :mod:`memweave.mock_agents`; embeddings are feature-hashed
  bags of words, so texts sharing words land close together.

Both mocks embed with the hashing scheme.
"""

from __future__ import annotations

import hashlib
import logging
import os
import random
import re
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Mapping, Sequence

import httpx
import numpy as np

from .errors import (
    BadStatus,
    DimensionMismatch,
    RateLimitedExhausted,
    ScriptExhausted,
    TransportError,
)

logger = logging.getLogger(__name__)

BACKENDS = ("http", "mock_scripted", "mock_hash")
_RETRY_STATUSES = frozenset({429, 500, 502, 503, 504})


@dataclass(frozen=True)
class ChatRequest:
    system_prompt: str
    user_content: str
    temperature: float = 0.0
    max_output_tokens: int = 1024
    seed: int | None = None
    # routing label for mocks and logs ("core", "judge", ...); never sent on the wire
    tag: str = ""

    def __post_init__(self):
        if not self.user_content:
            raise ValueError("user_content must be non-empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_output_tokens <= 0:
            raise ValueError("max_output_tokens must be positive")

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.system_prompt.encode("utf-8"))
        h.update(b"\x1f")
        h.update(self.user_content.encode("utf-8"))
        return h.hexdigest()[:16]


@dataclass
class GatewayConfig:
    backend: str = "mock_hash"
    base_url: str = "http://localhost:8000/v1"
    model_name: str = "mock"
    embedding_model: str = "text-embedding-3-small"
    api_key_env_var: str = "OPENAI_API_KEY"
    timeout_ms: int = 60_000
    max_retries: int = 3
    backoff_base_ms: float = 250.0
    max_in_flight: int = 8
    embed_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.backend not in BACKENDS:
            raise ValueError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be > 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    @classmethod
    def from_dict(cls, d: Mapping) -> "GatewayConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown gateway settings: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# hashing embedder

_WORD = re.compile(r"\w+", re.UNICODE)


@lru_cache(maxsize=65536)
def _token_vector(token: str, dim: int, seed: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}\x1f{token}".encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    vec = rng.standard_normal(dim)
    vec.setflags(write=False)
    return vec


def hash_embed(text: str, dim: int = 64, seed: int = 0) -> np.ndarray:
    """Deterministic unit vector: normalized sum of per-word pseudo-random vectors."""
    tokens = _WORD.findall(text.lower()) or ["\x00empty"]
    vec = np.zeros(dim)
    for tok in tokens:
        vec += _token_vector(tok, dim, seed)
    return vec / np.linalg.norm(vec)


# ---------------------------------------------------------------------------
# backends


class ScriptedResponder:
    """Queued responses keyed by request.

    Lookup order for each request: ``"<tag>#<seed>"``, the prompt fingerprint,
    ``"<tag>"``, then ``"*"``.  Each hit pops the head of that queue.
    """

    def __init__(self, script: Mapping[str, Sequence[str]] | Sequence[str]):
        if isinstance(script, Mapping):
            self._queues = {k: deque(v) for k, v in script.items()}
        else:
            self._queues = {"*": deque(script)}
        self._lock = threading.Lock()
        self.calls: list[ChatRequest] = []

    def __call__(self, req: ChatRequest) -> str:
        keys = [f"{req.tag}#{req.seed}", req.fingerprint(), req.tag, "*"]
        with self._lock:
            self.calls.append(req)
            for key in keys:
                queue = self._queues.get(key)
                if queue:
                    return queue.popleft()
        raise ScriptExhausted(f"no scripted response left for tag={req.tag!r} seed={req.seed}")

    def remaining(self) -> dict[str, int]:
        with self._lock:
            return {k: len(q) for k, q in self._queues.items() if q}


class _HttpBackend:
    def __init__(self, cfg: GatewayConfig, sleep: Callable[[float], None], transport=None):
        self.cfg = cfg
        self._sleep = sleep
        self._client = httpx.Client(timeout=cfg.timeout_ms / 1000.0, transport=transport)
        self._rng = random.Random(cfg.seed)

    def _secret(self) -> str:
        return os.environ.get(self.cfg.api_key_env_var, "")

    def _redact(self, text: str) -> str:
        secret = self._secret()
        return text.replace(secret, "***") if secret else text

    def post(self, path: str, payload: dict) -> dict:
        url = self.cfg.base_url.rstrip("/") + path
        shown = self._redact(url)  # the only form of the URL that reaches logs and errors
        headers = {"Content-Type": "application/json"}
        if self._secret():
            headers["Authorization"] = f"Bearer {self._secret()}"
        last_status = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                delay = self.cfg.backoff_base_ms / 1000.0 * 2 ** (attempt - 1)
                self._sleep(delay + self._rng.uniform(0, delay))
            try:
                resp = self._client.post(url, json=payload, headers=headers)
            except httpx.HTTPError as exc:
                last_status = None
                logger.warning("POST %s failed (attempt %d): %s", shown, attempt + 1, type(exc).__name__)
                if attempt == self.cfg.max_retries:
                    raise TransportError(f"POST {shown} failed: {type(exc).__name__}") from None
                continue
            if resp.status_code == 200:
                try:
                    return resp.json()
                except ValueError:
                    raise TransportError(f"POST {shown} returned a non-JSON body") from None
            last_status = resp.status_code
            if resp.status_code not in _RETRY_STATUSES:
                raise BadStatus(resp.status_code, f"POST {shown} -> HTTP {resp.status_code}")
            logger.warning("POST %s -> HTTP %d (attempt %d)", shown, resp.status_code, attempt + 1)
        if last_status == 429:
            raise RateLimitedExhausted(f"POST {shown} still rate limited after {self.cfg.max_retries} retries")
        raise BadStatus(last_status or 0, f"POST {shown} -> HTTP {last_status} after {self.cfg.max_retries} retries")

    def chat(self, req: ChatRequest) -> str:
        payload = {
            "model": self.cfg.model_name,
            "messages": [
                {"role": "system", "content": req.system_prompt},
                {"role": "user", "content": req.user_content},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        if req.seed is not None:
            payload["seed"] = req.seed
        body = self.post("/chat/completions", payload)
        try:
            return body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise TransportError("chat response missing choices[0].message.content") from None

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        body = self.post("/embeddings", {"model": self.cfg.embedding_model, "input": list(texts)})
        try:
            data = sorted(body["data"], key=lambda d: d.get("index", 0))
            vectors = [d["embedding"] for d in data]
        except (KeyError, TypeError):
            raise TransportError("embedding response missing data[].embedding") from None
        if len(vectors) != len(texts):
            raise DimensionMismatch(f"got {len(vectors)} embeddings for {len(texts)} inputs")
        dims = {len(v) for v in vectors}
        if len(dims) != 1:
            raise DimensionMismatch(f"inconsistent embedding dimensions {sorted(dims)}")
        arr = np.asarray(vectors, dtype=np.float64)
        return arr / np.linalg.norm(arr, axis=1, keepdims=True)


class Gateway:
    """One configured model endpoint.  Safe to share across threads."""

    def __init__(
        self,
        config: GatewayConfig | None = None,
        *,
        script: Mapping[str, Sequence[str]] | Sequence[str] | None = None,
        responder: Callable[[ChatRequest], str] | None = None,
        sleep: Callable[[float], None] = time.sleep,
        transport: httpx.BaseTransport | None = None,
    ):
        self.config = config or GatewayConfig()
        self._slots = threading.BoundedSemaphore(self.config.max_in_flight)
        self._http = None
        self.calls: dict[str, int] = defaultdict(int)
        if self.config.backend == "http":
            self._http = _HttpBackend(self.config, sleep, transport)
            self._responder = None
        elif self.config.backend == "mock_scripted":
            self._responder = responder or ScriptedResponder(script or {})
        else:
            if responder is None:
                from .mock_agents import HeuristicResponder

                responder = HeuristicResponder(seed=self.config.seed)
            self._responder = responder

    @classmethod
    def mock(cls, seed: int = 0, **kwargs) -> "Gateway":
        return cls(GatewayConfig(backend="mock_hash", seed=seed), **kwargs)

    @classmethod
    def scripted(cls, script, **kwargs) -> "Gateway":
        return cls(GatewayConfig(backend="mock_scripted"), script=script, **kwargs)

    @property
    def responder(self):
        return self._responder

    def chat(self, req: ChatRequest) -> str:
        with self._slots:
            self.calls[req.tag or "chat"] += 1
            if self._http is not None:
                return self._http.chat(req)
            return self._responder(req)

    def embed(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        if not texts:
            raise ValueError("embed() needs at least one text")
        with self._slots:
            if self._http is not None:
                return self._http.embed(texts)
            dim, seed = self.config.embed_dim, self.config.seed
            return np.vstack([hash_embed(t, dim, seed) for t in texts])

    __call__ = embed
