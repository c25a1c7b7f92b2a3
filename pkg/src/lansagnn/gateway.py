"""Chat-completion gateway: one interface over an OpenAI-compatible HTTP
backend and several deterministic offline backends, with content-addressed
caching, bounded-concurrency dispatch, and retry with exponential backoff.

Backend kinds:
  http_openai_compatible  POST {base_url}/chat/completions, bearer auth
  oracle_ep               "True"/"False" from hidden labels of a node pair
  oracle_extract          deterministic category + shared-evidence text
  fixed_text              constant reply, for ablation baselines
  replay                  cache-only; never generates, never touches network
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import requests

from .errors import (
    AuthMissing,
    BackendError,
    CacheMiss,
    ConfigError,
    NetworkExhausted,
    OracleNeedsLabels,
)
from .graph import TextAttributedGraph
from .templates import tokenize

BACKEND_KINDS = (
    "http_openai_compatible",
    "oracle_ep",
    "oracle_extract",
    "fixed_text",
    "replay",
)

DEFAULT_API_KEY_ENV = "LANSAGNN_API_KEY"


@dataclass(frozen=True)
class BackendConfig:
    kind: str
    base_url: str = ""
    api_key_env_var: str = DEFAULT_API_KEY_ENV
    model: str = "offline"
    max_inflight: int = 4
    max_retries: int = 5
    cache_dir: str | None = None
    fixed_text: str = "OK"
    max_tokens: int = 512
    temperature: float = 0.0
    timeout_s: float = 60.0
    retry_base_s: float = 1.0
    # replay serves the cache entries recorded under this kind's keyspace
    replay_source_kind: str = "http_openai_compatible"

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ConfigError(f"unknown backend kind {self.kind!r}")
        if self.max_inflight < 1:
            raise ConfigError("max_inflight must be >= 1")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")


@dataclass(frozen=True)
class ChatRequest:
    rendered_prompt: str
    model: str = "offline"
    max_tokens: int = 512
    temperature: float = 0.0
    template_hash: str = ""
    # context for the deterministic oracles; not part of the cache key
    bindings: Mapping[str, str] | None = None
    node_pair: tuple[int, int] | None = None

    def __post_init__(self):
        if not self.rendered_prompt:
            raise ConfigError("rendered_prompt must be non-empty")
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be positive")
        if self.temperature < 0:
            raise ConfigError("temperature must be non-negative")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    from_cache: bool


def cache_key(kind: str, request: ChatRequest) -> str:
    """Digest over exactly (kind, model, template hash, prompt, temperature,
    max_tokens); any change to one of these changes the key."""
    payload = json.dumps(
        [
            kind,
            request.model,
            request.template_hash,
            request.rendered_prompt,
            repr(request.temperature),
            request.max_tokens,
        ],
        ensure_ascii=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


class ResponseCache:
    """Content-addressed text cache: {dir}/{first2}/{digest}.txt + index.jsonl.

    Writes are atomic (tmp file + rename), so concurrent writers of the same
    key converge to a single value. With dir=None the cache is in-memory.
    """

    def __init__(self, cache_dir: str | Path | None):
        self.dir = Path(cache_dir) if cache_dir is not None else None
        self._mem: dict[str, str] = {}
        self._lock = threading.Lock()
        if self.dir is not None:
            self.dir.mkdir(parents=True, exist_ok=True)

    def _path(self, digest: str) -> Path:
        assert self.dir is not None
        return self.dir / digest[:2] / f"{digest}.txt"

    def get(self, digest: str) -> str | None:
        if self.dir is None:
            return self._mem.get(digest)
        p = self._path(digest)
        if p.exists():
            return p.read_text(encoding="utf-8")
        return None

    def put(self, digest: str, text: str, meta: Mapping | None = None) -> None:
        if self.dir is None:
            with self._lock:
                self._mem.setdefault(digest, text)
            return
        p = self._path(digest)
        if p.exists():
            return
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.parent / f".{digest}.{os.getpid()}.{threading.get_ident()}.tmp"
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, p)
        entry = {"digest": digest}
        if meta:
            entry.update(meta)
        line = json.dumps(entry, ensure_ascii=True, sort_keys=True) + "\n"
        with self._lock:
            with (self.dir / "index.jsonl").open("a", encoding="utf-8") as f:
                f.write(line)


def oracle_answer(
    kind: str,
    bindings: Mapping[str, str],
    labels: tuple[int, int] | None = None,
    label_name: str | None = None,
) -> str:
    """Deterministic test-oracle replies.

    oracle_ep answers "True" iff the two hidden labels are equal.
    oracle_extract names the category of node A and cites up to three
    lexically smallest tokens shared by both texts ("NONE" when disjoint).
    """
    if kind == "oracle_ep":
        if labels is None:
            raise OracleNeedsLabels("oracle_ep needs the labels of both nodes")
        return "True" if labels[0] == labels[1] else "False"
    if kind == "oracle_extract":
        if label_name is None:
            raise OracleNeedsLabels("oracle_extract needs the label name of node A")
        text_a = bindings.get("text_a", "")
        text_b = bindings.get("text_b", text_a)
        common = sorted(set(tokenize(text_a)) & set(tokenize(text_b)))
        evidence = ", ".join(common[:3]) if common else "NONE"
        return f"This node belongs to category {label_name}. Shared evidence: {evidence}."
    raise ConfigError(f"not an oracle kind: {kind!r}")


@dataclass
class GatewayStats:
    dispatches: int = 0
    cache_hits: int = 0
    network_requests: int = 0

    def merge(self, other: "GatewayStats") -> None:
        self.dispatches += other.dispatches
        self.cache_hits += other.cache_hits
        self.network_requests += other.network_requests


class Gateway:
    """Thread-safe completion dispatcher for one backend config.

    Oracle kinds need `oracle_graph` (labels and class names) to answer.
    `transport` can be swapped in tests to instrument the HTTP path.
    """

    def __init__(
        self,
        config: BackendConfig,
        oracle_graph: TextAttributedGraph | None = None,
        transport=None,
    ):
        self.config = config
        self.oracle_graph = oracle_graph
        self.cache = ResponseCache(config.cache_dir)
        self.stats = GatewayStats()
        self._stats_lock = threading.Lock()
        self._transport = transport or self._http_post
        if config.kind == "http_openai_compatible":
            if not config.base_url:
                raise ConfigError("http backend needs base_url")
            if not os.environ.get(config.api_key_env_var):
                raise AuthMissing(
                    f"environment variable {config.api_key_env_var} is not set"
                )

    # -- public API ---------------------------------------------------------

    def complete(self, request: ChatRequest) -> ChatResponse:
        kind = self.config.kind
        if kind == "replay":
            kind = self.config.replay_source_kind
        digest = cache_key(kind, request)
        cached = self.cache.get(digest)
        if cached is not None:
            with self._stats_lock:
                self.stats.cache_hits += 1
            return ChatResponse(text=cached, from_cache=True)
        if self.config.kind == "replay":
            raise CacheMiss(f"replay backend has no cached answer for {digest[:12]}")
        text = self._generate(request)
        self.cache.put(
            digest,
            text,
            meta={
                "kind": self.config.kind,
                "model": request.model,
                "template_hash": request.template_hash,
                "temperature": request.temperature,
                "max_tokens": request.max_tokens,
                "prompt_sha256": hashlib.sha256(
                    request.rendered_prompt.encode("utf-8")
                ).hexdigest(),
            },
        )
        return ChatResponse(text=text, from_cache=False)

    def complete_many(self, requests_: Sequence[ChatRequest]) -> list[ChatResponse]:
        """Dispatch with at most max_inflight in flight; results in input order."""
        if not requests_:
            return []
        if len(requests_) == 1 or self.config.max_inflight == 1:
            return [self.complete(r) for r in requests_]
        with ThreadPoolExecutor(max_workers=self.config.max_inflight) as pool:
            return list(pool.map(self.complete, requests_))

    # -- backends -----------------------------------------------------------

    def _generate(self, request: ChatRequest) -> str:
        with self._stats_lock:
            self.stats.dispatches += 1
        kind = self.config.kind
        if kind == "fixed_text":
            return self.config.fixed_text
        if kind in ("oracle_ep", "oracle_extract"):
            return self._oracle(kind, request)
        if kind == "http_openai_compatible":
            return self._http_with_retry(request)
        raise ConfigError(f"backend kind {kind!r} cannot generate")

    def _oracle(self, kind: str, request: ChatRequest) -> str:
        g = self.oracle_graph
        if g is None or g.labels is None:
            raise OracleNeedsLabels("gateway has no labeled graph for the oracle")
        if request.node_pair is None:
            raise OracleNeedsLabels("oracle request is missing node_pair")
        i, j = request.node_pair
        bindings = dict(request.bindings or {})
        bindings.setdefault("text_a", g.texts[i])
        bindings.setdefault("text_b", g.texts[j])
        if kind == "oracle_ep":
            return oracle_answer(kind, bindings, labels=(g.labels[i], g.labels[j]))
        return oracle_answer(kind, bindings, label_name=g.label_name(i))

    # -- HTTP path ----------------------------------------------------------

    def _http_post(self, url: str, headers: dict, body: dict) -> tuple[int, str]:
        resp = requests.post(
            url, headers=headers, json=body, timeout=self.config.timeout_s
        )
        return resp.status_code, resp.text

    def _http_with_retry(self, request: ChatRequest) -> str:
        cfg = self.config
        api_key = os.environ.get(cfg.api_key_env_var)
        if not api_key:
            raise AuthMissing(f"environment variable {cfg.api_key_env_var} is not set")
        url = cfg.base_url.rstrip("/") + "/chat/completions"
        headers = {
            "Authorization": f"Bearer {api_key}",
            "Content-Type": "application/json",
        }
        body = {
            "model": request.model,
            "messages": [{"role": "user", "content": request.rendered_prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        attempts = max(1, cfg.max_retries)
        delay = cfg.retry_base_s
        last_error = "no attempt made"
        for attempt in range(attempts):
            try:
                with self._stats_lock:
                    self.stats.network_requests += 1
                status, text = self._transport(url, headers, body)
            except (requests.RequestException, OSError) as e:
                last_error = f"transport error: {e}"
            else:
                if status == 200:
                    return self._parse_chat_body(text)
                last_error = f"HTTP {status}: {text[:200]}"
                if 400 <= status < 500 and status != 429:
                    raise BackendError(last_error)
            if attempt + 1 < attempts:
                # exponential backoff with +-20% jitter
                time.sleep(delay * random.uniform(0.8, 1.2))
                delay *= 2
        raise NetworkExhausted(f"gave up after {attempts} attempts; last: {last_error}")

    @staticmethod
    def _parse_chat_body(text: str) -> str:
        try:
            obj = json.loads(text)
            content = obj["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as e:
            raise BackendError(f"malformed chat completion body: {e}") from e
        if not isinstance(content, str):
            raise BackendError("chat completion content is not a string")
        return content


def complete(
    request: ChatRequest,
    config: BackendConfig,
    oracle_graph: TextAttributedGraph | None = None,
) -> ChatResponse:
    """One-shot form of Gateway.complete for callers without a long-lived gateway."""
    return Gateway(config, oracle_graph=oracle_graph).complete(request)
