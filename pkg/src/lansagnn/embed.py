"""Per-node document aggregation and embedding.

A node's document is its original text concatenated with its incoming
extracted messages (ascending neighbor order, fixed separator). Documents
are embedded either by a deterministic FNV-1a feature-hashing bag of words
or by an OpenAI-compatible embeddings service.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import requests

from .errors import (
    BackendError,
    DimensionMismatch,
    EmptyDocument,
    NetworkExhausted,
)
from .gateway import BackendConfig
from .templates import tokenize

MESSAGE_SEPARATOR = "\n[MSG]\n"

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class AggregatedDocument:
    node: int
    text: str
    parts: int  # number of neighbor messages joined in
    origin_included: bool


@dataclass(frozen=True)
class EmbeddingMatrix:
    rows: np.ndarray  # (n, d) float64
    d: int
    embedder_id: str

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[1] != self.d:
            raise DimensionMismatch(
                f"rows shape {self.rows.shape} does not match d={self.d}"
            )
        if not np.all(np.isfinite(self.rows)):
            raise DimensionMismatch("embedding matrix contains non-finite entries")

    @property
    def n(self) -> int:
        return int(self.rows.shape[0])


def aggregate_text(
    node: int,
    origin_text: str,
    messages: Sequence[tuple[int, str]],
    include_origin: bool = True,
) -> AggregatedDocument:
    """Join origin text (optional) and messages sorted ascending by sender id."""
    ordered = sorted(messages)
    pieces = ([origin_text] if include_origin else []) + [m for _, m in ordered]
    if not pieces:
        raise EmptyDocument(
            f"node {node} has no origin text and no messages; add a self message first"
        )
    return AggregatedDocument(
        node=node,
        text=MESSAGE_SEPARATOR.join(pieces),
        parts=len(ordered),
        origin_included=include_origin,
    )


def fnv1a64(token: str) -> int:
    h = FNV_OFFSET
    for b in token.encode("utf-8"):
        h ^= b
        h = (h * FNV_PRIME) & _U64
    return h


def embed_hashing(doc: AggregatedDocument, d: int = 256) -> np.ndarray:
    """Term-frequency feature hashing, L2-normalized (zero stays zero)."""
    if d < 2:
        raise DimensionMismatch(f"hashing dimension must be >= 2, got {d}")
    vec = np.zeros(d, dtype=np.float64)
    for tok in tokenize(doc.text):
        vec[fnv1a64(tok) % d] += 1.0
    norm = float(np.linalg.norm(vec))
    if norm > 0.0:
        vec /= norm
    return vec


def embed_hashing_many(docs: Sequence[AggregatedDocument], d: int = 256) -> EmbeddingMatrix:
    rows = np.zeros((len(docs), d), dtype=np.float64)
    for idx, doc in enumerate(docs):
        rows[idx] = embed_hashing(doc, d)
    return EmbeddingMatrix(rows=rows, d=d, embedder_id=f"fnv1a64-tf-d{d}")


# ---------------------------------------------------------------------------
# service-backed embedding


class EmbeddingClient:
    """OpenAI-compatible embeddings endpoint with per-document caching.

    Cache keys are digests of (model, document text); vectors are cached as
    JSON arrays in the same content-addressed store the chat gateway uses.
    """

    def __init__(self, config: BackendConfig, transport=None):
        from .gateway import ResponseCache

        self.config = config
        self.cache = ResponseCache(config.cache_dir)
        self.network_requests = 0
        self._transport = transport or self._http_post

    def _key(self, text: str) -> str:
        payload = json.dumps(["embeddings", self.config.model, text], ensure_ascii=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def _http_post(self, url: str, headers: dict, body: dict) -> tuple[int, str]:
        resp = requests.post(url, headers=headers, json=body, timeout=self.config.timeout_s)
        return resp.status_code, resp.text

    def embed(self, docs: Sequence[AggregatedDocument]) -> EmbeddingMatrix:
        import os

        vectors: list[np.ndarray | None] = [None] * len(docs)
        missing: list[int] = []
        for idx, doc in enumerate(docs):
            cached = self.cache.get(self._key(doc.text))
            if cached is not None:
                vectors[idx] = np.asarray(json.loads(cached), dtype=np.float64)
            else:
                missing.append(idx)

        if missing:
            api_key = os.environ.get(self.config.api_key_env_var, "")
            url = self.config.base_url.rstrip("/") + "/embeddings"
            headers = {
                "Authorization": f"Bearer {api_key}",
                "Content-Type": "application/json",
            }
            # unique texts, chunked; caching by text digest dedups the batch
            unique_texts = sorted({docs[i].text for i in missing})
            for start in range(0, len(unique_texts), 256):
                chunk = unique_texts[start : start + 256]
                body = {"model": self.config.model, "input": chunk}
                self.network_requests += 1
                status, text = self._transport(url, headers, body)
                if status != 200:
                    raise NetworkExhausted(f"embeddings endpoint returned HTTP {status}")
                try:
                    data = json.loads(text)["data"]
                    by_index = {item["index"]: item["embedding"] for item in data}
                except (json.JSONDecodeError, KeyError, TypeError) as e:
                    raise BackendError(f"malformed embeddings body: {e}") from e
                if len(by_index) != len(chunk):
                    raise BackendError("embeddings response count mismatch")
                for pos, doc_text in enumerate(chunk):
                    self.cache.put(self._key(doc_text), json.dumps(by_index[pos]))
            for idx in missing:
                cached = self.cache.get(self._key(docs[idx].text))
                vectors[idx] = np.asarray(json.loads(cached), dtype=np.float64)

        dims = {len(v) for v in vectors}
        if len(dims) != 1:
            raise DimensionMismatch(f"service returned mixed dimensions {sorted(dims)}")
        d = dims.pop()
        rows = np.stack([np.asarray(v, dtype=np.float64) for v in vectors])
        return EmbeddingMatrix(rows=rows, d=d, embedder_id=f"service:{self.config.model}")


def embed_service(docs: Sequence[AggregatedDocument], config: BackendConfig) -> EmbeddingMatrix:
    for doc in docs:
        if not doc.text:
            raise EmptyDocument(f"document for node {doc.node} is empty")
    return EmbeddingClient(config).embed(docs)


# ---------------------------------------------------------------------------
# persistence: little-endian u64 header (n, d) + n*d float32, JSON sidecar


def save_matrix(matrix: EmbeddingMatrix, path: str | Path, dataset_hash: str) -> None:
    path = Path(path)
    with path.open("wb") as f:
        f.write(struct.pack("<QQ", matrix.n, matrix.d))
        f.write(matrix.rows.astype("<f4").tobytes(order="C"))
    sidecar = {"embedder_id": matrix.embedder_id, "dataset_hash": dataset_hash}
    path.with_suffix(".json").write_text(
        json.dumps(sidecar, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_matrix(path: str | Path) -> tuple[EmbeddingMatrix, dict]:
    path = Path(path)
    raw = path.read_bytes()
    n, d = struct.unpack_from("<QQ", raw, 0)
    rows = (
        np.frombuffer(raw, dtype="<f4", offset=16, count=n * d)
        .astype(np.float64)
        .reshape(n, d)
    )
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    return EmbeddingMatrix(rows=rows, d=int(d), embedder_id=sidecar["embedder_id"]), sidecar
