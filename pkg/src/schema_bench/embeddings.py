"""Text embeddings plus the similarity primitives built on them.

Backends are pluggable: the remote OpenAI-compatible endpoint for real runs,
and a pure feature-hashing embedder for offline tests and deterministic CI.
All vectors leave `embed_batch` L2-normalized.
"""

from __future__ import annotations

import hashlib
import os
import re
from typing import Protocol, Sequence

import numpy as np

from .errors import BackendError, DimensionMismatch, EmptyText


class EmbeddingBackend(Protocol):
    model: str
    batch_limit: int

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        """Embed one batch (len <= batch_limit), one vector per text."""
        ...


_TOKEN = re.compile(r"[a-z0-9]+")


class HashingEmbedder:
    """Deterministic local embedder: lowercased word unigrams and bigrams
    feature-hashed into a fixed number of buckets.

    Pure function of the text (stable hash, no process salt), so identical
    texts embed identically across runs and machines.
    """

    def __init__(self, dim: int = 256, batch_limit: int = 512):
        if dim < 2:
            raise BackendError("embedding dimension must be >= 2")
        self.dim = dim
        self.batch_limit = batch_limit
        self.model = f"hash-{dim}"

    def _bucket(self, ngram: str) -> int:
        digest = hashlib.blake2b(ngram.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "big") % self.dim

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        out = []
        for text in texts:
            tokens = _TOKEN.findall(text.lower())
            vec = np.zeros(self.dim)
            for tok in tokens:
                vec[self._bucket(tok)] += 1.0
            for a, b in zip(tokens, tokens[1:]):
                vec[self._bucket(f"{a} {b}")] += 1.0
            if not tokens:
                vec[self._bucket("")] = 1.0
            out.append(vec.tolist())
        return out


class RemoteEmbedder:
    """OpenAI-compatible embeddings endpoint (POST /embeddings)."""

    def __init__(
        self,
        model: str = "text-embedding-ada-002",
        base_url: str | None = None,
        api_key: str | None = None,
        batch_limit: int = 128,
        timeout: float = 60.0,
    ):
        from .gateway import API_KEY_ENV, BASE_URL_ENV

        self.model = model
        self.batch_limit = batch_limit
        self.timeout = timeout
        self.base_url = (base_url or os.environ.get(BASE_URL_ENV, "")).rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        if not self.base_url:
            raise BackendError("no embeddings base URL configured")

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        import requests

        try:
            resp = requests.post(
                f"{self.base_url}/embeddings",
                json={"model": self.model, "input": list(texts)},
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise BackendError(f"embeddings transport failure: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"embeddings endpoint returned HTTP {resp.status_code}")
        try:
            data = resp.json()["data"]
            data = sorted(data, key=lambda item: item.get("index", 0))
            return [item["embedding"] for item in data]
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed embeddings response: {exc}") from exc


def embed_batch(backend: EmbeddingBackend, texts: Sequence[str]) -> np.ndarray:
    """Embed texts in order, chunked to the backend's batch limit, and
    L2-normalize every row. Rejects empty inputs up front."""
    if len(texts) == 0:
        raise BackendError("embed_batch requires at least one text")
    for i, t in enumerate(texts):
        if not t.strip():
            raise EmptyText(i)

    rows: list[list[float]] = []
    limit = max(1, int(backend.batch_limit))
    for start in range(0, len(texts), limit):
        chunk = list(texts[start : start + limit])
        got = backend.embed(chunk)
        if len(got) != len(chunk):
            raise BackendError(
                f"backend returned {len(got)} vectors for a batch of {len(chunk)}"
            )
        rows.extend(got)

    matrix = np.asarray(rows, dtype=float)
    if matrix.ndim != 2 or matrix.shape[1] < 2:
        raise BackendError("backend returned vectors of dimension < 2")
    if not np.all(np.isfinite(matrix)):
        raise BackendError("backend returned non-finite values")
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise BackendError("backend returned a zero vector")
    return matrix / norms


def cosine(u: Sequence[float], v: Sequence[float]) -> float:
    """Cosine similarity of two unit-ish vectors, clamped to [-1, 1]."""
    a = np.asarray(u, dtype=float)
    b = np.asarray(v, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"vector dims differ: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DimensionMismatch("cosine undefined for zero vectors")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def top_k_similar(
    query: str,
    corpus: Sequence[tuple[str, str]],
    k: int,
    backend: EmbeddingBackend,
) -> list[str]:
    """Keys of the k most query-similar corpus texts, descending score,
    exact ties broken by corpus order."""
    if not corpus:
        raise BackendError("top_k_similar requires a non-empty corpus")
    if k < 1:
        raise BackendError("k must be >= 1")
    texts = [query] + [text for _, text in corpus]
    vectors = embed_batch(backend, texts)
    scores = vectors[1:] @ vectors[0]
    # stable sort on negated score keeps corpus order among exact ties
    order = np.argsort(-scores, kind="stable")
    return [corpus[i][0] for i in order[:k]]


class EmbeddingScorer:
    """Pair scorer over aspect fingerprints: cosine of their embeddings.

    Memoizes embeddings per unique text so scoring a G x R matrix costs
    G + R backend texts, not G * R.
    """

    def __init__(self, backend: EmbeddingBackend):
        self.backend = backend
        self._memo: dict[str, np.ndarray] = {}

    def _vector(self, text: str) -> np.ndarray:
        if text not in self._memo:
            self._memo[text] = embed_batch(self.backend, [text])[0]
        return self._memo[text]

    def __call__(self, text_a: str, text_b: str) -> float:
        return cosine(self._vector(text_a), self._vector(text_b))


class HttpScorer:
    """Drop-in remote similarity scorer (e.g. a token-level BERTScore service).

    POSTs {"text_a": ..., "text_b": ...} to the configured URL and expects
    {"score": <float>} back.
    """

    def __init__(self, url: str, timeout: float = 60.0):
        self.url = url
        self.timeout = timeout

    def __call__(self, text_a: str, text_b: str) -> float:
        import requests

        try:
            resp = requests.post(
                self.url, json={"text_a": text_a, "text_b": text_b}, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise BackendError(f"scorer transport failure: {exc}") from exc
        if resp.status_code != 200:
            raise BackendError(f"scorer returned HTTP {resp.status_code}")
        try:
            return float(resp.json()["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed scorer response: {exc}") from exc
