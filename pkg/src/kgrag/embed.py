"""Text-embedding store, encoder clients, and the cosine similarity baseline.

Entity/relation surfaces are embedded once during preprocessing and kept in a
flat binary store for O(1) lookup; query texts are embedded on demand and
never persisted.
"""
from __future__ import annotations

import hashlib
import re
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import requests

from .errors import EncoderError, StoreFormatError
from .kg import KnowledgeGraph, Triple

STORE_MAGIC = b"EMBS"
STORE_VERSION = 1

_TOKEN_RE = re.compile(r"[a-z0-9_]+")


class EmbeddingStore:
    """Immutable id -> float32 vector table with O(1) lookups."""

    def __init__(self, ids: Sequence[str], matrix: np.ndarray):
        matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        if matrix.ndim != 2 or matrix.shape[0] != len(ids):
            raise ValueError("matrix must be 2-D with one row per id")
        self.ids = list(ids)
        self.matrix = matrix
        self.dim = int(matrix.shape[1])
        self._index = {key: i for i, key in enumerate(self.ids)}
        if len(self._index) != len(self.ids):
            raise ValueError("duplicate ids in store")

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def row_index(self, key: str) -> int:
        if key not in self._index:
            raise KeyError(f"no embedding stored for key {key!r}")
        return self._index[key]

    def lookup(self, key: str) -> np.ndarray:
        return self.matrix[self.row_index(key)]


def store_save(store: EmbeddingStore, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(STORE_MAGIC)
        f.write(struct.pack("<B", STORE_VERSION))
        f.write(struct.pack("<II", store.dim, len(store)))
        for key in store.ids:
            raw = key.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise ValueError(f"key too long for store format: {key[:40]!r}...")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
        f.write(store.matrix.astype("<f4", copy=False).tobytes(order="C"))


def store_load(path: str | Path) -> EmbeddingStore:
    data = Path(path).read_bytes()
    view = memoryview(data)
    if len(view) < 13:
        raise StoreFormatError(f"{path}: truncated header")
    if bytes(view[:4]) != STORE_MAGIC:
        raise StoreFormatError(f"{path}: bad magic {bytes(view[:4])!r}")
    version = view[4]
    if version != STORE_VERSION:
        raise StoreFormatError(f"{path}: unsupported version {version}")
    dim, count = struct.unpack_from("<II", view, 5)
    offset = 13
    ids = []
    for _ in range(count):
        if offset + 2 > len(view):
            raise StoreFormatError(f"{path}: truncated key table")
        (keylen,) = struct.unpack_from("<H", view, offset)
        offset += 2
        if offset + keylen > len(view):
            raise StoreFormatError(f"{path}: truncated key table")
        ids.append(bytes(view[offset : offset + keylen]).decode("utf-8"))
        offset += keylen
    expected = count * dim * 4
    if len(view) - offset != expected:
        raise StoreFormatError(
            f"{path}: matrix payload is {len(view) - offset} bytes, expected {expected}"
        )
    matrix = np.frombuffer(data, dtype="<f4", count=count * dim, offset=offset)
    return EmbeddingStore(ids, matrix.reshape(count, dim).copy())


class HashEncoder:
    """Deterministic offline encoder: average of per-token hash vectors.

    Each token maps to a fixed pseudo-random unit vector seeded from its
    bytes, so texts sharing tokens (e.g. a question naming a relation) get
    correlated embeddings. Used by tests and the synthetic pipeline.
    """

    def __init__(self, dim: int = 64):
        self.dim = dim
        self._token_cache: dict[str, np.ndarray] = {}

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self.dim)
            vec /= np.linalg.norm(vec)
            self._token_cache[token] = vec
        return vec

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            tokens = _TOKEN_RE.findall(text.lower())
            if not tokens:
                continue
            acc = np.zeros(self.dim)
            for tok in tokens:
                acc += self._token_vector(tok)
            out[i] = acc / len(tokens)
        return out.astype(np.float32)


class HttpEncoder:
    """Client for an external embedding service (POST {endpoint}/embed)."""

    def __init__(
        self,
        endpoint: str,
        batch_size: int = 128,
        retries: int = 3,
        backoff: float = 0.5,
        timeout: float = 60.0,
        parallelism: int = 1,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.batch_size = batch_size
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        self.parallelism = parallelism
        self._session = requests.Session()

    def _post_batch(self, batch: list[str]) -> list[np.ndarray]:
        url = f"{self.endpoint}/embed"
        last_error: str | None = None
        for attempt in range(1, self.retries + 1):
            try:
                resp = self._session.post(url, json={"texts": batch}, timeout=self.timeout)
                if resp.status_code == 200:
                    payload = resp.json()
                    return [np.asarray(v, dtype=np.float32) for v in payload["embeddings"]]
                last_error = f"status {resp.status_code}"
            except (requests.RequestException, KeyError, ValueError) as exc:
                last_error = str(exc)
            if attempt < self.retries:
                time.sleep(self.backoff * attempt)
        raise EncoderError(
            f"{url} failed after {self.retries} attempts: {last_error}",
            attempts=self.retries,
        )

    def encode(self, texts: Sequence[str]) -> np.ndarray:
        if not texts:
            return np.zeros((0, 0), dtype=np.float32)
        batches = [
            list(texts[i : i + self.batch_size])
            for i in range(0, len(texts), self.batch_size)
        ]
        if self.parallelism > 1 and len(batches) > 1:
            with ThreadPoolExecutor(max_workers=self.parallelism) as pool:
                results = list(pool.map(self._post_batch, batches))
        else:
            results = [self._post_batch(b) for b in batches]
        vectors = [v for batch in results for v in batch]
        dims = {v.shape[0] for v in vectors}
        if len(dims) != 1:
            raise EncoderError(f"inconsistent embedding dims across batches: {sorted(dims)}")
        return np.stack(vectors)


def embed_texts(endpoint: str, texts: Sequence[str], **kwargs) -> np.ndarray:
    """One-shot convenience wrapper around HttpEncoder."""
    if not texts:
        raise ValueError("texts must be nonempty")
    return HttpEncoder(endpoint, **kwargs).encode(texts)


def build_store(encoder, texts: Iterable[str]) -> EmbeddingStore:
    """Embed each distinct text once, preserving first-occurrence order."""
    ids = list(dict.fromkeys(texts))
    if not ids:
        raise ValueError("cannot build a store from zero texts")
    return EmbeddingStore(ids, encoder.encode(ids))


def cosine_baseline_scores(
    store: EmbeddingStore,
    query_vec: np.ndarray,
    candidates: Sequence[Triple],
    kg: KnowledgeGraph,
) -> dict[Triple, float]:
    """Structure-free baseline: cosine(z_q, mean(z_h, z_r, z_t)) per triple.

    Zero-norm vectors (query or triple mean) score 0.
    """
    query = np.asarray(query_vec, dtype=np.float64)
    qnorm = np.linalg.norm(query)
    scores: dict[Triple, float] = {}
    for triple in candidates:
        h_text, r_text, t_text = kg.surface(triple)
        mean = (
            store.lookup(h_text).astype(np.float64)
            + store.lookup(r_text)
            + store.lookup(t_text)
        ) / 3.0
        mnorm = np.linalg.norm(mean)
        if qnorm == 0.0 or mnorm == 0.0:
            scores[triple] = 0.0
        else:
            scores[triple] = float(query @ mean / (qnorm * mnorm))
    return scores


def whole_triple_scores(
    encoder,
    query_vec: np.ndarray,
    candidates: Sequence[Triple],
    kg: KnowledgeGraph,
) -> dict[Triple, float]:
    """Config-gated comparison mode: embed each triple as one linearized text."""
    texts = ["(" + ", ".join(kg.surface(t)) + ")" for t in candidates]
    vectors = encoder.encode(texts).astype(np.float64)
    query = np.asarray(query_vec, dtype=np.float64)
    qnorm = np.linalg.norm(query)
    scores = {}
    for triple, vec in zip(candidates, vectors):
        vnorm = np.linalg.norm(vec)
        scores[triple] = (
            0.0 if qnorm == 0.0 or vnorm == 0.0 else float(query @ vec / (qnorm * vnorm))
        )
    return scores
