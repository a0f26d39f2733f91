"""Pluggable model contracts: embedder, reranker, NER, summarizer, generator.

Every contract has a deterministic reference implementation that needs no
trained weights, and a service implementation speaking a small JSON-over-HTTP
protocol::

    POST <url>  {"task": "embed|rerank|ner|summarize|generate", "inputs": [...]}
    200         {"outputs": [...]}
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import urllib.error
import urllib.request
from functools import lru_cache
from typing import Protocol, Sequence

import numpy as np

from .corpus import DictionaryNER, tokenize

log = logging.getLogger(__name__)

DEFAULT_DIM = 256


class ServiceError(RuntimeError):
    pass


class Embedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray: ...


class Reranker(Protocol):
    def score(self, query: str, doc: str) -> float: ...

    def score_many(self, query: str, docs: Sequence[str]) -> list[float]: ...


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b)) / (na * nb)


@lru_cache(maxsize=1 << 16)
def _gram_hash(gram: str) -> int:
    return int.from_bytes(hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest(), "little")


class HashingEmbedder:
    """Signed feature hashing over character 3-grams of the normalized text."""

    def __init__(self, dim: int = DEFAULT_DIM):
        if dim < 1:
            raise ValueError("embedding dimension must be >= 1")
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        s = " ".join(tokenize(text))
        vec = np.zeros(self.dim, dtype=np.float64)
        if not s:
            return vec
        grams = [s[i:i + 3] for i in range(len(s) - 2)] or [s]
        for g in grams:
            h = _gram_hash(g)
            vec[h % self.dim] += 1.0 if (h >> 63) & 1 else -1.0
        n = float(np.linalg.norm(vec))
        return vec / n if n > 0 else vec


class JaccardReranker:
    """Token-set Jaccard similarity; 0 when both sides are empty."""

    def score(self, query: str, doc: str) -> float:
        a, b = set(tokenize(query)), set(tokenize(doc))
        union = a | b
        if not union:
            return 0.0
        return len(a & b) / len(union)

    def score_many(self, query: str, docs: Sequence[str]) -> list[float]:
        a = set(tokenize(query))
        out = []
        for d in docs:
            b = set(tokenize(d))
            union = a | b
            out.append(len(a & b) / len(union) if union else 0.0)
        return out


class ModelService:
    """Client for the shared model-service protocol (at most one retry)."""

    def __init__(self, url: str, timeout: float = 10.0):
        self.url = url
        self.timeout = timeout

    def call(self, task: str, inputs: list) -> list:
        body = json.dumps({"task": task, "inputs": inputs}).encode("utf-8")
        last: Exception | None = None
        for _ in range(2):
            req = urllib.request.Request(
                self.url, data=body, headers={"Content-Type": "application/json"}, method="POST"
            )
            try:
                with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                break
            except (urllib.error.URLError, OSError, json.JSONDecodeError) as exc:
                last = exc
        else:
            raise ServiceError(f"model service {self.url} failed: {last}")
        outputs = payload.get("outputs") if isinstance(payload, dict) else None
        if not isinstance(outputs, list) or len(outputs) != len(inputs):
            raise ServiceError(f"model service {self.url} returned a malformed response")
        return outputs


class ServiceEmbedder:
    def __init__(self, service: ModelService, dim: int = DEFAULT_DIM):
        self.service = service
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        (out,) = self.service.call("embed", [text])
        vec = np.asarray(out, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise ServiceError(f"model service {self.service.url} returned dim {vec.shape}, want {self.dim}")
        n = float(np.linalg.norm(vec))
        return vec / n if n > 0 else vec


class ServiceReranker:
    def __init__(self, service: ModelService):
        self.service = service

    def score(self, query: str, doc: str) -> float:
        return self.score_many(query, [doc])[0]

    def score_many(self, query: str, docs: Sequence[str]) -> list[float]:
        if not docs:
            return []
        raw = self.service.call("rerank", [[query, d] for d in docs])
        out = []
        for x in raw:
            x = float(x)
            if math.isnan(x):
                raise ServiceError(f"model service {self.service.url} returned NaN rerank score")
            if x < 0.0 or x > 1.0:
                log.warning("rerank score %r outside [0,1], clamping", x)
                x = min(max(x, 0.0), 1.0)
            out.append(x)
        return out


class ServiceNER:
    def __init__(self, service: ModelService):
        self.service = service

    def extract(self, text: str) -> list[str]:
        (out,) = self.service.call("ner", [text])
        seen, names = set(), []
        for e in out:
            e = str(e).strip().lower()
            if e and e not in seen:
                seen.add(e)
                names.append(e)
        return names


def make_embedder(url: str = "", dim: int = DEFAULT_DIM, timeout: float = 10.0):
    return ServiceEmbedder(ModelService(url, timeout), dim) if url else HashingEmbedder(dim)


def make_reranker(url: str = "", timeout: float = 10.0):
    return ServiceReranker(ModelService(url, timeout)) if url else JaccardReranker()


def make_ner(names, url: str = "", timeout: float = 10.0):
    return ServiceNER(ModelService(url, timeout)) if url else DictionaryNER(names)
