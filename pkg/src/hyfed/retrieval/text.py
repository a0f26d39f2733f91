"""Hybrid sparse + dense text retrieval with fused reranking.

Sparse side: smoothed TF-IDF, ``idf(t) = ln((1+N)/(1+df(t))) + 1``, raw term
counts, Euclidean-normalized document vectors. Dense side: any
:class:`~hyfed.models.Embedder`. Candidates pooled from both sides are scored
with ``alpha * cos_tfidf + (1 - alpha) * reranker``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from ..corpus import Corpus, Query, smoothed_idf, tokenize
from ..models import HashingEmbedder, JaccardReranker
from .common import ScoredCandidate, check_weight, weighted

DEFAULT_ALPHA = 0.8
DEFAULT_POOL = 50


@dataclass(frozen=True)
class SparseVector:
    entries: tuple[tuple[int, float], ...]
    norm: float

    @classmethod
    def from_weights(cls, weights: dict[int, float], normalize: bool = True) -> "SparseVector":
        items = sorted((t, w) for t, w in weights.items() if w != 0.0)
        norm = math.sqrt(math.fsum(w * w for _, w in items))
        if normalize and norm > 0.0:
            items = [(t, w / norm) for t, w in items]
            norm = math.sqrt(math.fsum(w * w for _, w in items))
        return cls(entries=tuple(items), norm=norm)

    def as_dict(self) -> dict[int, float]:
        return dict(self.entries)

    def dot(self, other: "SparseVector") -> float:
        a, b = (self, other) if len(self.entries) <= len(other.entries) else (other, self)
        lookup = dict(b.entries)
        return math.fsum(w * lookup[t] for t, w in a.entries if t in lookup)


def cos_tfidf(q: SparseVector, d: SparseVector) -> float:
    if q.norm == 0.0 or d.norm == 0.0:
        return 0.0
    return min(1.0, max(0.0, q.dot(d) / (q.norm * d.norm)))


def hybrid_score(cos: float, rerank: float, alpha: float = DEFAULT_ALPHA) -> float:
    return weighted(alpha, cos, rerank)


def record_text(rec) -> str:
    return " ".join(p for p in (rec.title.strip(), rec.body.strip()) if p)


class TextIndex:
    """TF-IDF matrix rows plus dense vectors, keyed by uid."""

    def __init__(self, corpus: Corpus, embedder=None, dim: int | None = None):
        self.embedder = embedder or HashingEmbedder(dim or 256)
        self.dim = self.embedder.dim
        n = corpus.N
        self.term_ids = {t: i for i, t in enumerate(sorted(corpus.vocabulary))}
        self.idf = {self.term_ids[t]: smoothed_idf(n, df) for t, df in corpus.vocabulary.items()}
        self.uid_rows: dict[str, int] = {}
        self.doc_vectors: dict[str, SparseVector] = {}
        self.dense_vectors: dict[str, np.ndarray] = {}
        self.texts: dict[str, str] = {}
        for row, rec in enumerate(corpus.records):
            text = record_text(rec)
            self.uid_rows[rec.uid] = row
            self.texts[rec.uid] = text
            self.doc_vectors[rec.uid] = self.vectorize(text)
            self.dense_vectors[rec.uid] = self.embedder.embed(text)

    def __len__(self):
        return len(self.uid_rows)

    def vectorize(self, text: str) -> SparseVector:
        tf = Counter(tokenize(text))
        weights = {}
        for term, count in tf.items():
            tid = self.term_ids.get(term)
            if tid is not None:
                weights[tid] = count * self.idf[tid]
        return SparseVector.from_weights(weights)

    def dense_cosine(self, qvec: np.ndarray, uid: str) -> float:
        d = self.dense_vectors[uid]
        if not qvec.any() or not d.any():
            return 0.0
        return float(np.dot(qvec, d))


def tfidf_weighting(corpus: Corpus) -> TextIndex:
    return TextIndex(corpus)


def _top(scores: dict[str, float], n: int) -> list[str]:
    return [u for u, _ in sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))[:n]]


def retrieve_text(
    index: TextIndex,
    q: Query,
    k: int = 10,
    alpha: float = DEFAULT_ALPHA,
    pool: int = DEFAULT_POOL,
    reranker=None,
) -> list[ScoredCandidate]:
    if k < 1:
        raise ValueError("k must be >= 1")
    if pool < k:
        raise ValueError("pool must be >= k")
    check_weight("alpha", alpha)
    if len(index) == 0:
        return []
    reranker = reranker or JaccardReranker()
    text = q.text
    qsparse = index.vectorize(text)
    qdense = index.embedder.embed(text)

    sparse = {u: cos_tfidf(qsparse, v) for u, v in index.doc_vectors.items()}
    dense = {u: index.dense_cosine(qdense, u) for u in index.dense_vectors}
    candidates = sorted(set(_top(sparse, pool)) | set(_top(dense, pool)))

    rerank = reranker.score_many(text, [index.texts[u] for u in candidates])
    scored = [
        ScoredCandidate(
            uid=u,
            score=hybrid_score(sparse[u], r, alpha),
            signals={"cos_tfidf": sparse[u], "reranker": r, "dense": dense[u]},
        )
        for u, r in zip(candidates, rerank)
    ]
    scored.sort(key=lambda c: (-c.score, c.uid))
    return scored[:k]
