"""Full-text retrieval over structured rows with four-signal fusion and rerank.

The two full-text scoring modes of a relational engine are emulated with
portable formulas: Boolean mode is the idf-sum of entity tokens present in a
row, Natural Language mode is BM25. Both are fused with a verbatim
exact-match indicator and an embedding phrase similarity::

    s_combined = l1*exact + l2*min(S_bool/3, 1) + l3*min(S_nl, 1) + l4*S_sim
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np

from ..corpus import Corpus, DictionaryNER, Query, normalize_name, smoothed_idf, tokenize
from ..models import HashingEmbedder, JaccardReranker
from .common import ScoredCandidate

BOOL_NORM = 3.0
DEFAULT_N_PER_ENTITY = 20


@dataclass(frozen=True)
class FusionWeights:
    l1: float = 0.4
    l2: float = 0.2
    l3: float = 0.2
    l4: float = 0.2

    def __post_init__(self):
        ws = (self.l1, self.l2, self.l3, self.l4)
        if any(w < 0 for w in ws) or sum(ws) <= 0:
            raise ValueError("fusion weights must be >= 0 with a positive sum")


def combined_score(
    exact: float,
    s_bool: float,
    s_nl: float,
    s_sim: float,
    w: FusionWeights = FusionWeights(),
    bool_norm: float = BOOL_NORM,
) -> float:
    return (
        w.l1 * exact
        + w.l2 * min(s_bool / bool_norm, 1.0)
        + w.l3 * min(s_nl, 1.0)
        + w.l4 * s_sim
    )


def render_row(fields: dict[str, str]) -> str:
    return "; ".join(f"{k}: {v}" for k, v in fields.items())


class RelationalStore:
    """Rows plus an inverted index over all columns (values only)."""

    def __init__(self, corpus: Corpus, embedder=None, k1: float = 1.2, b: float = 0.75):
        self.k1, self.b = k1, b
        self.embedder = embedder or HashingEmbedder()
        self.rows: dict[str, dict[str, str]] = {}
        self.texts: dict[str, str] = {}
        self.tokens: dict[str, list[str]] = {}
        self.tf: dict[str, Counter] = {}
        self.doc_len: dict[str, int] = {}
        self.fulltext: dict[str, list[tuple[str, int]]] = {}
        for rec in corpus.records:
            if not rec.fields:
                continue
            text = " ".join(rec.fields.values())
            toks = tokenize(text)
            self.rows[rec.uid] = dict(rec.fields)
            self.texts[rec.uid] = text
            self.tokens[rec.uid] = toks
            self.tf[rec.uid] = Counter(toks)
            self.doc_len[rec.uid] = len(toks)
        for uid in sorted(self.rows):
            for t, c in sorted(self.tf[uid].items()):
                self.fulltext.setdefault(t, []).append((uid, c))
        n = len(self.rows)
        self.avg_len = math.fsum(self.doc_len.values()) / n if n else 0.0
        self.idf = {t: smoothed_idf(n, len(p)) for t, p in self.fulltext.items()}
        self._row_vecs = {u: self.embedder.embed(t) for u, t in self.texts.items()}

    def __len__(self):
        return len(self.rows)

    def _check(self, uid: str):
        if uid not in self.rows:
            raise KeyError(f"unknown uid {uid}")

    def entity_names(self) -> list[str]:
        """Distinct column values, used as the reference NER dictionary."""
        return sorted({normalize_name(v) for r in self.rows.values() for v in r.values() if v.strip()})

    def boolean_score(self, e: str, uid: str) -> float:
        self._check(uid)
        tf = self.tf[uid]
        return math.fsum(self.idf[t] for t in set(tokenize(e)) if tf.get(t))

    def natural_language_score(self, e: str, uid: str) -> float:
        self._check(uid)
        tf = self.tf[uid]
        if self.avg_len == 0:
            return 0.0
        norm = self.k1 * (1 - self.b + self.b * self.doc_len[uid] / self.avg_len)
        parts = []
        for t in set(tokenize(e)):
            f = tf.get(t, 0)
            if f:
                parts.append(self.idf[t] * (f * (self.k1 + 1)) / (f + norm))
        return math.fsum(parts)

    def exact_match(self, e: str, uid: str) -> int:
        needle = tokenize(e)
        hay = self.tokens.get(uid, [])
        n = len(needle)
        if n == 0:
            return 0
        return int(any(hay[i:i + n] == needle for i in range(len(hay) - n + 1)))

    def phrase_similarity(self, e: str, uid: str) -> float:
        self._check(uid)
        a = self.embedder.embed(e)
        b = self._row_vecs[uid]
        if not a.any() or not b.any():
            return 0.0
        return min(1.0, max(0.0, float(np.dot(a, b))))

    def signals(self, e: str, uid: str, bool_norm: float = BOOL_NORM) -> dict[str, float]:
        s_bool = self.boolean_score(e, uid)
        s_nl = self.natural_language_score(e, uid)
        return {
            "exact": float(self.exact_match(e, uid)),
            "s_bool": s_bool,
            "s_bool_clamped": min(s_bool / bool_norm, 1.0),
            "s_nl": s_nl,
            "s_nl_clamped": min(s_nl, 1.0),
            "s_sim": self.phrase_similarity(e, uid),
        }

    def rows_with_any(self, e: str) -> list[str]:
        out = set()
        for t in set(tokenize(e)):
            out.update(u for u, _ in self.fulltext.get(t, ()))
        return sorted(out)


def retrieve_sql(
    store: RelationalStore,
    q: Query,
    k: int = 10,
    w: FusionWeights = FusionWeights(),
    n_per_entity: int = DEFAULT_N_PER_ENTITY,
    reranker=None,
    ner=None,
    bool_norm: float = BOOL_NORM,
) -> list[ScoredCandidate]:
    if k < 1 or n_per_entity < 1:
        raise ValueError("k and n_per_entity must be >= 1")
    reranker = reranker or JaccardReranker()
    text = q.text
    ner = ner or DictionaryNER(store.entity_names())
    entities = ner.extract(text) or [text]

    merged: dict[str, tuple[float, dict]] = {}
    for e in entities:
        scored = []
        for uid in store.rows_with_any(e):
            sig = store.signals(e, uid, bool_norm)
            s = combined_score(sig["exact"], sig["s_bool"], sig["s_nl"], sig["s_sim"], w, bool_norm)
            scored.append((sig["exact"], s, uid, sig))
        scored.sort(key=lambda x: (-x[0], -x[1], x[2]))
        for _, s, uid, sig in scored[:n_per_entity]:
            if uid not in merged or s > merged[uid][0]:
                merged[uid] = (s, sig)
    if not merged:
        return []

    uids = sorted(merged)
    rr = reranker.score_many(text, [store.texts[u] for u in uids])
    out = [
        ScoredCandidate(uid=u, score=r, signals={**merged[u][1], "s_combined": merged[u][0], "s_rerank": r})
        for u, r in zip(uids, rr)
    ]
    out.sort(key=lambda c: (-c.score, -c.signals["s_combined"], c.uid))
    return out[:k]
