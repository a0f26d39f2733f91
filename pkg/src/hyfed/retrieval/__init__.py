"""Modality backends behind one ``retrieve`` call."""

from __future__ import annotations

from dataclasses import dataclass, field

from ..config import AppConfig
from ..corpus import DictionaryNER, Query, normalize_name
from ..index import IndexBundle
from ..models import ModelService, ServiceNER, make_embedder, make_reranker
from .common import ScoredCandidate
from .kg import graph_ner, retrieve_kg
from .sql import FusionWeights, RelationalStore, render_row, retrieve_sql
from .text import TextIndex, retrieve_text

__all__ = ["Backend", "Hit", "ScoredCandidate", "make_backend"]


@dataclass
class Hit:
    """One retrieved record with the client-local view used for summarization."""

    candidate: ScoredCandidate
    view: str
    # KG only: the winning statement with the raw uid replaceable by the caller
    statement: object = None


@dataclass
class Backend:
    bundle: IndexBundle
    cfg: AppConfig
    _state: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        cfg = self.cfg
        timeout = cfg["services.timeout_s"]
        self.embedder = make_embedder(cfg["services.embedder_url"], cfg["text.dense_dim"], timeout)
        self.reranker = make_reranker(cfg["services.reranker_url"], timeout)
        ner_url = cfg["services.ner_url"]
        corpus = self.bundle.corpus
        m = self.bundle.modality
        if m == "text":
            self.index = TextIndex(corpus, self.embedder)
            names: list[str] = []
        elif m == "sql":
            self.index = RelationalStore(corpus, self.embedder, cfg["sql.bm25_k1"], cfg["sql.bm25_b"])
            names = self.index.entity_names()
        else:
            self.index = self.bundle.graph
            if self.index is None:
                from ..corpus import build_graph
                self.index = self.bundle.graph = build_graph(corpus)
            names = [n for n in self.index.entity_names()]
            self.uid_map = {normalize_name(r.uid): r.uid for r in corpus.records}
        if ner_url:
            self.ner = ServiceNER(ModelService(ner_url, timeout))
        elif m == "kg":
            self.ner = graph_ner(self.index, frozenset(cfg["kg.exclude_labels"]))
        else:
            self.ner = DictionaryNER(names)

    @property
    def modality(self) -> str:
        return self.bundle.modality

    def entities(self, text: str) -> list[str]:
        return self.ner.extract(text)

    def retrieve(self, q: Query, k: int, alpha: float | None = None, tau: float | None = None) -> list[Hit]:
        cfg = self.cfg
        m = self.modality
        if m == "text":
            a = cfg["text.alpha"] if alpha is None else alpha
            pool = max(cfg["text.pool"], k)
            cands = retrieve_text(self.index, q, k, a, pool, self.reranker)
            corpus = self.bundle.corpus
            return [Hit(c, corpus.get(c.uid).body or self.index.texts[c.uid]) for c in cands]
        if m == "sql":
            w = FusionWeights(cfg["sql.lambda1"], cfg["sql.lambda2"], cfg["sql.lambda3"], cfg["sql.lambda4"])
            cands = retrieve_sql(
                self.index, q, k, w, cfg["sql.n_per_entity"], self.reranker, self.ner, cfg["sql.bool_norm"]
            )
            return [Hit(c, render_row(self.index.rows[c.uid]).replace("; ", "\n")) for c in cands]
        a = cfg["kg.alpha"] if alpha is None else alpha
        t = cfg["kg.tau"] if tau is None else tau
        cands, stmts = retrieve_kg(
            self.index, q, k, t, cfg["kg.semantic_topk"], a, self.reranker, self.ner,
            frozenset(cfg["kg.exclude_labels"]), self.uid_map,
        )
        return [Hit(c, s.text, s) for c, s in zip(cands, stmts)]


def make_backend(bundle: IndexBundle, cfg: AppConfig | None = None) -> Backend:
    return Backend(bundle, cfg or AppConfig())
