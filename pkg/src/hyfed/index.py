"""On-disk index container.

An index directory holds ``index.hyfed``: the magic line ``HYFED1`` followed
by one JSON document with the records, their modality, the vocabulary, the
association graph and the modality-specific structure (property graph for
``kg``, column layout for ``sql``, idf table for ``text``). Serialization is
canonical (sorted keys), so rebuilding from the same input is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

from .corpus import (
    AssociationGraph,
    Corpus,
    CorpusError,
    PatientRecord,
    PropertyGraph,
    build_association_graph,
    build_graph,
    smoothed_idf,
)

MAGIC = "HYFED1"
FORMAT_VERSION = 1
INDEX_FILE = "index.hyfed"


@dataclass
class IndexBundle:
    corpus: Corpus
    assoc: AssociationGraph | None = None
    graph: PropertyGraph | None = None

    @property
    def modality(self) -> str:
        return self.corpus.modality

    @classmethod
    def build(cls, corpus: Corpus) -> "IndexBundle":
        assoc = build_association_graph(corpus) if corpus.N else None
        graph = build_graph(corpus) if corpus.modality == "kg" else None
        return cls(corpus=corpus, assoc=assoc, graph=graph)

    @cached_property
    def cache_graph(self) -> AssociationGraph | None:
        return self.assoc.record_projection() if self.assoc is not None else None

    def to_dict(self) -> dict:
        c = self.corpus
        doc = {
            "format_version": FORMAT_VERSION,
            "modality": c.modality,
            "records": [r.to_dict() for r in c.records],
            "vocabulary": c.vocabulary,
            "association": self.assoc.to_dict() if self.assoc else None,
        }
        if c.modality == "kg":
            doc["graph"] = (self.graph or build_graph(c)).to_dict()
        elif c.modality == "text":
            doc["idf"] = {t: smoothed_idf(c.N, df) for t, df in c.vocabulary.items()}
        else:
            doc["columns"] = sorted({k for r in c.records for k in r.fields})
        return doc

    def dumps(self) -> str:
        return MAGIC + "\n" + json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False) + "\n"


def save_index(bundle: IndexBundle, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / INDEX_FILE
    path.write_text(bundle.dumps(), encoding="utf-8")
    return path


def load_index(index_dir) -> IndexBundle:
    path = Path(index_dir)
    if path.is_dir():
        path = path / INDEX_FILE
    if not path.exists():
        raise FileNotFoundError(f"index not found: {path}")
    text = path.read_text(encoding="utf-8")
    magic, _, rest = text.partition("\n")
    if magic != MAGIC:
        raise CorpusError(f"{path}: not a {MAGIC} index")
    doc = json.loads(rest)
    if doc.get("format_version") != FORMAT_VERSION:
        raise CorpusError(f"{path}: unsupported index format {doc.get('format_version')}")
    corpus = Corpus.from_records(
        (PatientRecord.from_dict(r) for r in doc["records"]), doc["modality"]
    )
    assoc = AssociationGraph.from_dict(doc["association"]) if doc.get("association") else None
    graph = None
    if doc.get("graph") is not None:
        g = doc["graph"]
        graph = PropertyGraph.from_parts(g["nodes"], g["edges"], g.get("skipped", 0))
    return IndexBundle(corpus=corpus, assoc=assoc, graph=graph)
