"""Patient corpus ingestion and the storage substrates built from it.

A corpus file is line-delimited JSON, one record per line::

    {"uid": "pt-001", "title": "...", "body": "...",
     "fields": {"diagnosis": "asthma"}, "triples": [["pt-001", "HAS_DISEASE", "asthma"]]}

Absent keys default to empty. Three structures are derived from a corpus:
the property graph (the in-memory stand-in for a graph database), and the
document-entity association graph that drives cache prefetching and the
workload generator. The text and relational indexes live with their
retrieval backends.
"""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

log = logging.getLogger(__name__)

MODALITIES = ("text", "sql", "kg")

_TOKEN_RE = re.compile(r"[^\W_]+")
_WS_RE = re.compile(r"\s+")


class CorpusError(ValueError):
    pass


def tokenize(text: str) -> list[str]:
    """Lowercase and split on anything that is not a Unicode letter or digit."""
    return _TOKEN_RE.findall(text.lower())


def smoothed_idf(n_docs: int, df: int) -> float:
    """ln((1 + N) / (1 + df)) + 1"""
    return math.log((1 + n_docs) / (1 + df)) + 1.0


def normalize_name(name: str) -> str:
    return _WS_RE.sub(" ", name.strip().lower())


@dataclass(frozen=True)
class PatientRecord:
    uid: str
    title: str = ""
    body: str = ""
    fields: dict[str, str] = field(default_factory=dict)
    triples: tuple[tuple[str, str, str], ...] = ()

    def to_dict(self) -> dict:
        return {
            "uid": self.uid,
            "title": self.title,
            "body": self.body,
            "fields": dict(self.fields),
            "triples": [list(t) for t in self.triples],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "PatientRecord":
        uid = obj.get("uid")
        if not isinstance(uid, str) or not uid.strip():
            raise CorpusError("record has no uid")
        fields = obj.get("fields") or {}
        if not isinstance(fields, dict):
            raise CorpusError(f"record {uid}: fields must be an object")
        triples = []
        for t in obj.get("triples") or []:
            if not isinstance(t, (list, tuple)) or len(t) != 3:
                raise CorpusError(f"record {uid}: triple must have 3 elements")
            triples.append(tuple(str(x) for x in t))
        rec = cls(
            uid=uid,
            title=str(obj.get("title") or ""),
            body=str(obj.get("body") or ""),
            fields={str(k): str(v) for k, v in fields.items()},
            triples=tuple(triples),
        )
        if not (rec.body.strip() or rec.fields or rec.triples):
            raise CorpusError(f"record {uid}: body, fields and triples are all empty")
        return rec


@dataclass(frozen=True)
class Query:
    title: str
    abstract: str = ""

    def __post_init__(self):
        if not (self.title + self.abstract).strip():
            raise ValueError("query title and abstract are both empty")

    @property
    def text(self) -> str:
        """Title and abstract joined into a single query string."""
        return " ".join(p for p in (self.title.strip(), self.abstract.strip()) if p)


@dataclass(frozen=True)
class Corpus:
    records: tuple[PatientRecord, ...]
    vocabulary: dict[str, int]
    modality: str = "text"

    @property
    def N(self) -> int:
        return len(self.records)

    def uids(self) -> list[str]:
        return [r.uid for r in self.records]

    def get(self, uid: str) -> PatientRecord:
        for r in self.records:
            if r.uid == uid:
                return r
        raise KeyError(uid)

    @classmethod
    def from_records(cls, records: Iterable[PatientRecord], modality: str = "text") -> "Corpus":
        if modality not in MODALITIES:
            raise CorpusError(f"unknown modality {modality!r}")
        records = tuple(records)
        seen: set[str] = set()
        df: Counter[str] = Counter()
        for rec in records:
            if rec.uid in seen:
                raise CorpusError(f"duplicate uid {rec.uid}")
            seen.add(rec.uid)
            df.update(set(tokenize(rec.title + " " + rec.body)))
        return cls(records=records, vocabulary=dict(sorted(df.items())), modality=modality)


def ingest_corpus(path, modality: str = "text") -> Corpus:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"corpus file not found: {path}")
    records = []
    seen: set[str] = set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise CorpusError(f"line {lineno}: expected a JSON object")
            try:
                rec = PatientRecord.from_dict(obj)
            except CorpusError as exc:
                raise CorpusError(f"line {lineno}: {exc}") from None
            if rec.uid in seen:
                raise CorpusError(f"duplicate uid {rec.uid}")
            seen.add(rec.uid)
            records.append(rec)
    return Corpus.from_records(records, modality)


def write_corpus(records: Iterable[PatientRecord], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# Property graph


@dataclass(frozen=True)
class PropertyGraph:
    """Labelled multigraph. Node ids are normalized names."""

    nodes: dict[str, tuple[str, str]]  # id -> (label, name)
    edges: tuple[tuple[str, str, str], ...]  # (src, relation, dst)
    name_index: dict[str, tuple[str, ...]]
    skipped: int = 0
    _incident: dict = field(default_factory=dict, repr=False, compare=False)

    def label(self, node_id: str) -> str:
        return self.nodes[node_id][0]

    def incident(self, node_id: str) -> list[tuple[str, str, str]]:
        return self._incident.get(node_id, [])

    def entity_names(self) -> list[str]:
        return sorted(name for label, name in self.nodes.values() if label != "Patient")

    def to_dict(self) -> dict:
        return {
            "nodes": {k: list(v) for k, v in sorted(self.nodes.items())},
            "edges": [list(e) for e in self.edges],
            "skipped": self.skipped,
        }

    @classmethod
    def from_parts(cls, nodes: dict, edges, skipped: int = 0) -> "PropertyGraph":
        nodes = {k: (v[0], v[1]) for k, v in nodes.items()}
        edges = tuple(tuple(e) for e in edges)
        for src, _, dst in edges:
            if src not in nodes or dst not in nodes:
                raise CorpusError(f"edge endpoint missing: {src} -> {dst}")
        name_index: dict[str, list[str]] = {}
        for node_id, (_, name) in nodes.items():
            name_index.setdefault(normalize_name(name), []).append(node_id)
        incident: dict[str, list] = {}
        for e in edges:
            incident.setdefault(e[0], []).append(e)
            if e[2] != e[0]:
                incident.setdefault(e[2], []).append(e)
        return cls(
            nodes=nodes,
            edges=edges,
            name_index={k: tuple(sorted(v)) for k, v in sorted(name_index.items())},
            skipped=skipped,
            _incident=incident,
        )


def build_graph(corpus: Corpus) -> PropertyGraph:
    uids = {normalize_name(r.uid) for r in corpus.records}
    nodes: dict[str, tuple[str, str]] = {}
    edges = []
    skipped = 0
    for rec in corpus.records:
        for s, r, o in rec.triples:
            s, o, r = normalize_name(s), normalize_name(o), r.strip()
            if not s or not o or not r:
                skipped += 1
                continue
            for name in (s, o):
                if name not in nodes:
                    nodes[name] = ("Patient" if name in uids else "Entity", name)
            edges.append((s, r, o))
    if skipped:
        log.warning("skipped %d triples with empty components", skipped)
    return PropertyGraph.from_parts(nodes, edges, skipped)


# ---------------------------------------------------------------------------
# Dictionary NER (reference entity extractor)


class DictionaryNER:
    """Longest-match dictionary tagger over token sequences.

    Matching is case-insensitive and anchored at token boundaries. Returns
    the dictionary names (normalized) in first-occurrence order.
    """

    def __init__(self, names: Iterable[str]):
        self._names: dict[tuple[str, ...], str] = {}
        for name in names:
            toks = tuple(tokenize(name))
            if toks:
                # keep the first-seen name for a token sequence; sorted input makes this stable
                self._names.setdefault(toks, normalize_name(name))
        self._max_len = max((len(k) for k in self._names), default=0)

    def __len__(self):
        return len(self._names)

    def extract(self, text: str) -> list[str]:
        toks = tokenize(text)
        out: list[str] = []
        seen: set[str] = set()
        i = 0
        while i < len(toks):
            for n in range(min(self._max_len, len(toks) - i), 0, -1):
                name = self._names.get(tuple(toks[i:i + n]))
                if name is not None:
                    if name not in seen:
                        seen.add(name)
                        out.append(name)
                    i += n
                    break
            else:
                i += 1
        return out


# ---------------------------------------------------------------------------
# Document-entity association graph


@dataclass(frozen=True)
class AssociationGraph:
    adjacency: dict[str, tuple[str, ...]]
    record_nodes: frozenset[str]

    def neighbors(self, node: str) -> tuple[str, ...]:
        return self.adjacency.get(node, ())

    def degree(self, node: str) -> int:
        return len(self.adjacency.get(node, ()))

    def __contains__(self, node) -> bool:
        return node in self.adjacency

    @property
    def n_edges(self) -> int:
        return sum(len(v) for v in self.adjacency.values()) // 2

    def at_distance_two(self, node: str) -> list[str]:
        """Nodes at exactly graph distance 2, sorted."""
        one = set(self.neighbors(node))
        two = set()
        for m in one:
            two.update(self.neighbors(m))
        two -= one
        two.discard(node)
        return sorted(two)

    def record_projection(self) -> "AssociationGraph":
        """Record-only graph: two records are adjacent iff they share an entity."""
        adj = {}
        for r in sorted(self.record_nodes):
            adj[r] = tuple(x for x in self.at_distance_two(r) if x in self.record_nodes)
        return AssociationGraph(adjacency=adj, record_nodes=self.record_nodes)

    def to_dict(self) -> dict:
        return {
            "adjacency": {k: list(v) for k, v in sorted(self.adjacency.items())},
            "record_nodes": sorted(self.record_nodes),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "AssociationGraph":
        return cls(
            adjacency={k: tuple(v) for k, v in obj["adjacency"].items()},
            record_nodes=frozenset(obj["record_nodes"]),
        )


def record_entities(rec: PatientRecord, uids: set[str], ner: DictionaryNER) -> list[str]:
    """Entities of one record: from triples when present, else NER over the body."""
    if rec.triples:
        out = []
        for s, _, o in rec.triples:
            for name in (normalize_name(s), normalize_name(o)):
                if name and name not in uids and name not in out:
                    out.append(name)
        return out
    return [e for e in ner.extract(rec.title + " " + rec.body) if e not in uids]


def build_association_graph(corpus: Corpus) -> AssociationGraph:
    if corpus.N == 0:
        raise CorpusError("cannot build an association graph from an empty corpus")
    norm_uids = {normalize_name(r.uid) for r in corpus.records}
    names = sorted({
        normalize_name(x)
        for r in corpus.records
        for s, _, o in r.triples
        for x in (s, o)
    } - norm_uids - {""})
    ner = DictionaryNER(names)
    adj: dict[str, set[str]] = {r.uid: set() for r in corpus.records}
    for rec in corpus.records:
        for ent in record_entities(rec, norm_uids, ner):
            if ent == rec.uid:
                continue
            adj[rec.uid].add(ent)
            adj.setdefault(ent, set()).add(rec.uid)
    return AssociationGraph(
        adjacency={k: tuple(sorted(v)) for k, v in sorted(adj.items())},
        record_nodes=frozenset(r.uid for r in corpus.records),
    )
