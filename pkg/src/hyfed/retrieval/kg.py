"""Entity-anchored patient retrieval over the property graph.

Pipeline: query entities -> two-stage node matching (exact name lookup, then
reranker-scored semantic matching gated by ``tau`` and rank ``K``) -> one
relation-path statement per patient-adjacent edge -> statement reranking ->
``s_final = alpha * s_entity + (1 - alpha) * s_stmt`` -> best path per patient.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..corpus import DictionaryNER, PropertyGraph, Query, normalize_name
from ..models import JaccardReranker
from .common import ScoredCandidate, check_weight, weighted

DEFAULT_TAU = 0.9
DEFAULT_ALPHA = 0.5
DEFAULT_SEMANTIC_TOPK = 5
DEFAULT_EXCLUDE = frozenset({"Patient"})

EXACT, SEMANTIC, NONE = "exact", "semantic", "none"


@dataclass(frozen=True)
class EntityMatch:
    entity: str
    node_id: str | None
    s_entity: float
    stage: str


@dataclass
class CandidateStatement:
    text: str
    patient_uid: str
    s_entity: float
    s_stmt: float = 0.0
    s_final: float = 0.0
    entity: str = ""
    relation: str = ""


def render_statement(entity_name: str, relation: str, patient: str) -> str:
    return f"Entity '{entity_name}' --{relation}--> Patient '{patient}'"


def graph_ner(g: PropertyGraph, exclude=DEFAULT_EXCLUDE) -> DictionaryNER:
    return DictionaryNER(sorted(name for label, name in g.nodes.values() if label not in exclude))


def extract_entities(text: str, g: PropertyGraph, ner=None) -> list[str]:
    return (ner or graph_ner(g)).extract(text)


def match_entity(
    e: str,
    g: PropertyGraph,
    tau: float = DEFAULT_TAU,
    K: int = DEFAULT_SEMANTIC_TOPK,
    reranker=None,
    exclude=DEFAULT_EXCLUDE,
) -> list[EntityMatch]:
    check_weight("tau", tau)
    if K < 1:
        raise ValueError("K must be >= 1")
    for node_id in g.name_index.get(normalize_name(e), ()):
        if g.label(node_id) not in exclude:
            return [EntityMatch(e, node_id, 1.0, EXACT)]

    reranker = reranker or JaccardReranker()
    cands = sorted(n for n, (label, _) in g.nodes.items() if label not in exclude)
    scores = reranker.score_many(e, [g.nodes[n][1] for n in cands])
    kept = sorted(((s, n) for s, n in zip(scores, cands) if s >= tau), key=lambda x: (-x[0], x[1]))
    return [EntityMatch(e, n, s, SEMANTIC) for s, n in kept[:K]]


def patient_paths(g: PropertyGraph, match: EntityMatch) -> list[CandidateStatement]:
    if match.node_id is None or match.s_entity <= 0.0:
        return []
    name = g.nodes[match.node_id][1]
    paths = set()
    for src, rel, dst in g.incident(match.node_id):
        other = dst if src == match.node_id else src
        if other != match.node_id and g.label(other) == "Patient":
            paths.add((rel, g.nodes[other][1]))
    return [
        CandidateStatement(
            text=render_statement(name, rel, uid),
            patient_uid=uid,
            s_entity=match.s_entity,
            entity=name,
            relation=rel,
        )
        for rel, uid in sorted(paths)
    ]


def fuse_statement(s_entity: float, s_stmt: float, alpha: float = DEFAULT_ALPHA) -> float:
    return weighted(alpha, s_entity, s_stmt)


def retrieve_kg(
    g: PropertyGraph,
    q: Query,
    k: int = 10,
    tau: float = DEFAULT_TAU,
    K: int = DEFAULT_SEMANTIC_TOPK,
    alpha: float = DEFAULT_ALPHA,
    reranker=None,
    ner=None,
    exclude=DEFAULT_EXCLUDE,
    uid_map: dict[str, str] | None = None,
) -> tuple[list[ScoredCandidate], list[CandidateStatement]]:
    """Return the top-k patients and, aligned with them, their winning statements.

    ``uid_map`` maps normalized patient node names back to corpus uids.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    check_weight("alpha", alpha)
    reranker = reranker or JaccardReranker()
    text = q.text
    statements: list[CandidateStatement] = []
    for e in extract_entities(text, g, ner or graph_ner(g, exclude)):
        for m in match_entity(e, g, tau, K, reranker, exclude):
            statements.extend(patient_paths(g, m))
    if not statements:
        return [], []

    # each distinct statement text is scored once; order is input-stable
    unique = sorted({s.text for s in statements})
    stmt_scores = dict(zip(unique, reranker.score_many(text, unique)))
    for s in statements:
        s.s_stmt = stmt_scores[s.text]
        s.s_final = fuse_statement(s.s_entity, s.s_stmt, alpha)
    statements.sort(key=lambda s: (-s.s_final, s.patient_uid, s.text))

    best: dict[str, CandidateStatement] = {}
    for s in statements:
        best.setdefault(s.patient_uid, s)
    winners = list(best.values())[:k]
    uid_map = uid_map or {}
    cands = [
        ScoredCandidate(
            uid=uid_map.get(s.patient_uid, s.patient_uid),
            score=s.s_final,
            signals={"s_entity": s.s_entity, "s_stmt": s.s_stmt},
        )
        for s in winners
    ]
    return cands, winners
