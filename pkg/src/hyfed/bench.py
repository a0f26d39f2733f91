"""Workload generation and retrieval evaluation.

Random numbers come from numpy's PCG64 bit generator seeded through
``SeedSequence(seed)``; the same seed gives the same trace on every platform
with the same numpy stream.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import AppConfig
from .corpus import AssociationGraph, Query

Run = Mapping[str, Sequence[str]]
Qrels = Mapping[str, Mapping[str, int]]

METRICS = ("MRR", "P@1", "P@5", "P@10", "nDCG@10", "Hit@5")


class BenchError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Workload


@dataclass(frozen=True)
class WorkloadParams:
    restart_prob: float = 0.15
    dwell_prob: float = 0.20
    memory_prob: float = 0.15
    memory_window: int = 10
    warmup: int = 100
    test: int = 500
    seed: int = 42

    def __post_init__(self):
        ps = (self.restart_prob, self.dwell_prob, self.memory_prob)
        if any(not 0.0 <= p <= 1.0 for p in ps) or sum(ps) > 1.0 + 1e-12:
            raise ValueError("workload probabilities must lie in [0,1] and sum to <= 1")
        if self.warmup < 0 or self.test < 0 or self.memory_window < 1:
            raise ValueError("warmup/test must be >= 0 and memory_window >= 1")

    @classmethod
    def from_config(cls, cfg: AppConfig) -> "WorkloadParams":
        return cls(
            cfg["workload.restart_prob"], cfg["workload.dwell_prob"], cfg["workload.memory_prob"],
            cfg["workload.memory_window"], cfg["workload.warmup"], cfg["workload.test"], cfg["seed"],
        )


@dataclass(frozen=True)
class QueryEvent:
    node_id: str
    is_warmup: bool
    seq: int
    kind: str = "walk"


def generate_workload(assoc: AssociationGraph, p: WorkloadParams = WorkloadParams()) -> list[QueryEvent]:
    """Random walk over record nodes with restart, dwell and session memory.

    The first event is a uniform draw. Each later step draws ``u`` in [0,1):
    restart below ``p_r``, dwell below ``p_r+p_d``, revisit from the last
    ``W`` visited nodes below ``p_r+p_d+p_m``, otherwise move to a uniform
    record at distance 2 (falling back to restart when there is none).
    """
    records = sorted(assoc.record_nodes)
    if not records:
        raise BenchError("workload needs at least one record node")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(p.seed)))
    total = p.warmup + p.test
    ring: deque[str] = deque(maxlen=p.memory_window)
    two_hop: dict[str, list[str]] = {}
    events: list[QueryEvent] = []
    cur = None
    t1 = p.restart_prob
    t2 = t1 + p.dwell_prob
    t3 = t2 + p.memory_prob
    for seq in range(total):
        if cur is None:
            cur, kind = records[int(rng.integers(len(records)))], "start"
        else:
            u = float(rng.random())
            if u < t1:
                cur, kind = records[int(rng.integers(len(records)))], "restart"
            elif u < t2:
                kind = "dwell"
            elif u < t3:
                cur, kind = ring[int(rng.integers(len(ring)))], "memory"
            else:
                if cur not in two_hop:
                    two_hop[cur] = [n for n in assoc.at_distance_two(cur) if n in assoc.record_nodes]
                nxt = two_hop[cur]
                if nxt:
                    cur, kind = nxt[int(rng.integers(len(nxt)))], "walk"
                else:
                    cur, kind = records[int(rng.integers(len(records)))], "restart"
        ring.append(cur)
        events.append(QueryEvent(cur, seq < p.warmup, seq, kind))
    return events


# ---------------------------------------------------------------------------
# Metrics


def _first_relevant_rank(ranked: Sequence[str], rel: Mapping[str, int]) -> int | None:
    for i, uid in enumerate(ranked, start=1):
        if rel.get(uid, 0) > 0:
            return i
    return None


def mrr(runs: Run, qrels: Qrels) -> float:
    if not runs:
        raise BenchError("empty run set")
    missing = [q for q in runs if q not in qrels]
    if missing:
        raise BenchError(f"no qrels for queries: {sorted(missing)}")
    total = 0.0
    for q, ranked in runs.items():
        r = _first_relevant_rank(ranked, qrels[q])
        total += 1.0 / r if r else 0.0
    return total / len(runs)


def precision_at_k(runs: Run, qrels: Qrels, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not runs:
        return 0.0
    vals = []
    for q, ranked in runs.items():
        rel = qrels.get(q, {})
        vals.append(sum(1 for u in ranked[:k] if rel.get(u, 0) > 0) / k)
    return sum(vals) / len(vals)


def hit_at_k(runs: Run, qrels: Qrels, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    if not runs:
        return 0.0
    vals = []
    for q, ranked in runs.items():
        rel = qrels.get(q, {})
        vals.append(1.0 if any(rel.get(u, 0) > 0 for u in ranked[:k]) else 0.0)
    return sum(vals) / len(vals)


def _dcg(gains: Sequence[int]) -> float:
    return sum((2.0 ** g - 1.0) / math.log2(i + 2) for i, g in enumerate(gains))


def ndcg_at_k(runs: Run, qrels: Qrels, k: int) -> float:
    """Exponential-gain nDCG; queries with no judged documents are skipped."""
    if k < 1:
        raise ValueError("k must be >= 1")
    vals = []
    for q, ranked in runs.items():
        rel = {u: g for u, g in qrels.get(q, {}).items() if g > 0}
        if not rel:
            continue
        ideal = _dcg(sorted(rel.values(), reverse=True)[:k])
        vals.append(_dcg([rel.get(u, 0) for u in ranked[:k]]) / ideal)
    return sum(vals) / len(vals) if vals else 0.0


def metric_table(runs: Run, qrels: Qrels) -> dict[str, float]:
    return {
        "MRR": mrr(runs, qrels),
        "P@1": precision_at_k(runs, qrels, 1),
        "P@5": precision_at_k(runs, qrels, 5),
        "P@10": precision_at_k(runs, qrels, 10),
        "nDCG@10": ndcg_at_k(runs, qrels, 10),
        "Hit@5": hit_at_k(runs, qrels, 5),
    }


# ---------------------------------------------------------------------------
# Files


def load_queries(path) -> dict[str, Query]:
    out: dict[str, Query] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out[str(obj["query_id"])] = Query(obj.get("title", ""), obj.get("abstract", ""))
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise BenchError(f"{path}: line {lineno}: {exc}") from None
    return out


def load_qrels(path) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 3:
                raise BenchError(f"{path}: line {lineno}: expected query_id<TAB>uid<TAB>grade")
            try:
                grade = int(row[2])
            except ValueError:
                raise BenchError(f"{path}: line {lineno}: grade must be an integer") from None
            if grade < 1:
                raise BenchError(f"{path}: line {lineno}: grade must be >= 1")
            out.setdefault(row[0], {})[row[1]] = grade
    return out


# ---------------------------------------------------------------------------
# Benchmark runner


def parse_grid(spec: str) -> list[float]:
    """``start:stop:step`` (inclusive) -> list of floats rounded to 10 places."""
    try:
        a, b, s = (float(x) for x in spec.split(":"))
    except ValueError:
        raise BenchError(f"bad grid {spec!r}, want start:stop:step") from None
    if s <= 0 or b < a:
        raise BenchError(f"bad grid {spec!r}")
    n = int(math.floor((b - a) / s + 1e-9))
    return [round(a + i * s, 10) for i in range(n + 1)]


def run_queries(backend, queries: Mapping[str, Query], k: int = 10, alpha=None) -> dict[str, list[str]]:
    return {
        qid: [h.candidate.uid for h in backend.retrieve(q, k, alpha=alpha)]
        for qid, q in sorted(queries.items())
    }


def run_benchmark(backends: Mapping[str, object], queries: Mapping[str, Query], qrels: Qrels,
                  alpha_grid: Sequence[float] | None = None) -> dict:
    """Table-style metrics per backend plus an optional alpha sweep of the text backend."""
    unknown = sorted(set(qrels) - set(queries))
    if unknown:
        raise BenchError(f"qrels reference unknown query ids: {unknown}")
    judged = {q: v for q, v in queries.items() if q in qrels}
    if not judged:
        raise BenchError("no judged queries: qrels cover none of the queries")
    if alpha_grid is not None and "text" not in backends:
        raise BenchError("alpha sweep needs the text backend")
    report: dict = {"n_queries": len(judged), "backends": {}}
    for name in sorted(backends):
        runs = run_queries(backends[name], judged)
        report["backends"][name] = metric_table(runs, qrels)
    if alpha_grid is not None:
        rows = []
        for a in alpha_grid:
            runs = run_queries(backends["text"], judged, alpha=a)
            rows.append({"alpha": a, "MRR": mrr(runs, qrels), "nDCG@10": ndcg_at_k(runs, qrels, 10)})
        report["alpha_sweep"] = rows
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


def report_csv(report: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["section", "backend", "alpha", *METRICS])
    for name, row in sorted(report["backends"].items()):
        w.writerow(["metrics", name, "", *(f"{row[m]:.6f}" for m in METRICS)])
    for row in report.get("alpha_sweep", []):
        vals = [f"{row[m]:.6f}" if m in row else "" for m in METRICS]
        w.writerow(["alpha_sweep", "text", f"{row['alpha']:.4f}", *vals])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Synthetic graphs


def synthetic_records(n_records: int, n_entities: int | None = None, per_record: int = 4, seed: int = 42):
    """Records linked to Zipf-popular entities, for cache studies beyond the fixture scale."""
    from .corpus import PatientRecord

    if n_records < 1 or per_record < 1:
        raise ValueError("n_records and per_record must be >= 1")
    n_entities = n_entities or max(n_records // 2, per_record)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    weights = 1.0 / np.arange(1, n_entities + 1)
    weights /= weights.sum()
    out = []
    for i in range(n_records):
        k = min(per_record, n_entities)
        ents = sorted(int(e) for e in rng.choice(n_entities, size=k, replace=False, p=weights))
        uid = f"syn-{i:05d}"
        out.append(PatientRecord(uid, "", "", {}, tuple((uid, "LINKED_TO", f"entity {e}") for e in ents)))
    return out
