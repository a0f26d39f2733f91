"""Three-tier cache with graph-aware prefetching.

* L1: pure LRU over materialized results.
* L2: LRU of stubs for the one-hop neighbours of every admitted node.
* L3: a pinned set of high-degree "hotspot" nodes plus an LRU region of
  stubs for two-hop neighbours.

Lookups probe L1, L2, L3 in order. A hit in L2/L3 copies the entry into L1
(and, with ``promote``, removes it from the lower tier; pinned entries always
stay). Stub values are materialized by the caller via :meth:`TieredCache.admit`.

The prefetch graph is whatever :class:`~hyfed.corpus.AssociationGraph` is
passed in. Clients and the simulator use the record projection of the
document-entity graph, because only record nodes are ever queried.
"""

from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any, Iterable

from .corpus import AssociationGraph, tokenize

L1, L2, L3, MISS = "L1", "L2", "L3", "MISS"
OUTCOMES = (L1, L2, L3, MISS)

_STUB = object()


@dataclass(frozen=True)
class CacheKey:
    fingerprint: int

    @classmethod
    def from_query(cls, text: str, modality: str, top_k: int) -> "CacheKey":
        norm = " ".join(tokenize(text))
        raw = f"{norm}\x1f{modality}\x1f{top_k}".encode("utf-8")
        return cls(int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "big"))

    def __str__(self):
        return f"{self.fingerprint:016x}"


def node_key(node_id: str, modality: str = "", top_k: int = 0) -> CacheKey:
    """Representative key for queries anchored at a graph node."""
    return CacheKey.from_query("node " + node_id, modality, top_k)


@dataclass(frozen=True)
class TierConfig:
    l1_capacity: int = 64
    l2_capacity: int = 256
    l3_capacity: int = 512
    hotspot_size: int = 32
    latency_l1: float = 1.0
    latency_l2: float = 5.0
    latency_l3: float = 20.0
    latency_miss: float = 200.0
    promote: bool = True

    def __post_init__(self):
        if min(self.l1_capacity, self.l2_capacity, self.l3_capacity) < 1:
            raise ValueError("tier capacities must be >= 1")
        if self.hotspot_size < 0:
            raise ValueError("hotspot_size must be >= 0")
        lat = [self.latency_l1, self.latency_l2, self.latency_l3, self.latency_miss]
        if min(lat) < 0 or lat != sorted(lat):
            raise ValueError("latencies must be >= 0 with l1 <= l2 <= l3 <= miss")

    @classmethod
    def from_config(cls, cfg) -> "TierConfig":
        return cls(
            cfg["cache.l1_capacity"], cfg["cache.l2_capacity"], cfg["cache.l3_capacity"],
            cfg["cache.hotspot_size"], cfg["cache.latency_l1_ms"], cfg["cache.latency_l2_ms"],
            cfg["cache.latency_l3_ms"], cfg["cache.latency_miss_ms"], cfg["cache.promote"],
        )

    def cost(self, outcome: str) -> float:
        return {L1: self.latency_l1, L2: self.latency_l2, L3: self.latency_l3, MISS: self.latency_miss}[outcome]


@dataclass
class CacheStats:
    l1_hits: int = 0
    l2_hits: int = 0
    l3_hits: int = 0
    misses: int = 0
    latency_sum: float = 0.0
    baseline_latency: float = 0.0

    @property
    def total(self) -> int:
        return self.l1_hits + self.l2_hits + self.l3_hits + self.misses

    def record(self, outcome: str, cost: float):
        if outcome == L1:
            self.l1_hits += 1
        elif outcome == L2:
            self.l2_hits += 1
        elif outcome == L3:
            self.l3_hits += 1
        else:
            self.misses += 1
        self.latency_sum += cost

    def rate(self, outcome: str) -> float:
        n = {L1: self.l1_hits, L2: self.l2_hits, L3: self.l3_hits, MISS: self.misses}[outcome]
        return n / self.total if self.total else 0.0

    @property
    def hit_rate(self) -> float:
        return (self.total - self.misses) / self.total if self.total else 0.0

    @property
    def mean_latency(self) -> float:
        return self.latency_sum / self.total if self.total else 0.0

    @property
    def reduction(self) -> float:
        if not self.total or self.baseline_latency == 0:
            return 0.0
        return 1.0 - self.mean_latency / self.baseline_latency

    def to_report(self) -> dict:
        return {
            "total": self.total,
            "l1_hits": self.l1_hits,
            "l2_hits": self.l2_hits,
            "l3_hits": self.l3_hits,
            "misses": self.misses,
            "l1_rate": self.rate(L1),
            "l2_rate": self.rate(L2),
            "l3_rate": self.rate(L3),
            "miss_rate": self.rate(MISS),
            "hit_rate": self.hit_rate,
            "mean_latency_ms": self.mean_latency,
            "baseline_latency_ms": self.baseline_latency,
            "reduction": self.reduction,
        }


@dataclass
class LookupResult:
    outcome: str
    value: Any = None
    node_id: str | None = None

    @property
    def needs_value(self) -> bool:
        return self.value is None


class TieredCache:
    """Linearizable three-tier cache; every public method holds one lock."""

    def __init__(self, cfg: TierConfig = TierConfig(), graph: AssociationGraph | None = None,
                 modality: str = "", top_k: int = 0):
        self.cfg = cfg
        self.graph = graph
        self.modality = modality
        self.top_k = top_k
        self._lock = threading.RLock()
        self.l1: OrderedDict[CacheKey, tuple[Any, str | None]] = OrderedDict()
        self.l2: OrderedDict[CacheKey, str | None] = OrderedDict()
        self.l3_pinned: dict[CacheKey, str] = {}
        self.l3: OrderedDict[CacheKey, str | None] = OrderedDict()
        self.stats = CacheStats(baseline_latency=cfg.latency_miss)
        if graph is not None and cfg.hotspot_size > 0:
            self.init_hotspots(graph, cfg.hotspot_size)

    def key_for(self, node_id: str) -> CacheKey:
        return node_key(node_id, self.modality, self.top_k)

    # -- tiers -------------------------------------------------------------

    @property
    def l3_dynamic_capacity(self) -> int:
        return max(self.cfg.l3_capacity - len(self.l3_pinned), 0)

    def _put_l1(self, key, value, node):
        self.l1[key] = (value, node)
        self.l1.move_to_end(key)
        while len(self.l1) > self.cfg.l1_capacity:
            self.l1.popitem(last=False)

    def _put_lru(self, tier: OrderedDict, key, node, cap: int):
        if cap <= 0:
            return
        tier[key] = node
        tier.move_to_end(key)
        while len(tier) > cap:
            tier.popitem(last=False)

    def init_hotspots(self, graph: AssociationGraph, H: int):
        with self._lock:
            ranked = sorted(graph.adjacency, key=lambda n: (-graph.degree(n), n))
            self.l3_pinned = {self.key_for(n): n for n in ranked[:H]}
            for k in self.l3_pinned:
                self.l3.pop(k, None)

    def prefetch_one_hop(self, node_id: str, graph: AssociationGraph | None = None):
        graph = graph or self.graph
        if graph is None:
            return
        with self._lock:
            for m in graph.neighbors(node_id):
                k = self.key_for(m)
                if k in self.l1:
                    continue
                self._put_lru(self.l2, k, m, self.cfg.l2_capacity)

    def prefetch_two_hop(self, node_id: str, graph: AssociationGraph | None = None):
        graph = graph or self.graph
        if graph is None:
            return
        with self._lock:
            for m in graph.at_distance_two(node_id):
                k = self.key_for(m)
                if k in self.l1 or k in self.l3_pinned:
                    continue
                self._put_lru(self.l3, k, m, self.l3_dynamic_capacity)

    # -- public operations -------------------------------------------------

    def lookup(self, key: CacheKey, warmup: bool = False) -> LookupResult:
        with self._lock:
            if key in self.l1:
                self.l1.move_to_end(key)
                value, node = self.l1[key]
                res = LookupResult(L1, value, node)
            elif key in self.l2:
                node = self.l2[key]
                if self.cfg.promote:
                    del self.l2[key]
                else:
                    self.l2.move_to_end(key)
                self._put_l1(key, None, node)
                res = LookupResult(L2, None, node)
            elif key in self.l3_pinned or key in self.l3:
                if key in self.l3_pinned:
                    node = self.l3_pinned[key]
                else:
                    node = self.l3[key]
                    if self.cfg.promote:
                        del self.l3[key]
                    else:
                        self.l3.move_to_end(key)
                self._put_l1(key, None, node)
                res = LookupResult(L3, None, node)
            else:
                res = LookupResult(MISS)
            if not warmup:
                self.stats.record(res.outcome, self.cfg.cost(res.outcome))
            return res

    def admit(self, key: CacheKey, value: Any, node_id: str | None = None):
        """Store a materialized value in L1 and prefetch around ``node_id``."""
        with self._lock:
            self._put_l1(key, value, node_id)
            if node_id is not None and self.graph is not None:
                self.prefetch_one_hop(node_id)
                self.prefetch_two_hop(node_id)

    def resident(self) -> dict[str, list[CacheKey]]:
        with self._lock:
            return {
                L1: list(self.l1),
                L2: list(self.l2),
                L3: list(self.l3_pinned) + list(self.l3),
            }

    def snapshot_stats(self) -> CacheStats:
        with self._lock:
            return CacheStats(**vars(self.stats))


# ---------------------------------------------------------------------------
# Trace replay


@dataclass
class SimulationResult:
    stats: CacheStats
    trace: list[dict] = field(default_factory=list)

    def report(self) -> dict:
        return self.stats.to_report()


def simulate(events: Iterable, cfg: TierConfig, graph: AssociationGraph | None,
             modality: str = "sim", top_k: int = 10) -> SimulationResult:
    """Replay a workload; stats cover the non-warm-up events only.

    Each event needs ``node_id`` and ``is_warmup`` attributes. Misses and
    lower-tier stub hits are materialized (admitted) immediately.
    """
    cache = TieredCache(cfg, graph, modality, top_k)
    trace = []
    hits = n = 0
    for ev in events:
        key = cache.key_for(ev.node_id)
        res = cache.lookup(key, warmup=ev.is_warmup)
        if res.outcome != L1:
            cache.admit(key, f"result:{ev.node_id}", ev.node_id)
        row = {
            "seq": ev.seq,
            "node_id": ev.node_id,
            "is_warmup": int(ev.is_warmup),
            "outcome": res.outcome,
            "latency_ms": cfg.cost(res.outcome),
        }
        if not ev.is_warmup:
            n += 1
            hits += res.outcome != MISS
            row["cumulative_hit_rate"] = hits / n
        else:
            row["cumulative_hit_rate"] = None
        trace.append(row)
    return SimulationResult(cache.snapshot_stats(), trace)
