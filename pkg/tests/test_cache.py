import random
from collections import OrderedDict
from dataclasses import dataclass

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from hyfed.bench import WorkloadParams, generate_workload
from hyfed.cache import L1, L2, L3, MISS, CacheKey, CacheStats, TierConfig, TieredCache, node_key, simulate
from hyfed.corpus import AssociationGraph, Corpus, build_association_graph


def graph(edges, records=None):
    adj = {}
    for a, b in edges:
        adj.setdefault(a, set()).add(b)
        adj.setdefault(b, set()).add(a)
    nodes = frozenset(records if records is not None else adj)
    for n in nodes:
        adj.setdefault(n, set())
    return AssociationGraph({k: tuple(sorted(v)) for k, v in sorted(adj.items())}, nodes)


@dataclass(frozen=True)
class Ev:
    node_id: str
    is_warmup: bool
    seq: int


def small_cfg(**kw):
    base = dict(l1_capacity=2, l2_capacity=4, l3_capacity=4, hotspot_size=0)
    base.update(kw)
    return TierConfig(**base)


def test_cache_key_normalizes_text():
    a = CacheKey.from_query("Cough,  FEVER", "text", 10)
    assert a == CacheKey.from_query("cough fever", "text", 10)
    assert a != CacheKey.from_query("cough fever", "sql", 10)
    assert a != CacheKey.from_query("cough fever", "text", 5)
    assert len(str(a)) == 16


def test_cold_miss_then_admit_hit():
    c = TieredCache(small_cfg())
    k = node_key("a")
    assert c.lookup(k).outcome == MISS
    c.admit(k, "v")
    res = c.lookup(k)
    assert (res.outcome, res.value) == (L1, "v")


def test_l1_lru_eviction():
    c = TieredCache(small_cfg())
    a, b, d = node_key("a"), node_key("b"), node_key("c")
    c.admit(a, 1)
    c.admit(b, 2)
    c.admit(d, 3)
    assert c.lookup(a).outcome == MISS


def test_l1_recency():
    c = TieredCache(small_cfg())
    a, b, d = node_key("a"), node_key("b"), node_key("c")
    c.admit(a, 1)
    c.admit(b, 2)
    c.lookup(a)
    c.admit(d, 3)
    assert c.lookup(a).outcome == L1
    assert c.lookup(b).outcome == MISS


def test_prefetch_then_promotion():
    g = graph([("a", "b")])
    c = TieredCache(small_cfg(), g)
    c.admit(c.key_for("a"), "A", "a")
    kb = c.key_for("b")
    assert kb in c.l2
    first = c.lookup(kb)
    assert first.outcome == L2 and first.needs_value and first.node_id == "b"
    assert kb not in c.l2
    assert c.lookup(kb).outcome == L1


def test_prefetch_one_hop_rules():
    g = graph([("x", "m1"), ("x", "m2")], records=["x", "m1", "m2", "iso"])
    c = TieredCache(small_cfg(), g)
    c.prefetch_one_hop("x")
    assert set(c.l2) == {c.key_for("m1"), c.key_for("m2")}
    before = dict(c.l2)
    c.prefetch_one_hop("iso")
    assert dict(c.l2) == before
    c2 = TieredCache(small_cfg(), g)
    c2.admit(c2.key_for("m1"), "v")
    c2.prefetch_one_hop("x")
    assert c2.key_for("m1") not in c2.l2


def test_hotspot_star_center():
    g = graph([("hub", f"s{i}") for i in range(9)])
    c = TieredCache(small_cfg(hotspot_size=1), g)
    assert list(c.l3_pinned.values()) == ["hub"]
    assert c.lookup(c.key_for("hub")).outcome == L3


def test_hotspots_larger_than_graph_pin_everything():
    g = graph([("a", "b"), ("b", "c")])
    c = TieredCache(small_cfg(hotspot_size=10, l3_capacity=8), g)
    assert sorted(c.l3_pinned.values()) == ["a", "b", "c"]


def test_two_hop_path():
    g = graph([("a", "b"), ("b", "c")])
    c = TieredCache(small_cfg(), g)
    c.admit(c.key_for("a"), "A", "a")
    assert list(c.l3.values()) == ["c"]
    assert list(c.l2.values()) == ["b"]
    assert c.lookup(c.key_for("c")).outcome == L3


def test_no_promote_keeps_lower_tier():
    g = graph([("a", "b")])
    c = TieredCache(small_cfg(promote=False), g)
    c.admit(c.key_for("a"), "A", "a")
    assert c.lookup(c.key_for("b")).outcome == L2
    assert c.key_for("b") in c.l2


def test_warmup_not_counted():
    c = TieredCache(small_cfg())
    c.lookup(node_key("a"), warmup=True)
    assert c.stats.total == 0


def test_tier_config_validation():
    with pytest.raises(ValueError):
        TierConfig(l1_capacity=0)
    with pytest.raises(ValueError):
        TierConfig(latency_l1=50.0, latency_l2=5.0)
    with pytest.raises(ValueError):
        TierConfig(hotspot_size=-1)


def test_stats_arithmetic():
    s = CacheStats(baseline_latency=200.0)
    for o in (L1, L1, L2, MISS):
        s.record(o, {L1: 1.0, L2: 5.0, MISS: 200.0}[o])
    r = s.to_report()
    assert r["hit_rate"] == 0.75 and r["l1_rate"] == 0.5
    assert r["mean_latency_ms"] == pytest.approx(207 / 4)
    assert r["reduction"] == pytest.approx(1 - (207 / 4) / 200)
    assert CacheStats().to_report()["hit_rate"] == 0.0


def test_simulate_worst_case():
    g = graph([], records=[f"n{i}" for i in range(5)])
    res = simulate([Ev(f"n{i}", False, i) for i in range(5)], small_cfg(), g)
    assert res.stats.hit_rate == 0.0
    assert res.stats.mean_latency == 200.0


def test_simulate_best_case():
    g = graph([], records=["k"])
    evs = [Ev("k", True, 0)] + [Ev("k", False, i) for i in range(1, 11)]
    res = simulate(evs, small_cfg(), g)
    assert res.stats.l1_hits == 10 and res.stats.hit_rate == 1.0
    assert res.trace[0]["cumulative_hit_rate"] is None
    assert res.trace[-1]["cumulative_hit_rate"] == 1.0


def test_fixture_workload_stats_frozen(fixture_records, expected):
    assoc = build_association_graph(Corpus.from_records(fixture_records))
    events = generate_workload(assoc, WorkloadParams())
    a = simulate(events, TierConfig(), assoc.record_projection()).report()
    b = simulate(events, TierConfig(), assoc.record_projection()).report()
    assert a == b == expected["cache_seed42"]
    assert a["hit_rate"] >= 0.80


# ---------------------------------------------------------------------------
# Exhaustive LRU equivalence


def _canonical_traces_dfs(cache, ref, trace, max_len, n_keys, counter):
    # LRU is invariant under renaming keys, so only traces whose keys appear in
    # first-use order (restricted growth strings) need to be enumerated.
    if len(trace) == max_len:
        return
    used = max(trace) + 1 if trace else 0
    for k in range(min(used + 1, n_keys)):
        saved_l1 = OrderedDict(cache.l1)
        saved_ref = list(ref.items)
        key = node_key(str(k))
        got = cache.lookup(key).outcome == L1
        want = ref.get(k)
        assert got == want, trace + [k]
        if not got:
            cache.admit(key, k)
            ref.put(k)
        assert [int(x) for x, _ in (v for v in cache.l1.values())] == ref.items, trace + [k]
        counter[0] += 1
        _canonical_traces_dfs(cache, ref, trace + [k], max_len, n_keys, counter)
        cache.l1 = saved_l1
        ref.items = saved_ref


def test_lru_matches_reference_exhaustively():
    cache = TieredCache(TierConfig(l1_capacity=2, hotspot_size=0))
    counter = [0]
    _canonical_traces_dfs(cache, oracles.ListLRU(2), [], 12, 4, counter)
    # number of restricted growth strings of length 1..12 over at most 4 symbols
    assert counter[0] == 934_119


def test_restricted_growth_count():
    # independent count via Stirling numbers of the second kind
    from functools import lru_cache

    @lru_cache(None)
    def s2(n, k):
        if n == k:
            return 1
        if k == 0 or k > n:
            return 0
        return k * s2(n - 1, k) + s2(n - 1, k - 1)

    assert sum(s2(n, k) for n in range(1, 13) for k in range(1, 5)) == 934_119


def test_pinned_hotspots_never_evicted():
    rng = random.Random(7)
    for trial in range(1000):
        n = rng.randint(3, 12)
        names = [f"v{i}" for i in range(n)]
        edges = [(a, b) for i, a in enumerate(names) for b in names[i + 1:] if rng.random() < 0.3]
        g = graph(edges, records=names)
        cfg = TierConfig(l1_capacity=rng.randint(1, 3), l2_capacity=rng.randint(1, 3),
                         l3_capacity=rng.randint(1, 6), hotspot_size=rng.randint(1, 4))
        c = TieredCache(cfg, g)
        pinned = dict(c.l3_pinned)
        for _ in range(rng.randint(1, 40)):
            node = rng.choice(names)
            key = c.key_for(node)
            res = c.lookup(key)
            if key in pinned:
                assert res.outcome != MISS
            if res.outcome != L1:
                c.admit(key, node, node)
            assert c.l3_pinned == pinned, trial
            assert len(c.l1) <= cfg.l1_capacity and len(c.l2) <= cfg.l2_capacity
            assert len(c.l3_pinned) + len(c.l3) <= max(cfg.l3_capacity, len(pinned))


@given(st.lists(st.integers(0, 5), max_size=40), st.integers(1, 4))
def test_l1_only_matches_reference(trace, cap):
    c = TieredCache(TierConfig(l1_capacity=cap, hotspot_size=0))
    ref = oracles.ListLRU(cap)
    for k in trace:
        key = node_key(str(k))
        assert (c.lookup(key).outcome == L1) == ref.get(k)
        c.admit(key, k)
        ref.put(k)


@given(st.lists(st.integers(0, 7), min_size=1, max_size=60), st.integers(0, 10))
def test_simulation_accounting(seq, warm):
    names = [f"n{i}" for i in range(8)]
    g = graph([(names[i], names[i + 1]) for i in range(7)], records=names)
    evs = [Ev(names[k], i < warm, i) for i, k in enumerate(seq)]
    res = simulate(evs, TierConfig(l1_capacity=2, l2_capacity=2, l3_capacity=3, hotspot_size=1), g)
    s = res.stats
    assert s.total == sum(1 for e in evs if not e.is_warmup)
    assert s.l1_hits + s.l2_hits + s.l3_hits + s.misses == s.total
    assert len(res.trace) == len(evs)
    assert all(r["outcome"] in (L1, L2, L3, MISS) for r in res.trace)
