import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from corpora import random_query, random_records
from hyfed.corpus import Corpus, PatientRecord, Query
from hyfed.retrieval.sql import FusionWeights, RelationalStore, combined_score, render_row, retrieve_sql

IDF_FEVER = math.log(1.5) + 1


def _store(*rows, **kw):
    recs = [PatientRecord(f"p{i + 1}", fields=f) for i, f in enumerate(rows)]
    return RelationalStore(Corpus.from_records(recs, "sql"), **kw)


def test_boolean_score():
    s = _store({"symptom": "cough fever"}, {"symptom": "cough"})
    assert s.boolean_score("rash", "p1") == 0.0
    assert s.boolean_score("fever", "p1") == pytest.approx(IDF_FEVER, abs=1e-12)
    assert s.boolean_score("cough fever", "p1") == pytest.approx(1.0 + IDF_FEVER, abs=1e-12)
    assert s.boolean_score("cough fever", "p1") == pytest.approx(2.405465, abs=1e-6)


def test_bm25_examples():
    # one term in every row (idf 1.0), equal row lengths so doc_len == avg_len
    s = _store({"a": "cough x"}, {"a": "cough y"})
    # tf=1: (1 * 2.2) / (1 + 1.2) evaluates to exactly 1.0
    assert s.natural_language_score("cough", "p1") == pytest.approx(1.0, abs=1e-12)
    s3 = _store({"a": "cough cough cough"}, {"a": "cough cough cough"})
    assert s3.natural_language_score("cough", "p1") == pytest.approx(3 * 2.2 / 4.2, abs=1e-12)
    assert s3.natural_language_score("cough", "p1") == pytest.approx(1.5714, abs=1e-4)
    assert s3.natural_language_score("rash", "p1") == 0.0


def test_exact_match():
    s = _store({"note": "known lung cancer stage II"}, {"note": "cancer of the lung"})
    assert s.exact_match("lung cancer", "p1") == 1
    assert s.exact_match("lung cancer", "p2") == 0
    assert s.exact_match("", "p1") == 0


def test_phrase_similarity():
    s = _store({"symptom": "chest pain"}, {"symptom": "---"})
    assert s.phrase_similarity("chest pain", "p1") == pytest.approx(1.0, abs=1e-9)
    assert s.phrase_similarity("", "p1") == 0.0
    assert s.phrase_similarity("chest pain", "p2") == 0.0


def test_unknown_uid():
    with pytest.raises(KeyError):
        _store({"a": "b"}).boolean_score("b", "zz")


def test_combined_score_examples():
    assert combined_score(1, 6.0, 0.7, 0.9) == pytest.approx(0.92, abs=1e-12)
    assert combined_score(0, 0, 0, 0) == 0.0
    w = FusionWeights(0, 1, 0, 0)
    assert combined_score(0, 1.5, 0, 0, w) == 0.5
    with pytest.raises(ValueError):
        FusionWeights(-1, 0, 0, 0)


def test_single_row_score_is_rerank():
    s = _store({"diagnosis": "gout"}, {"diagnosis": "asthma"})
    (c,) = retrieve_sql(s, Query("gout flare"))
    assert c.uid == "p1"
    assert c.score == oracles.jaccard("gout flare", "gout")


def test_exact_match_sorts_first_in_entity_step():
    # with l1=0 the exact flag only affects ordering: p1 is verbatim but sparse,
    # p2 repeats both tokens (higher fused score) without the contiguous phrase
    w = FusionWeights(0.0, 0.4, 0.3, 0.3)
    s = _store({"d": "lung cancer alpha beta gamma delta epsilon"}, {"d": "cancer cancer lung lung"})
    e = "lung cancer"
    sig1, sig2 = s.signals(e, "p1"), s.signals(e, "p2")
    assert (sig1["exact"], sig2["exact"]) == (1.0, 0.0)
    c1 = combined_score(sig1["exact"], sig1["s_bool"], sig1["s_nl"], sig1["s_sim"], w)
    c2 = combined_score(sig2["exact"], sig2["s_bool"], sig2["s_nl"], sig2["s_sim"], w)
    assert c1 < c2
    out = retrieve_sql(s, Query(e), w=w, n_per_entity=1, ner=type("N", (), {"extract": lambda self, t: [e]})())
    assert [c.uid for c in out] == ["p1"]


def test_no_entities_uses_whole_query():
    s = _store({"diagnosis": "asthma"}, {"diagnosis": "gout"})
    out = retrieve_sql(s, Query("wheeze", "asthma?"), ner=type("N", (), {"extract": lambda self, t: []})())
    assert [c.uid for c in out] == ["p1"]


def test_empty_store():
    s = RelationalStore(Corpus.from_records([PatientRecord("p1", body="text")], "sql"))
    assert len(s) == 0
    assert retrieve_sql(s, Query("anything")) == []


def test_render_row():
    assert render_row({"a": "1", "b": "2"}) == "a: 1; b: 2"


def test_fixture_query_equals_brute_force(fixture_records):
    s = RelationalStore(Corpus.from_records(fixture_records, "sql"))
    q = Query("fatigue and dyspnea", "Patient with fatigue and dyspnea who improved on metoprolol.")
    got = retrieve_sql(s, q, k=30)
    want = oracles.sql_oracle(fixture_records, q, k=30)
    assert [c.uid for c in got] == [u for u, _ in want]
    assert [c.score for c in got] == pytest.approx([r for _, r in want], abs=1e-12)


def test_fixture_signal_frozen(fixture_records):
    s = RelationalStore(Corpus.from_records(fixture_records, "sql"))
    row = s.texts["pt-001"]
    want = min(1.0, max(0.0, oracles.dot(oracles.embed("wheezing"), oracles.embed(row))))
    assert s.phrase_similarity("wheezing", "pt-001") == pytest.approx(want, abs=1e-12)


@given(st.integers(0, 5000))
def test_sql_properties(seed):
    recs = random_records(seed, 24)
    s = RelationalStore(Corpus.from_records(recs, "sql"))
    out = retrieve_sql(s, random_query(seed), k=5)
    assert len({c.uid for c in out}) == len(out) <= 5
    for c in out:
        assert 0.0 <= c.score <= 1.0
        assert 0.0 <= c.signals["s_combined"] <= 1.0 + 1e-12
    keys = [(-c.score, -c.signals["s_combined"], c.uid) for c in out]
    assert keys == sorted(keys)
