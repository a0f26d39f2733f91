import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from corpora import random_query, random_records
from hyfed.corpus import Corpus, PatientRecord, Query
from hyfed.retrieval.text import (
    SparseVector,
    TextIndex,
    cos_tfidf,
    hybrid_score,
    retrieve_text,
    tfidf_weighting,
)


@pytest.fixture
def two_docs():
    return Corpus.from_records([PatientRecord("p1", body="cough fever"), PatientRecord("p2", body="cough")])


def test_tfidf_weights_and_normalization(two_docs):
    idx = tfidf_weighting(two_docs)
    tid = idx.term_ids
    assert idx.idf[tid["cough"]] == 1.0
    assert idx.idf[tid["fever"]] == pytest.approx(math.log(1.5) + 1)
    v = idx.doc_vectors["p1"].as_dict()
    assert v[tid["cough"]] == pytest.approx(0.5797, abs=1e-3)
    assert v[tid["fever"]] == pytest.approx(0.8148, abs=1e-3)


def test_cos_tfidf_examples(two_docs):
    idx = tfidf_weighting(two_docs)
    d = idx.doc_vectors["p1"]
    assert cos_tfidf(d, d) == pytest.approx(1.0)
    assert cos_tfidf(SparseVector.from_weights({0: 1.0}), SparseVector.from_weights({1: 1.0})) == 0.0
    q = SparseVector.from_weights({idx.term_ids["fever"]: 1.405465}, normalize=False)
    assert cos_tfidf(q, d) == pytest.approx(0.8148, abs=1e-4)
    assert cos_tfidf(SparseVector.from_weights({}), d) == 0.0


def test_hybrid_score_substitution_and_boundaries():
    assert hybrid_score(0.5, 0.25, 0.8) == pytest.approx(0.45, abs=1e-12)
    assert hybrid_score(0.123456789, 0.9, 1.0) == 0.123456789
    assert hybrid_score(0.123456789, 0.987654321, 0.0) == 0.987654321
    with pytest.raises(ValueError):
        hybrid_score(0.1, 0.1, 1.5)


@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1))
def test_hybrid_score_between_operands(c, r, a):
    s = hybrid_score(c, r, a)
    assert min(c, r) - 1e-12 <= s <= max(c, r) + 1e-12


def test_single_overlapping_record_ranks_first():
    c = Corpus.from_records([
        PatientRecord("p1", body="wheezing at night"),
        PatientRecord("p2", body="broken wrist"),
        PatientRecord("p3", body="sprained ankle"),
    ])
    out = retrieve_text(TextIndex(c), Query("wheezing"), k=1)
    assert [x.uid for x in out] == ["p1"]


def test_tie_orders_uids_lexicographically():
    c = Corpus.from_records([PatientRecord("p2", body="cough"), PatientRecord("p10", body="cough")])
    out = retrieve_text(TextIndex(c), Query("cough"), k=2)
    assert out[0].score == out[1].score
    assert [x.uid for x in out] == ["p10", "p2"]


def test_full_pool_equals_brute_force_sort(fixture_records):
    c = Corpus.from_records(fixture_records)
    q = Query("wheezing with dyspnea", "cough at night")
    got = retrieve_text(TextIndex(c), q, k=30, pool=30)
    want = oracles.text_oracle(fixture_records, q, k=30, pool=30)
    assert [(x.uid, round(x.score, 12)) for x in got] == [(u, round(s, 12)) for u, s in want]


def test_signals_recorded(two_docs):
    out = retrieve_text(TextIndex(two_docs), Query("fever"), k=2)
    assert set(out[0].signals) == {"cos_tfidf", "reranker", "dense"}


def test_argument_validation(two_docs):
    idx = TextIndex(two_docs)
    with pytest.raises(ValueError):
        retrieve_text(idx, Query("x"), k=0)
    with pytest.raises(ValueError):
        retrieve_text(idx, Query("x"), k=5, pool=2)
    assert retrieve_text(TextIndex(Corpus.from_records([])), Query("x")) == []


@given(st.integers(0, 5000), st.sampled_from([0.0, 0.3, 0.8, 1.0]))
def test_retrieve_text_properties(seed, alpha):
    recs = random_records(seed, 24)
    out = retrieve_text(TextIndex(Corpus.from_records(recs)), random_query(seed), k=5, alpha=alpha, pool=8)
    assert len(out) <= 5
    assert len({x.uid for x in out}) == len(out)
    keys = [(-x.score, x.uid) for x in out]
    assert keys == sorted(keys)
    for x in out:
        assert 0.0 <= x.score <= 1.0
        assert x.score == hybrid_score(x.signals["cos_tfidf"], x.signals["reranker"], alpha)
