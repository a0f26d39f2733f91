import pytest
from hypothesis import settings

from hyfed import fixtures
from hyfed.bench import load_qrels, load_queries
from hyfed.config import AppConfig
from hyfed.corpus import Corpus, ingest_corpus
from hyfed.index import IndexBundle
from hyfed.retrieval import make_backend

settings.register_profile("ci", deadline=None, max_examples=60)
settings.load_profile("ci")


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    # config reads HYFED_* variables; keep the host environment out of tests
    import os

    for name in list(os.environ):
        if name.startswith("HYFED_"):
            monkeypatch.delenv(name)


@pytest.fixture(scope="session")
def fixture_records():
    return fixtures.build_records()


@pytest.fixture(scope="session")
def fixture_corpus_path():
    return fixtures.fixture_path("corpus.jsonl")


@pytest.fixture(scope="session")
def bundles(fixture_corpus_path):
    return {m: IndexBundle.build(ingest_corpus(fixture_corpus_path, m)) for m in ("text", "sql", "kg")}


@pytest.fixture(scope="session")
def backends(bundles):
    cfg = AppConfig()
    return {m: make_backend(b, cfg) for m, b in bundles.items()}


@pytest.fixture(scope="session")
def queries():
    return load_queries(fixtures.fixture_path("queries.jsonl"))


@pytest.fixture(scope="session")
def qrels():
    return load_qrels(fixtures.fixture_path("qrels.tsv"))


@pytest.fixture(scope="session")
def expected():
    import json

    return json.loads(fixtures.fixture_path("expected.json").read_text())


@pytest.fixture
def corpus_of():
    def make(records, modality="text"):
        return Corpus.from_records(records, modality)

    return make
