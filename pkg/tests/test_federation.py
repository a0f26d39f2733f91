import json
import socket
import threading
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hyfed import fixtures
from hyfed.config import AppConfig
from hyfed.corpus import Corpus, PatientRecord
from hyfed.federation import (
    PROTOCOL_VERSION,
    AggregationError,
    Envelope,
    FederatedClient,
    FederationServer,
    InProcessChannel,
    ProtocolError,
    Transcript,
    VersionMismatch,
    aggregate,
    decode,
    encode,
    minmax,
    remote_query,
    run_client,
    serve,
    stop,
)
from hyfed.index import IndexBundle
from hyfed.privacy import detect_pii
from hyfed.retrieval import make_backend


def _clients(backends, cfg=None):
    cfg = cfg or AppConfig()
    return [FederatedClient(f"{m}-client", backends[m], cfg) for m in ("text", "sql", "kg")]


def _server(backends, transcript=None, cfg=None):
    srv = FederationServer(cfg or AppConfig(), transcript)
    for c in _clients(backends, cfg):
        assert srv.add_local(c).type == "Ack"
    return srv


# ---------------------------------------------------------------------------
# Codec

_json = st.recursive(
    st.none() | st.booleans() | st.integers(-10**6, 10**6) | st.floats(allow_nan=False, allow_infinity=False)
    | st.text(max_size=20),
    lambda inner: st.lists(inner, max_size=4)
    | st.dictionaries(st.text(max_size=8).filter(lambda k: k not in ("body", "fields", "triples", "mapping")),
                      inner, max_size=4),
    max_leaves=12,
)


@given(st.sampled_from(["RetrieveRequest", "RetrieveResponse", "Register", "Ack", "Error", "Report"]),
       st.text(max_size=12), st.dictionaries(st.sampled_from(["a", "b", "results", "x y"]), _json, max_size=4))
def test_round_trip(typ, qid, payload):
    env = Envelope(typ, qid, payload)
    frame = encode(env)
    assert frame.endswith(b"\n") and frame.count(b"\n") == 1
    assert decode(frame) == env


@pytest.mark.parametrize("key", ["body", "fields", "triples", "mapping"])
def test_forbidden_keys_rejected_anywhere(key):
    raw = json.dumps({"version": 1, "type": "RetrieveResponse", "query_id": "q",
                      "payload": {"results": [{"x": {key: "secret"}}]}}) + "\n"
    with pytest.raises(ProtocolError, match=key):
        decode(raw.encode())
    with pytest.raises(ProtocolError):
        encode(Envelope("RetrieveResponse", "q", {key: "x"}))


def test_truncated_and_malformed_frames():
    frame = encode(Envelope("Ack", "q", {"a": 1}))
    with pytest.raises(ProtocolError, match="byte offset"):
        decode(frame[:-5])
    with pytest.raises(ProtocolError, match="byte offset"):
        decode(b'{"version": 1,\n')
    with pytest.raises(ProtocolError, match="UTF-8"):
        decode(b"\xff\xfe\n")
    with pytest.raises(ProtocolError, match="missing"):
        decode(b'{"version": 1}\n')
    with pytest.raises(ProtocolError, match="unknown message type"):
        decode(b'{"version": 1, "type": "Hello", "query_id": "", "payload": {}}\n')
    with pytest.raises(ProtocolError, match="newline"):
        decode(b'{"a": 1}\n{"b": 2}\n')


def test_version_mismatch():
    frame = encode(Envelope("Ack", "", {}, version=2))
    with pytest.raises(VersionMismatch, match="got 2, expected 1"):
        decode(frame)
    assert decode(frame, expected_version=None).version == 2


def test_transcript_file(tmp_path):
    t = Transcript(tmp_path / "t.tsv")
    t.record("send", "c1", encode(Envelope("Ack", "", {})))
    assert (tmp_path / "t.tsv").read_text().startswith("send\tc1\t{")
    assert b'"type":"Ack"' in t.data()


# ---------------------------------------------------------------------------
# Aggregation


def _resp(cid, scores, modality="text"):
    return {"client_id": cid, "modality": modality,
            "results": [{"uid_hash": h, "score": s, "summary_text": f"s-{h}", "signals": {}} for h, s in scores]}


def test_minmax():
    assert minmax([0.9, 0.1]) == [1.0, 0.0]
    assert minmax([0.5, 0.5]) == [1.0, 1.0]
    assert minmax([]) == []


def test_aggregate_two_clients_example():
    rep = aggregate([_resp("B", [("h3", 0.5), ("h4", 0.5)]), _resp("A", [("h1", 0.9), ("h2", 0.1)])], k_global=3)
    assert [(e["client_id"], e["uid_hash"], e["fused_score"]) for e in rep.ranking] == [
        ("A", "h1", 1.0), ("B", "h3", 1.0), ("B", "h4", 1.0)]


def test_aggregate_single_client_keeps_order():
    rep = aggregate([_resp("A", [("z", 0.9), ("a", 0.5), ("m", 0.1)])])
    assert [e["uid_hash"] for e in rep.ranking] == ["z", "a", "m"]
    assert rep.generation.startswith("[1] A (text) patient z\ns-z")


def test_aggregate_empty_and_errors():
    rep = aggregate([_resp("A", []), _resp("B", [("h", 0.3)])])
    assert [e["client_id"] for e in rep.ranking] == ["B"]
    with pytest.raises(AggregationError):
        aggregate([])
    with pytest.raises(AggregationError, match="duplicate"):
        aggregate([_resp("A", []), _resp("A", [])])
    with pytest.raises(AggregationError, match="non-finite"):
        aggregate([_resp("A", [("h", float("nan"))])])


@given(st.lists(st.tuples(st.sampled_from("ABC"), st.sampled_from(["h1", "h2", "h3", "h4"]), st.floats(0, 1)),
                max_size=12))
def test_aggregate_order_independent(rows):
    by = {}
    for cid, h, s in rows:
        by.setdefault(cid, []).append((h, s))
    resps = [_resp(c, v) for c, v in by.items()]
    if not resps:
        return
    a = aggregate(resps, 5).to_dict()
    b = aggregate(list(reversed(resps)), 5).to_dict()
    assert a == b
    keys = [(-e["fused_score"], e["client_id"], e["uid_hash"]) for e in a["ranking"]]
    assert keys == sorted(keys) and len(keys) <= 5


# ---------------------------------------------------------------------------
# Clients and the server


def test_register_roster_and_rejections(backends):
    srv = _server(backends)
    assert len(srv.roster) == 3
    dup = FederatedClient("text-client", backends["text"])
    err = srv.add_local(dup)
    assert err.type == "Error" and "duplicate client_id" in err.payload["message"]
    late = FederatedClient("v2-client", backends["text"])
    err = srv.add_local(late, version=2)
    assert err.type == "Error" and "version mismatch" in err.payload["message"]
    assert len(srv.roster) == 3
    bad = srv.register(Envelope("Register", "", {"client_id": "x", "modality": "image"}), None)
    assert bad.type == "Error"


def test_repeated_request_served_from_cache(backends):
    c = FederatedClient("t", backends["text"])
    req = Envelope("RetrieveRequest", "q1", {"title": "wheezing with dyspnea", "abstract": "", "top_k": 3})
    first = c.handle(req)
    assert c.cache.stats.misses == 1
    second = c.handle(Envelope("RetrieveRequest", "q2", req.payload))
    assert c.cache.stats.l1_hits == 1
    assert second.payload == first.payload
    assert (first.query_id, second.query_id) == ("q1", "q2")


def test_bad_request_and_empty_corpus(backends):
    c = FederatedClient("t", backends["text"])
    err = c.handle(Envelope("RetrieveRequest", "q", {"title": "x", "top_k": 0}))
    assert err.type == "Error" and "bad request" in err.payload["message"]
    assert c.handle(Envelope("Ack", "q", {})).type == "Error"
    empty = make_backend(IndexBundle.build(Corpus.from_records([], "text")))
    resp = FederatedClient("e", empty).handle(Envelope("RetrieveRequest", "q", {"title": "x", "top_k": 3}))
    assert resp.type == "RetrieveResponse" and resp.payload["results"] == []


def test_uid_hashes_differ_between_clients(backends):
    req = Envelope("RetrieveRequest", "q", {"title": "wheezing", "abstract": "", "top_k": 3})
    a = FederatedClient("a", backends["text"]).handle(req).payload["results"]
    b = FederatedClient("b", backends["text"]).handle(req).payload["results"]
    assert {r["uid_hash"] for r in a}.isdisjoint({r["uid_hash"] for r in b})


def test_local_federation_report(backends):
    srv = _server(backends)
    rep = srv.query("wheezing with dyspnea", "cough at night", top_k=5, k_global=6)
    assert rep.query_id == "q000001"
    assert set(rep.clients) == {"text-client", "sql-client", "kg-client"}
    assert len(rep.ranking) == 6 and rep.failed == {}
    assert rep.generation.count("\n\n") == 5


class _Broken:
    def __init__(self, backend):
        self.bundle = backend.bundle
        self.cfg = backend.cfg
        self.modality = backend.modality
        self.embedder = backend.embedder

    def retrieve(self, *a, **kw):
        raise RuntimeError("disk on fire: pt-001 Eleanor Whitfield")

    def entities(self, text):
        return []


def test_failing_client_isolated(backends):
    t = Transcript()
    srv = _server(backends, t)
    srv.add_local(FederatedClient("broken", _Broken(backends["text"])))
    rep = srv.query("wheezing with dyspnea", top_k=3)
    assert "broken" in rep.failed and "RuntimeError" in rep.failed["broken"]
    assert len(rep.ranking) > 0
    # the sanitized error never echoes the exception text
    assert b"Whitfield" not in t.data() and b"disk on fire" not in t.data()


class _SlowChannel:
    peer = "slow"

    def request(self, env, timeout):
        time.sleep(timeout + 0.5)

    def close(self):
        pass


class _LyingChannel:
    peer = "liar"

    def request(self, env, timeout):
        return Envelope("RetrieveResponse", env.query_id, _resp("someone-else", [("h", 1.0)]))

    def close(self):
        pass


def test_timeouts_and_malformed_responses(backends):
    cfg = AppConfig({"federation.timeout_s": 0.3})
    srv = _server(backends, cfg=cfg)
    srv.register(Envelope("Register", "", {"client_id": "slow", "modality": "text"}), _SlowChannel())
    srv.register(Envelope("Register", "", {"client_id": "liar", "modality": "text"}), _LyingChannel())
    rep = srv.query("fever and cough", top_k=3)
    assert rep.failed == {"liar": "malformed response", "slow": "timeout"}
    assert rep.ranking


def test_all_clients_failing_raises(backends):
    srv = FederationServer()
    srv.add_local(FederatedClient("broken", _Broken(backends["text"])))
    with pytest.raises(AggregationError):
        srv.query("x")
    with pytest.raises(AggregationError):
        FederationServer().query("x")


def test_inprocess_channel_records_both_directions(backends):
    t = Transcript()
    ch = InProcessChannel(FederatedClient("t", backends["text"]), t)
    ch.request(Envelope("RetrieveRequest", "q", {"title": "fever", "top_k": 2}))
    assert [d for d, _, _ in t.frames] == ["send", "recv"]


# ---------------------------------------------------------------------------
# TCP


@pytest.fixture
def tcp_server(backends):
    t = Transcript()
    fed = FederationServer(AppConfig({"federation.timeout_s": 10.0}), t)
    srv = serve(fed.cfg, fed, "127.0.0.1", 0)
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    addr = f"127.0.0.1:{srv.server_address[1]}"
    stops, threads = [], []

    def add_client(client, version=PROTOCOL_VERSION):
        ev, ready = threading.Event(), threading.Event()
        errors = []

        def run():
            try:
                run_client(client, addr, ev, version, 5.0, ready)
            except Exception as exc:  # surfaced to the test
                errors.append(exc)
                ready.set()

        th_c = threading.Thread(target=run, daemon=True)
        th_c.start()
        assert ready.wait(5)
        stops.append(ev)
        threads.append(th_c)
        return errors

    yield fed, addr, add_client, t
    for ev in stops:
        ev.set()
    stop(srv)
    for th_c in threads:
        th_c.join(5)


def test_tcp_end_to_end_leak_free(tcp_server, backends):
    fed, addr, add_client, t = tcp_server
    for c in _clients(backends):
        assert add_client(c) == []
    assert len(fed.roster) == 3
    out = remote_query(addr, "wheezing with dyspnea", "cough at night", top_k=5)
    assert set(out["clients"]) == {"text-client", "sql-client", "kg-client"}
    assert out["ranking"]
    wire = t.data().decode("utf-8")
    assert not [tok for tok in fixtures.load_pii_tokens() if tok in wire]
    assert not [r.uid for r in backends["text"].bundle.corpus.records if r.uid in wire]


def test_tcp_duplicate_and_version_rejected(tcp_server, backends):
    fed, addr, add_client, _ = tcp_server
    assert add_client(FederatedClient("a", backends["text"])) == []
    errs = add_client(FederatedClient("a", backends["sql"]))
    assert errs and "duplicate" in str(errs[0])
    errs = add_client(FederatedClient("b", backends["sql"]), version=2)
    assert errs and "version mismatch" in str(errs[0])
    assert list(fed.roster) == ["a"]


def test_tcp_client_disconnect_is_a_failure_not_a_crash(tcp_server, backends):
    fed, addr, add_client, _ = tcp_server
    add_client(FederatedClient("good", backends["text"]))
    # a raw client that registers then vanishes
    host, port = addr.split(":")
    s = socket.create_connection((host, int(port)))
    s.sendall(encode(Envelope("Register", "", {"client_id": "ghost", "modality": "sql"})))
    s.recv(4096)
    s.close()
    deadline = time.time() + 5
    rep = None
    while time.time() < deadline:
        rep = remote_query(addr, "fever", top_k=2)
        if "ghost" not in fed.roster:
            break
        time.sleep(0.1)
    assert rep["ranking"]
    assert "good" in rep["clients"]


def test_remote_query_errors(tcp_server):
    _, addr, _, _ = tcp_server
    with pytest.raises(AggregationError):
        remote_query(addr, "fever")
    with pytest.raises(ValueError):
        remote_query("nohostport", "x")


def test_pii_free_summaries_over_fixture(backends):
    t = Transcript()
    srv = _server(backends, t)
    for q in ("wheezing with dyspnea", "polyuria with fatigue", "headache and dizziness", "rash and fever"):
        srv.query(q, "Follow-up by phone was arranged.", top_k=10)
    for _, _, frame in t.frames:
        env = decode(frame, expected_version=None)
        if env.type == "RetrieveResponse":
            for r in env.payload["results"]:
                assert detect_pii(r["summary_text"]) == []


def test_records_without_body_still_summarize():
    rec = PatientRecord("solo", fields={"diagnosis": "gout"})
    b = make_backend(IndexBundle.build(Corpus.from_records([rec], "sql")))
    resp = FederatedClient("s", b).handle(Envelope("RetrieveRequest", "q", {"title": "gout", "top_k": 1}))
    (r,) = resp.payload["results"]
    assert "gout" in r["summary_text"] and "solo" not in json.dumps(resp.payload)
