"""Client/server federation over newline-delimited JSON.

Each message is an :class:`Envelope` serialized as one JSON object per line.
Clients retrieve locally, summarize and mask, and return only hashed uids plus
masked summary text. The server fans a query out to every registered client
and fuses the answers into a :class:`GlobalReport`.

Two transports share the same framing: :class:`InProcessChannel` (used by
tests and ``hyfed query`` without ``--server``) and TCP sockets.
"""

from __future__ import annotations

import copy
import itertools
import json
import logging
import math
import socket
import socketserver
import threading
import time
from concurrent.futures import ThreadPoolExecutor, TimeoutError as FutureTimeout
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

from .cache import CacheKey, TierConfig, TieredCache
from .config import AppConfig
from .corpus import Query
from .models import ModelService, ServiceError
from .privacy import PiiDetector, RecordView, ServiceSummarizer, anonymize, detect_pii, hash_uid, summarize

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MESSAGE_TYPES = ("RetrieveRequest", "RetrieveResponse", "Register", "Ack", "Error", "Report")
FORBIDDEN_KEYS = frozenset({"body", "fields", "triples", "mapping"})


class ProtocolError(ValueError):
    pass


class VersionMismatch(ProtocolError):
    pass


class AggregationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Envelope:
    type: str
    query_id: str = ""
    payload: dict = field(default_factory=dict)
    version: int = PROTOCOL_VERSION

    def to_dict(self) -> dict:
        return {"version": self.version, "type": self.type, "query_id": self.query_id, "payload": self.payload}


def _forbidden_path(obj, path="payload") -> str | None:
    if isinstance(obj, dict):
        for k, v in obj.items():
            if k in FORBIDDEN_KEYS:
                return f"{path}.{k}"
            hit = _forbidden_path(v, f"{path}.{k}")
            if hit:
                return hit
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            hit = _forbidden_path(v, f"{path}[{i}]")
            if hit:
                return hit
    return None


def _check_shape(obj) -> None:
    if not isinstance(obj, dict):
        raise ProtocolError("envelope must be a JSON object")
    missing = {"version", "type", "query_id", "payload"} - set(obj)
    if missing:
        raise ProtocolError(f"envelope missing {sorted(missing)}")
    extra = set(obj) - {"version", "type", "query_id", "payload"}
    if extra:
        hit = sorted(extra & FORBIDDEN_KEYS)
        if hit:
            raise ProtocolError(f"raw-record field on wire: {hit[0]}")
        raise ProtocolError(f"unexpected envelope keys {sorted(extra)}")
    if obj["type"] not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {obj['type']!r}")
    if not isinstance(obj["payload"], dict):
        raise ProtocolError("payload must be a JSON object")
    if not isinstance(obj["version"], int) or isinstance(obj["version"], bool):
        raise ProtocolError("version must be an integer")
    hit = _forbidden_path(obj["payload"])
    if hit:
        raise ProtocolError(f"raw-record field on wire: {hit}")


def encode(env: Envelope) -> bytes:
    obj = env.to_dict()
    _check_shape(obj)
    try:
        line = json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"), allow_nan=False)
    except ValueError as exc:
        raise ProtocolError(f"unencodable payload: {exc}") from None
    return line.encode("utf-8") + b"\n"


def decode(data: bytes, expected_version: int | None = PROTOCOL_VERSION) -> Envelope:
    """Parse one framed line. ``expected_version=None`` skips the version check."""
    if not data.endswith(b"\n"):
        raise ProtocolError(f"truncated frame at byte offset {len(data)}")
    body = data[:-1]
    nl = body.find(b"\n")
    if nl >= 0:
        raise ProtocolError(f"unexpected newline inside frame at byte offset {nl}")
    try:
        text = body.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolError(f"invalid UTF-8 at byte offset {exc.start}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[:exc.pos].encode("utf-8"))
        raise ProtocolError(f"malformed JSON at byte offset {offset}: {exc.msg}") from None
    _check_shape(obj)
    if expected_version is not None and obj["version"] != expected_version:
        raise VersionMismatch(f"version mismatch: got {obj['version']}, expected {expected_version}")
    return Envelope(obj["type"], str(obj["query_id"]), obj["payload"], obj["version"])


def error_envelope(message: str, query_id: str = "") -> Envelope:
    return Envelope("Error", query_id, {"message": message})


# ---------------------------------------------------------------------------
# Transcript


class Transcript:
    """Thread-safe capture of every framed message that crosses a channel."""

    def __init__(self, path=None):
        self._lock = threading.Lock()
        self.frames: list[tuple[str, str, bytes]] = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.write_bytes(b"")

    def record(self, direction: str, peer: str, frame: bytes):
        with self._lock:
            self.frames.append((direction, peer, frame))
            if self.path:
                with self.path.open("ab") as fh:
                    fh.write(f"{direction}\t{peer}\t".encode("utf-8") + frame)

    def data(self) -> bytes:
        with self._lock:
            return b"".join(f for _, _, f in self.frames)


# ---------------------------------------------------------------------------
# Client


def _request_payload(title: str, abstract: str, top_k: int, alpha=None, tau=None) -> dict:
    p: dict[str, Any] = {"title": title, "abstract": abstract, "top_k": int(top_k)}
    if alpha is not None:
        p["alpha"] = float(alpha)
    if tau is not None:
        p["tau"] = float(tau)
    return p


class FederatedClient:
    """A single-modality data holder. Serves one request at a time."""

    def __init__(self, client_id: str, backend, cfg: AppConfig | None = None, key: str | None = None):
        self.client_id = client_id
        self.backend = backend
        self.cfg = cfg or backend.cfg
        self.modality = backend.modality
        # distinct default keys per client keep uid hashes unjoinable across clients
        self.key = key or f"{self.cfg['privacy.client_key']}/{client_id}"
        self.detector = PiiDetector.from_config(self.cfg)
        url = self.cfg["services.summarizer_url"]
        self.summarizer = ServiceSummarizer(ModelService(url, self.cfg["services.timeout_s"])) if url else None
        self.cache = None
        if self.cfg["cache.enabled"]:
            self.cache = TieredCache(TierConfig.from_config(self.cfg), backend.bundle.cache_graph, self.modality)
        self._lock = threading.Lock()

    def register_envelope(self, version: int = PROTOCOL_VERSION) -> Envelope:
        return Envelope("Register", "", {"client_id": self.client_id, "modality": self.modality}, version)

    def handle(self, env: Envelope) -> Envelope:
        if env.type != "RetrieveRequest":
            return error_envelope(f"unexpected message type {env.type}", env.query_id)
        with self._lock:
            return self.handle_retrieve(env)

    def _cache_key(self, q: Query, top_k: int, alpha, tau) -> CacheKey:
        text = q.text
        if alpha is not None or tau is not None:
            text += f" alpha {alpha} tau {tau}"
        return CacheKey.from_query(text, self.modality, top_k)

    def handle_retrieve(self, env: Envelope) -> Envelope:
        p = env.payload
        try:
            top_k = p.get("top_k", 10)
            if not isinstance(top_k, int) or isinstance(top_k, bool) or top_k < 1:
                raise ValueError("top_k must be an integer >= 1")
            alpha, tau = p.get("alpha"), p.get("tau")
            q = Query(str(p.get("title", "")), str(p.get("abstract", "")))
        except ValueError as exc:
            return error_envelope(f"bad request: {exc}", env.query_id)

        key = self._cache_key(q, top_k, alpha, tau)
        if self.cache is not None:
            hit = self.cache.lookup(key)
            if hit.value is not None:
                return Envelope("RetrieveResponse", env.query_id, copy.deepcopy(hit.value))
        try:
            payload, top_uid = self._retrieve(q, top_k, alpha, tau)
        except Exception as exc:  # sanitized: never echo record content
            log.warning("client %s: retrieval failed (%s)", self.client_id, type(exc).__name__)
            return error_envelope(f"{self.client_id}: retrieval failed ({type(exc).__name__})", env.query_id)
        if self.cache is not None:
            self.cache.admit(key, copy.deepcopy(payload), top_uid)
        return Envelope("RetrieveResponse", env.query_id, payload)

    def _retrieve(self, q: Query, top_k: int, alpha, tau) -> tuple[dict, str | None]:
        payload: dict[str, Any] = {"client_id": self.client_id, "modality": self.modality, "results": []}
        if self.backend.bundle.corpus.N == 0:
            return payload, None
        hits = self.backend.retrieve(q, top_k, alpha=alpha, tau=tau)[:top_k]
        if not hits:
            return payload, None
        views = []
        for h in hits:
            uid = h.candidate.uid
            # KG statements and rendered rows may name the patient node
            views.append(RecordView(uid, h.view.replace(uid, hash_uid(uid, self.key)), h.candidate.score))
        sums = summarize(
            views, q,
            modality=self.modality,
            key=self.key,
            detector=self.detector,
            theta=self.cfg["privacy.theta"],
            max_tokens=self.cfg["privacy.max_summary_tokens"],
            entities=self.backend.entities(q.text),
            embedder=self.backend.embedder,
            summarizer=self.summarizer,
        )
        for h, s in zip(hits, sums):
            text = s.text
            # masking is idempotent; loop only guards against a recognizer firing on its own output
            for _ in range(3):
                if not detect_pii(text, self.detector):
                    break
                text = anonymize(text, self.detector).text
            payload["results"].append({
                "uid_hash": s.patient_uid_hash,
                "score": float(s.score),
                "summary_text": text,
                "signals": {k: float(v) for k, v in sorted(h.candidate.signals.items())},
            })
        return payload, hits[0].candidate.uid


# ---------------------------------------------------------------------------
# Channels


class Channel(Protocol):
    peer: str

    def request(self, env: Envelope, timeout: float) -> Envelope: ...

    def close(self) -> None: ...


class InProcessChannel:
    """Calls a client directly but still pushes every message through the wire codec."""

    def __init__(self, client: FederatedClient, transcript: Transcript | None = None):
        self.client = client
        self.peer = client.client_id
        self.transcript = transcript

    def _wire(self, direction: str, env: Envelope) -> Envelope:
        frame = encode(env)
        if self.transcript:
            self.transcript.record(direction, self.peer, frame)
        return decode(frame, expected_version=None)

    def request(self, env: Envelope, timeout: float = 30.0) -> Envelope:
        return self._wire("recv", self.client.handle(self._wire("send", env)))

    def close(self):
        pass


class SocketChannel:
    """Server-side handle on a registered client's TCP connection."""

    def __init__(self, sock: socket.socket, peer: str, transcript: Transcript | None = None):
        self.sock = sock
        self.peer = peer
        self.transcript = transcript
        self._buf = b""
        self._lock = threading.Lock()
        self.closed = threading.Event()

    def _readline(self, deadline: float) -> bytes:
        while b"\n" not in self._buf:
            left = deadline - time.monotonic()
            if left <= 0:
                raise TimeoutError(f"client {self.peer} timed out")
            self.sock.settimeout(left)
            try:
                chunk = self.sock.recv(65536)
            except socket.timeout:
                raise TimeoutError(f"client {self.peer} timed out") from None
            if not chunk:
                self.closed.set()
                raise ConnectionError(f"client {self.peer} disconnected")
            self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line + b"\n"

    def request(self, env: Envelope, timeout: float = 30.0) -> Envelope:
        frame = encode(env)
        with self._lock:
            if self.closed.is_set():
                raise ConnectionError(f"client {self.peer} disconnected")
            if self.transcript:
                self.transcript.record("send", self.peer, frame)
            self.sock.sendall(frame)
            deadline = time.monotonic() + timeout
            while True:
                line = self._readline(deadline)
                if self.transcript:
                    self.transcript.record("recv", self.peer, line)
                resp = decode(line)
                # drop late answers to earlier, timed-out queries
                if resp.query_id == env.query_id:
                    return resp
                log.info("dropping late response %s from %s", resp.query_id, self.peer)

    def close(self):
        self.closed.set()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass


# ---------------------------------------------------------------------------
# Aggregation


@dataclass
class GlobalReport:
    query_id: str
    clients: dict[str, dict]
    ranking: list[dict]
    generation: str
    failed: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "clients": self.clients,
            "ranking": self.ranking,
            "generation": self.generation,
            "failed": self.failed,
        }


def minmax(scores: list[float]) -> list[float]:
    if not scores:
        return []
    lo, hi = min(scores), max(scores)
    if hi == lo:
        return [1.0] * len(scores)
    return [(s - lo) / (hi - lo) for s in scores]


def generation_stub(entries: list[dict], summaries: dict[tuple[str, str], str], modalities: dict[str, str]) -> str:
    blocks = []
    for i, e in enumerate(entries, start=1):
        cid = e["client_id"]
        head = f"[{i}] {cid} ({modalities.get(cid, '?')}) patient {e['uid_hash'][:16]}"
        blocks.append(head + "\n" + summaries[(cid, e["uid_hash"])])
    return "\n\n".join(blocks)


def aggregate(responses: list[dict], k_global: int = 10, query_id: str = "",
              failed: dict[str, str] | None = None,
              generator: Callable[[str], str] | None = None) -> GlobalReport:
    """Fuse RetrieveResponse payloads; the result does not depend on arrival order."""
    if not responses:
        raise AggregationError("no clients responded")
    if k_global < 1:
        raise ValueError("k_global must be >= 1")
    by_client: dict[str, dict] = {}
    for r in responses:
        cid = r["client_id"]
        if cid in by_client:
            raise AggregationError(f"duplicate response from client {cid}")
        by_client[cid] = r
    entries = []
    summaries: dict[tuple[str, str], str] = {}
    modalities = {}
    sections = {}
    for cid in sorted(by_client):
        r = by_client[cid]
        modalities[cid] = r["modality"]
        best: dict[str, dict] = {}
        for res in r["results"]:
            if not math.isfinite(res["score"]):
                raise AggregationError(f"non-finite score from client {cid}")
            prev = best.get(res["uid_hash"])
            if prev is None or res["score"] > prev["score"]:
                best[res["uid_hash"]] = res
        results = list(best.values())
        sections[cid] = {"modality": r["modality"], "results": r["results"]}
        for res, norm in zip(results, minmax([x["score"] for x in results])):
            entries.append({"uid_hash": res["uid_hash"], "client_id": cid, "fused_score": norm})
            summaries[(cid, res["uid_hash"])] = res["summary_text"]
    entries.sort(key=lambda e: (-e["fused_score"], e["client_id"], e["uid_hash"]))
    top = entries[:k_global]
    text = generation_stub(top, summaries, modalities)
    if generator is not None:
        try:
            text = generator(text)
        except ServiceError as exc:
            log.warning("generator service failed, using stub: %s", exc)
    return GlobalReport(query_id, sections, top, text, dict(sorted((failed or {}).items())))


# ---------------------------------------------------------------------------
# Server


class ServiceGenerator:
    def __init__(self, service: ModelService):
        self.service = service

    def __call__(self, stub: str) -> str:
        (out,) = self.service.call("generate", [{"context": stub}])
        return str(out)


class FederationServer:
    def __init__(self, cfg: AppConfig | None = None, transcript: Transcript | None = None):
        self.cfg = cfg or AppConfig()
        self.transcript = transcript
        self.roster: dict[str, tuple[str, Any]] = {}
        self._lock = threading.Lock()
        self._ids = itertools.count(1)
        url = self.cfg["services.generator_url"]
        self.generator = ServiceGenerator(ModelService(url, self.cfg["services.timeout_s"])) if url else None

    def register(self, env: Envelope, channel) -> Envelope:
        if env.version != PROTOCOL_VERSION:
            return error_envelope(f"version mismatch: got {env.version}, expected {PROTOCOL_VERSION}")
        if env.type != "Register":
            return error_envelope(f"expected Register, got {env.type}")
        cid = env.payload.get("client_id")
        modality = env.payload.get("modality")
        if not isinstance(cid, str) or not cid:
            return error_envelope("Register needs a client_id")
        if modality not in ("text", "sql", "kg"):
            return error_envelope(f"unknown modality {modality!r}")
        with self._lock:
            if cid in self.roster:
                return error_envelope(f"duplicate client_id {cid}")
            self.roster[cid] = (modality, channel)
        log.info("registered client %s (%s)", cid, modality)
        return Envelope("Ack", "", {"client_id": cid})

    def unregister(self, client_id: str):
        with self._lock:
            self.roster.pop(client_id, None)

    def add_local(self, client: FederatedClient, version: int = PROTOCOL_VERSION) -> Envelope:
        """Register an in-process client through the wire codec."""
        ch = InProcessChannel(client, self.transcript)
        frame = encode(client.register_envelope(version))
        if self.transcript:
            self.transcript.record("recv", client.client_id, frame)
        ack = self.register(decode(frame, expected_version=None), ch)
        if self.transcript:
            self.transcript.record("send", client.client_id, encode(ack))
        return ack

    def next_query_id(self) -> str:
        return f"q{next(self._ids):06d}"

    def query(self, title: str, abstract: str = "", top_k: int = 10, alpha=None, tau=None,
              query_id: str | None = None, k_global: int | None = None) -> GlobalReport:
        qid = query_id or self.next_query_id()
        req = Envelope("RetrieveRequest", qid, _request_payload(title, abstract, top_k, alpha, tau))
        encode(req)  # validate before fan-out
        with self._lock:
            roster = sorted(self.roster.items())
        if not roster:
            raise AggregationError("no clients responded")
        timeout = self.cfg["federation.timeout_s"]
        responses, failed = [], {}
        with ThreadPoolExecutor(max_workers=len(roster)) as pool:
            futs = {cid: pool.submit(ch.request, req, timeout) for cid, (_, ch) in roster}
            for cid, fut in futs.items():
                try:
                    resp = fut.result(timeout=timeout)
                except FutureTimeout:
                    failed[cid] = "timeout"
                    continue
                except (OSError, ProtocolError) as exc:
                    failed[cid] = f"{type(exc).__name__}: {exc}"
                    continue
                if resp.type == "Error":
                    failed[cid] = str(resp.payload.get("message", "error"))
                elif resp.type != "RetrieveResponse" or resp.payload.get("client_id") != cid:
                    failed[cid] = "malformed response"
                elif len(resp.payload.get("results", [])) > top_k:
                    failed[cid] = "response exceeds top_k"
                else:
                    responses.append(resp.payload)
        for cid, why in failed.items():
            log.warning("client %s failed for %s: %s", cid, qid, why)
        k = k_global or self.cfg["federation.top_k_global"]
        return aggregate(responses, k, qid, failed, self.generator)


# ---------------------------------------------------------------------------
# TCP transport


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        fed: FederationServer = self.server.federation  # type: ignore[attr-defined]
        transcript = fed.transcript
        registered = None
        try:
            while True:
                line = self.rfile.readline()
                if not line:
                    return
                if transcript:
                    transcript.record("recv", "peer", line)
                try:
                    env = decode(line, expected_version=None)
                except ProtocolError as exc:
                    self._send(error_envelope(str(exc)))
                    return
                if env.type == "Register":
                    ch = SocketChannel(self.connection, str(env.payload.get("client_id")), transcript)
                    ack = fed.register(env, ch)
                    self._send(ack)
                    if ack.type != "Ack":
                        return
                    registered = ch.peer
                    # the channel owns the socket from here; park until it closes
                    while not ch.closed.wait(0.2):
                        if self.server.stopping.is_set():  # type: ignore[attr-defined]
                            ch.close()
                    return
                if env.version != PROTOCOL_VERSION:
                    self._send(error_envelope("version mismatch", env.query_id))
                    return
                if env.type == "RetrieveRequest":
                    p = env.payload
                    try:
                        report = fed.query(
                            str(p.get("title", "")), str(p.get("abstract", "")), int(p.get("top_k", 10)),
                            p.get("alpha"), p.get("tau"), k_global=p.get("k_global"),
                        )
                        self._send(Envelope("Report", report.query_id, report.to_dict()))
                    except (AggregationError, ValueError) as exc:
                        self._send(error_envelope(str(exc), env.query_id))
                else:
                    self._send(error_envelope(f"unexpected message type {env.type}", env.query_id))
        finally:
            if registered:
                fed.unregister(registered)

    def _send(self, env: Envelope):
        frame = encode(env)
        transcript = self.server.federation.transcript  # type: ignore[attr-defined]
        if transcript:
            transcript.record("send", "peer", frame)
        self.wfile.write(frame)
        self.wfile.flush()


class _TCPServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


def serve(cfg: AppConfig, federation: FederationServer | None = None, host=None, port=None):
    """Bind and return a TCP server; call ``serve_forever`` (or use a thread)."""
    fed = federation or FederationServer(cfg)
    srv = _TCPServer((host or cfg["federation.host"], cfg["federation.port"] if port is None else port), _Handler)
    srv.federation = fed  # type: ignore[attr-defined]
    srv.stopping = threading.Event()  # type: ignore[attr-defined]
    return srv


def stop(srv):
    srv.stopping.set()
    srv.shutdown()
    srv.server_close()


def _connect(address: str, timeout: float) -> socket.socket:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"bad server address {address!r}, want host:port")
    return socket.create_connection((host, int(port)), timeout=timeout)


def run_client(client: FederatedClient, address: str, stop_event: threading.Event | None = None,
               version: int = PROTOCOL_VERSION, timeout: float = 30.0, ready: threading.Event | None = None):
    """Register with a server and answer requests until the connection closes."""
    sock = _connect(address, timeout)
    buf = b""
    try:
        sock.sendall(encode(client.register_envelope(version)))
        # one buffer for the whole connection so a request queued behind the Ack is kept
        while b"\n" not in buf:
            chunk = sock.recv(65536)
            if not chunk:
                raise ConnectionError("server closed the connection during registration")
            buf += chunk
        line, buf = buf.split(b"\n", 1)
        reply = decode(line + b"\n", expected_version=None)
        if reply.type != "Ack":
            raise ProtocolError(reply.payload.get("message", "registration rejected"))
        if ready is not None:
            ready.set()
        sock.settimeout(0.2)
        while stop_event is None or not stop_event.is_set():
            while b"\n" in buf:
                line, buf = buf.split(b"\n", 1)
                try:
                    env = decode(line + b"\n")
                    resp = client.handle(env)
                except ProtocolError as exc:
                    resp = error_envelope(str(exc))
                sock.sendall(encode(resp))
            try:
                chunk = sock.recv(65536)
            except socket.timeout:
                continue
            if not chunk:
                return
            buf += chunk
    finally:
        sock.close()


def remote_query(address: str, title: str, abstract: str = "", top_k: int = 10, alpha=None, tau=None,
                 timeout: float = 60.0) -> dict:
    with _connect(address, timeout) as sock:
        req = Envelope("RetrieveRequest", "cli", _request_payload(title, abstract, top_k, alpha, tau))
        sock.sendall(encode(req))
        line = sock.makefile("rb").readline()
    resp = decode(line)
    if resp.type == "Error":
        raise AggregationError(resp.payload.get("message", "server error"))
    return resp.payload
