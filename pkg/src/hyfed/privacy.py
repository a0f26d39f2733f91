"""Privacy-aware summary generation.

Three tools, applied per retrieved record on the client:

* rule-based PII detection and placeholder masking (``<PERSON_1>``, ...),
* query-relevance erasure of sentences that do not help answer the query,
* feature sealing, a keyed reversible transform standing in for homomorphic
  encryption of embedding vectors.

The reference summarizer is extractive: erase, truncate, then mask. Any
service summarizer output is masked again before it leaves the client.
"""

from __future__ import annotations

import hashlib
import hmac
import logging
import os
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Query, tokenize
from .models import HashingEmbedder, ModelService, ServiceError

log = logging.getLogger(__name__)

CATEGORIES = ("PERSON", "DATE", "PHONE", "EMAIL", "ID", "AGE_OVER_89", "LOCATION")


class PrivacyConfigError(ValueError):
    pass


class OverlapError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class PiiSpan:
    start: int
    end: int
    category: str
    source: str = ""


@dataclass
class MaskedText:
    text: str
    # placeholder -> original surface; stays on the client
    mapping: dict[str, str] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Recognizers

_MONTH = (
    r"(?:Jan(?:uary)?|Feb(?:ruary)?|Mar(?:ch)?|Apr(?:il)?|May|June?|July?|Aug(?:ust)?"
    r"|Sep(?:t(?:ember)?)?|Oct(?:ober)?|Nov(?:ember)?|Dec(?:ember)?)"
)
_DATE_PATTERNS = [
    re.compile(r"\b\d{4}-\d{1,2}-\d{1,2}\b"),
    re.compile(r"\b\d{1,2}/\d{1,2}/\d{2,4}\b"),
    re.compile(r"\b\d{1,2}\.\d{1,2}\.\d{4}\b"),
    re.compile(rf"\b{_MONTH}\.?\s+\d{{1,2}}(?:st|nd|rd|th)?(?:,?\s+\d{{4}})?\b"),
    re.compile(rf"\b\d{{1,2}}(?:st|nd|rd|th)?\s+{_MONTH}\.?(?:,?\s+\d{{4}})?\b"),
]
_PHONE = re.compile(r"(?<![\w-])(?:\+?1[-.\s])?(?:\(\d{3}\)\s?|\d{3}[-.\s])\d{3}[-.\s]\d{4}(?![\w-])")
_EMAIL = re.compile(r"(?<![\w.+-])[\w.+-]+@[\w-]+(?:\.[\w-]+)+")
_ID = re.compile(
    r"\b(?:MRN|SSN|ID|Patient\s+ID|Record|Acct|Account|Chart)\s*(?:No\.?|Number)?\s*[:#]?\s*"
    r"(?:\d{3}-\d{2}-\d{4}|\d{4,})\b",
    re.IGNORECASE,
)
_ID_DIGITS = re.compile(r"(?:\d{3}-\d{2}-\d{4}|\d{4,})$")
_AGE = re.compile(r"\b(\d{2,3})[-\s]years?[-\s]old\b", re.IGNORECASE)
_LOCATION = re.compile(
    r"\b\d{1,5}\s+(?:[A-Z][a-z]+\s+){1,3}"
    r"(?:Street|St|Avenue|Ave|Road|Rd|Boulevard|Blvd|Lane|Ln|Drive|Dr|Court|Ct|Way)\b\.?"
)
_WORD = re.compile(r"[^\W\d_]+")


def load_lexicon(path=None) -> frozenset[str]:
    """One term per line, UTF-8. ``None`` loads the bundled name list."""
    if path:
        p = Path(path)
        if not p.exists():
            raise PrivacyConfigError(f"person lexicon not found: {p}")
        text = p.read_text(encoding="utf-8")
    else:
        text = resources.files("hyfed.data").joinpath("person_lexicon.txt").read_text(encoding="utf-8")
    return frozenset(w.strip().lower() for w in text.splitlines() if w.strip() and not w.startswith("#"))


class PiiDetector:
    def __init__(self, recognizers: Iterable[str] = CATEGORIES, person_lexicon=None, lexicon_terms=None):
        self.recognizers = frozenset(recognizers)
        unknown = self.recognizers - set(CATEGORIES)
        if unknown:
            raise PrivacyConfigError(f"unknown recognizers: {sorted(unknown)}")
        self.lexicon: frozenset[str] = frozenset()
        if "PERSON" in self.recognizers:
            if lexicon_terms is not None:
                self.lexicon = frozenset(t.lower() for t in lexicon_terms)
            else:
                self.lexicon = load_lexicon(person_lexicon)

    @classmethod
    def from_config(cls, cfg) -> "PiiDetector":
        return cls(cfg["privacy.recognizers"], cfg["privacy.person_lexicon"] or None)

    def _persons(self, text: str) -> list[PiiSpan]:
        spans: list[PiiSpan] = []
        cur: list[int] | None = None
        for m in _WORD.finditer(text):
            w = m.group()
            if w[0].isupper() and w.lower() in self.lexicon:
                if cur is not None and text[cur[1]:m.start()].isspace():
                    cur[1] = m.end()
                    continue
                if cur is not None:
                    spans.append(PiiSpan(cur[0], cur[1], "PERSON", "lexicon"))
                cur = [m.start(), m.end()]
            elif cur is not None:
                spans.append(PiiSpan(cur[0], cur[1], "PERSON", "lexicon"))
                cur = None
        if cur is not None:
            spans.append(PiiSpan(cur[0], cur[1], "PERSON", "lexicon"))
        return spans

    def candidates(self, text: str) -> list[PiiSpan]:
        out: list[PiiSpan] = []
        on = self.recognizers
        if "PERSON" in on:
            out += self._persons(text)
        if "DATE" in on:
            for pat in _DATE_PATTERNS:
                out += [PiiSpan(m.start(), m.end(), "DATE", "date-pattern") for m in pat.finditer(text)]
        if "PHONE" in on:
            out += [PiiSpan(m.start(), m.end(), "PHONE", "phone-pattern") for m in _PHONE.finditer(text)]
        if "EMAIL" in on:
            out += [PiiSpan(m.start(), m.end(), "EMAIL", "email-pattern") for m in _EMAIL.finditer(text)]
        if "ID" in on:
            out += [PiiSpan(m.start(), m.end(), "ID", "id-pattern") for m in _ID.finditer(text)]
        if "AGE_OVER_89" in on:
            out += [
                PiiSpan(m.start(), m.end(), "AGE_OVER_89", "age-pattern")
                for m in _AGE.finditer(text)
                if int(m.group(1)) > 89
            ]
        if "LOCATION" in on:
            out += [PiiSpan(m.start(), m.end(), "LOCATION", "address-pattern") for m in _LOCATION.finditer(text)]
        return out

    def detect(self, text: str) -> list[PiiSpan]:
        return resolve_overlaps(self.candidates(text))


def resolve_overlaps(spans: Iterable[PiiSpan]) -> list[PiiSpan]:
    """Longest span wins, then earliest start."""
    kept: list[PiiSpan] = []
    for s in sorted(set(spans), key=lambda s: (-(s.end - s.start), s.start, s.category)):
        if all(s.end <= k.start or s.start >= k.end for k in kept):
            kept.append(s)
    return sorted(kept)


_default_detector: PiiDetector | None = None


def detect_pii(text: str, detector: PiiDetector | None = None) -> list[PiiSpan]:
    global _default_detector
    if detector is None:
        if _default_detector is None:
            _default_detector = PiiDetector()
        detector = _default_detector
    return detector.detect(text)


def mask(text: str, spans: Sequence[PiiSpan]) -> MaskedText:
    spans = sorted(spans)
    for a, b in zip(spans, spans[1:]):
        if b.start < a.end:
            raise OverlapError(f"overlapping spans {a} and {b}")
    counters: dict[str, int] = {}
    assigned: dict[tuple[str, str], str] = {}
    mapping: dict[str, str] = {}
    out, pos = [], 0
    for s in spans:
        surface = text[s.start:s.end]
        keep = ""
        if s.category == "ID":
            # the label ("MRN ") is kept as context; only the number is replaced
            m = _ID_DIGITS.search(surface)
            if m:
                keep, surface = surface[:m.start()], m.group()
        key = (s.category, surface)
        if key not in assigned:
            counters[s.category] = counters.get(s.category, 0) + 1
            assigned[key] = f"<{s.category}_{counters[s.category]}>"
            mapping[assigned[key]] = surface
        out.append(text[pos:s.start])
        out.append(keep + assigned[key])
        pos = s.end
    out.append(text[pos:])
    return MaskedText("".join(out), mapping)


def anonymize(text: str, detector: PiiDetector | None = None) -> MaskedText:
    return mask(text, detect_pii(text, detector))


# ---------------------------------------------------------------------------
# Query-relevance erasure

_SENT_SPLIT = re.compile(r"(?<=[.!?])\s+|\s*\n+\s*")


def split_sentences(text: str) -> list[str]:
    return [s.strip() for s in _SENT_SPLIT.split(text) if s and s.strip()]


def erase_irrelevant(
    text: str,
    q: Query,
    theta: float = 0.35,
    entities: Iterable[str] = (),
    embedder=None,
) -> str:
    """Keep sentences that name a query entity or are close enough to the query."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError("theta must be in [0, 1]")
    sents = split_sentences(text)
    if not sents:
        return ""
    embedder = embedder or HashingEmbedder()
    qv = embedder.embed(q.text)
    ent_tokens = {t for e in entities for t in tokenize(e)}
    kept, best, best_cos = [], None, -1.0
    for s in sents:
        sv = embedder.embed(s)
        cos = min(1.0, max(0.0, float(np.dot(qv, sv)))) if qv.any() and sv.any() else 0.0
        if cos > best_cos:
            best, best_cos = s, cos
        if (ent_tokens and ent_tokens & set(tokenize(s))) or cos >= theta:
            kept.append(s)
    return " ".join(kept) if kept else best


def truncate_tokens(text: str, max_tokens: int) -> str:
    """Cut at a whitespace boundary so that at most ``max_tokens`` tokens remain."""
    count, end = 0, 0
    for m in re.finditer(r"\S+", text):
        n = len(tokenize(m.group()))
        if count + n > max_tokens:
            break
        count += n
        end = m.end()
    return text[:end]


# ---------------------------------------------------------------------------
# Feature sealing

SEAL_SCALE = 1 << 16


class SealIntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class SealedVector:
    payload: bytes
    dim: int
    nonce: bytes
    tag: bytes


def _prf(key: bytes, nonce: bytes, label: bytes, n: int) -> bytes:
    return hashlib.shake_256(len(key).to_bytes(4, "big") + key + nonce + label).digest(n)


def _permutation(key: bytes, nonce: bytes, dim: int) -> np.ndarray:
    seed = int.from_bytes(_prf(key, nonce, b"perm", 16), "big")
    return np.random.Generator(np.random.PCG64(seed)).permutation(dim)


def _tag(key: bytes, sv_payload: bytes, dim: int, nonce: bytes) -> bytes:
    return hmac.new(key, b"seal1" + dim.to_bytes(8, "big") + nonce + sv_payload, hashlib.sha256).digest()


def seal_features(v, key: bytes, nonce: bytes | None = None) -> SealedVector:
    if not key:
        raise ValueError("sealing key must be non-empty")
    v = np.asarray(v, dtype=np.float64).ravel()
    nonce = os.urandom(16) if nonce is None else nonce
    dim = v.size
    q = np.rint(v * SEAL_SCALE).astype(np.int64).view(np.uint64)
    stream = np.frombuffer(_prf(key, nonce, b"stream", 8 * dim), dtype="<u8")
    permuted = q[_permutation(key, nonce, dim)]
    payload = (permuted + stream).astype("<u8").tobytes()  # uint64 wraps mod 2^64
    return SealedVector(payload, dim, nonce, _tag(key, payload, dim, nonce))


def unseal(sv: SealedVector, key: bytes) -> np.ndarray:
    if not hmac.compare_digest(sv.tag, _tag(key, sv.payload, sv.dim, sv.nonce)):
        raise SealIntegrityError("sealed vector failed integrity check (wrong key or tampered payload)")
    stream = np.frombuffer(_prf(key, sv.nonce, b"stream", 8 * sv.dim), dtype="<u8")
    permuted = np.frombuffer(sv.payload, dtype="<u8") - stream
    q = np.empty(sv.dim, dtype=np.uint64)
    q[_permutation(key, sv.nonce, sv.dim)] = permuted
    return q.view(np.int64).astype(np.float64) / SEAL_SCALE


# ---------------------------------------------------------------------------
# Summaries


@dataclass(frozen=True)
class Summary:
    patient_uid_hash: str
    text: str
    source_modality: str
    score: float


@dataclass(frozen=True)
class RecordView:
    uid: str
    text: str
    score: float


def hash_uid(uid: str, key: str | bytes) -> str:
    k = key.encode("utf-8") if isinstance(key, str) else key
    return hmac.new(k, uid.encode("utf-8"), hashlib.sha256).hexdigest()


class ServiceSummarizer:
    def __init__(self, service: ModelService):
        self.service = service

    def __call__(self, text: str, q: Query) -> str:
        (out,) = self.service.call("summarize", [{"query": q.text, "text": text}])
        return str(out)


def summarize(
    records: Sequence[RecordView],
    q: Query,
    *,
    modality: str,
    key: str | bytes,
    detector: PiiDetector | None = None,
    theta: float = 0.35,
    max_tokens: int = 120,
    entities: Iterable[str] = (),
    embedder=None,
    summarizer=None,
) -> list[Summary]:
    """Erase, truncate and mask each record view into a wire-safe summary."""
    if not records:
        raise ValueError("nothing to summarize")
    entities = list(entities)
    out = []
    for rec in records:
        text = None
        if summarizer is not None:
            try:
                text = summarizer(rec.text, q)
            except ServiceError as exc:
                log.warning("summarizer service failed, using extractive path: %s", exc)
        if text is None:
            text = erase_irrelevant(rec.text, q, theta, entities, embedder)
        text = truncate_tokens(text, max_tokens)
        text = anonymize(text, detector).text
        out.append(Summary(hash_uid(rec.uid, key), text, modality, rec.score))
    return out
