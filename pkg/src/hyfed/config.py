"""Application configuration.

Keys are dotted (``text.alpha``). Sources are layered
defaults < JSON config file < ``HYFED_*`` environment < command-line flags.
Environment names are the dotted key upper-cased with dots replaced by
underscores (``text.alpha`` -> ``HYFED_TEXT_ALPHA``). Unknown keys and
out-of-range values are rejected when the config is built.
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any, Callable, Mapping


class ConfigError(ValueError):
    pass


def _unit(v):
    return 0.0 <= v <= 1.0


def _nonneg(v):
    return v >= 0


def _pos(v):
    return v >= 1


_RECOGNIZERS = ("PERSON", "DATE", "PHONE", "EMAIL", "ID", "AGE_OVER_89", "LOCATION")

# key -> (default, type, validator, description)
SCHEMA: dict[str, tuple[Any, type, Callable | None, str]] = {
    "text.alpha": (0.8, float, _unit, "sparse/reranker fusion weight"),
    "text.pool": (50, int, _pos, "candidate pool per pipeline"),
    "text.dense_dim": (256, int, _pos, "dense embedding dimension"),
    "kg.tau": (0.9, float, _unit, "semantic entity-match threshold"),
    "kg.alpha": (0.5, float, _unit, "entity/statement fusion weight"),
    "kg.semantic_topk": (5, int, _pos, "max semantic matches per entity"),
    "kg.exclude_labels": (["Patient"], list, None, "node labels never matched"),
    "sql.lambda1": (0.4, float, _nonneg, "exact-match weight"),
    "sql.lambda2": (0.2, float, _nonneg, "boolean-mode weight"),
    "sql.lambda3": (0.2, float, _nonneg, "natural-language-mode weight"),
    "sql.lambda4": (0.2, float, _nonneg, "phrase-similarity weight"),
    "sql.n_per_entity": (20, int, _pos, "rows kept per entity"),
    "sql.bm25_k1": (1.2, float, _nonneg, "BM25 k1"),
    "sql.bm25_b": (0.75, float, _unit, "BM25 b"),
    "sql.bool_norm": (3.0, float, lambda v: v > 0, "boolean-mode normalizer"),
    "privacy.recognizers": (list(_RECOGNIZERS), list, lambda v: set(v) <= set(_RECOGNIZERS), "enabled PII recognizers"),
    "privacy.person_lexicon": ("", str, None, "person-name lexicon file (empty: bundled)"),
    "privacy.theta": (0.35, float, _unit, "erasure cosine threshold"),
    "privacy.max_summary_tokens": (120, int, _pos, "summary token budget"),
    "privacy.client_key": ("hyfed-demo-key", str, lambda v: len(v) > 0, "uid hashing key"),
    "services.embedder_url": ("", str, None, "embedding service (empty: reference)"),
    "services.reranker_url": ("", str, None, "reranker service (empty: reference)"),
    "services.ner_url": ("", str, None, "NER service (empty: reference)"),
    "services.summarizer_url": ("", str, None, "summarizer service (empty: reference)"),
    "services.generator_url": ("", str, None, "report generator service (empty: stub)"),
    "services.timeout_s": (10.0, float, lambda v: v > 0, "model service timeout"),
    "cache.enabled": (True, bool, None, "enable the client cache"),
    "cache.l1_capacity": (64, int, _pos, "L1 entries"),
    "cache.l2_capacity": (256, int, _pos, "L2 entries"),
    "cache.l3_capacity": (512, int, _pos, "L3 entries"),
    "cache.hotspot_size": (32, int, _nonneg, "pinned L3 hotspot nodes"),
    "cache.latency_l1_ms": (1.0, float, _nonneg, "L1 hit cost"),
    "cache.latency_l2_ms": (5.0, float, _nonneg, "L2 hit cost"),
    "cache.latency_l3_ms": (20.0, float, _nonneg, "L3 hit cost"),
    "cache.latency_miss_ms": (200.0, float, _nonneg, "miss cost"),
    "cache.promote": (True, bool, None, "move L2/L3 hits into L1"),
    "workload.restart_prob": (0.15, float, _unit, "random-walk restart probability"),
    "workload.dwell_prob": (0.20, float, _unit, "dwell probability"),
    "workload.memory_prob": (0.15, float, _unit, "session-memory revisit probability"),
    "workload.memory_window": (10, int, _pos, "session-memory ring size"),
    "workload.warmup": (100, int, _nonneg, "warm-up requests"),
    "workload.test": (500, int, _nonneg, "test requests"),
    "seed": (42, int, _nonneg, "seed for every stochastic component"),
    "federation.host": ("127.0.0.1", str, None, "server bind host"),
    "federation.port": (7878, int, lambda v: 0 <= v < 65536, "server port"),
    "federation.timeout_s": (30.0, float, lambda v: v > 0, "per-client response timeout"),
    "federation.top_k_global": (10, int, _pos, "entries in the fused ranking"),
    "federation.clients": ([], list, None, "in-process clients: [{client_id, modality, index}]"),
}


def env_name(key: str) -> str:
    return "HYFED_" + key.upper().replace(".", "_")


def _coerce(key: str, value: Any) -> Any:
    default, typ, check, _ = SCHEMA[key]
    try:
        if typ is bool:
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("1", "0", "true", "false", "yes", "no"):
                    raise ValueError(value)
                value = low in ("1", "true", "yes")
            elif not isinstance(value, bool):
                raise ValueError(value)
        elif typ is list:
            if isinstance(value, str):
                value = json.loads(value) if value.strip().startswith("[") else [
                    x.strip() for x in value.split(",") if x.strip()
                ]
            if not isinstance(value, list):
                raise ValueError(value)
        elif typ is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            value = int(value)
        elif typ is float:
            if isinstance(value, bool):
                raise ValueError(value)
            value = float(value)
        else:
            value = str(value)
    except (ValueError, TypeError, json.JSONDecodeError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {typ.__name__}") from None
    if check is not None and not check(value):
        raise ConfigError(f"{key}: value {value!r} out of range")
    return value


def _flatten(obj: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping) and key not in SCHEMA:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


class AppConfig(Mapping):
    """Immutable, validated view of every module's settings."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        merged = {k: v[0] for k, v in SCHEMA.items()}
        for k, v in (values or {}).items():
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v)
        lat = [merged[f"cache.latency_{t}_ms"] for t in ("l1", "l2", "l3", "miss")]
        if lat != sorted(lat):
            raise ConfigError("cache latencies must satisfy l1 <= l2 <= l3 <= miss")
        self._values = merged

    @classmethod
    def load(cls, path=None, env: Mapping[str, str] | None = None, overrides: Mapping[str, Any] | None = None):
        values: dict[str, Any] = {}
        if path:
            p = Path(path)
            if not p.exists():
                raise ConfigError(f"config file not found: {p}")
            try:
                doc = json.loads(p.read_text(encoding="utf-8"))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{p}: invalid JSON ({exc.msg})") from None
            values.update(_flatten(doc))
        env = os.environ if env is None else env
        for key in SCHEMA:
            name = env_name(key)
            if name in env:
                values[key] = env[name]
        unknown_env = [n for n in env if n.startswith("HYFED_") and n not in {env_name(k) for k in SCHEMA}]
        if unknown_env:
            raise ConfigError(f"unknown config environment variable(s): {', '.join(sorted(unknown_env))}")
        values.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls(values)

    def __getitem__(self, key):
        return self._values[key]

    def __iter__(self):
        return iter(self._values)

    def __len__(self):
        return len(self._values)

    def with_values(self, values: Mapping[str, Any]) -> "AppConfig":
        vals = dict(self._values)
        vals.update(values)
        return AppConfig(vals)

    def section(self, prefix: str) -> dict[str, Any]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self._values.items() if k.startswith(p)}

    def to_dict(self) -> dict[str, Any]:
        return dict(self._values)
