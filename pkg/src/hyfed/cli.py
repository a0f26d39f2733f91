"""``hyfed`` command line.

Exit codes: 0 success, 1 usage error, 2 runtime error. ``mask --check``
exits 3 when it finds PII, so scripts can tell "found spans" from "failed".
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import signal
import sys
import threading
from pathlib import Path

from . import __version__

log = logging.getLogger("hyfed")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_PII_FOUND = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _globals(p: argparse.ArgumentParser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON config file")
    p.add_argument("--seed", type=int, default=d, help="seed for every stochastic component")
    p.add_argument("--log-level", default=argparse.SUPPRESS if suppress else "WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--record-transcript", default=d, metavar="PATH", help="write all wire frames to PATH")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hyfed", description="Federated retrieval over text, knowledge-graph and relational clients.")
    p.add_argument("--version", action="version", version=f"hyfed {__version__}")
    _globals(p, suppress=False)
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)

    def add(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        _globals(sp, suppress=True)
        return sp

    sp = add("ingest", "build an index directory from a line-delimited JSON corpus")
    sp.add_argument("--input", required=True)
    sp.add_argument("--modality", choices=["text", "sql", "kg"], default="text")
    sp.add_argument("--out", required=True, help="index directory")

    sp = add("query", "run one federated query (in-process clients unless --server is given)")
    sp.add_argument("--server", help="host:port of a running server")
    sp.add_argument("--title", required=True)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--abstract", default="")
    g.add_argument("--abstract-file")
    sp.add_argument("--top-k", type=int, default=10)
    sp.add_argument("--alpha", type=float)
    sp.add_argument("--tau", type=float)

    sp = add("serve", "run the federation server")
    sp.add_argument("--host")
    sp.add_argument("--port", type=int)

    sp = add("client", "run one client against a server")
    sp.add_argument("--modality", choices=["text", "sql", "kg"], required=True)
    sp.add_argument("--index", required=True)
    sp.add_argument("--server", required=True)
    sp.add_argument("--client-id")

    sp = add("bench", "evaluate retrieval backends and write report.json/report.csv plus figures")
    sp.add_argument("--backend", choices=["text", "sql", "kg", "all"], default="all")
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--index", help="index directory (its modality must match --backend)")
    src.add_argument("--corpus", help="corpus JSONL; indexed for every requested backend")
    sp.add_argument("--queries")
    sp.add_argument("--qrels")
    sp.add_argument("--alpha-sweep", metavar="START:STOP:STEP")
    sp.add_argument("--out", default="bench-out")
    sp.add_argument("--no-figures", action="store_true")

    sp = add("cache-sim", "replay a random-walk workload through the tiered cache")
    src = sp.add_mutually_exclusive_group()
    src.add_argument("--graph", "--index", dest="index", help="index directory whose association graph is used")
    src.add_argument("--corpus")
    src.add_argument("--synthetic", type=int, metavar="N", help="use an N-record synthetic graph")
    sp.add_argument("--warmup", type=int, help="warm-up requests (default from config)")
    sp.add_argument("--test", type=int, help="measured requests (default from config)")
    sp.add_argument("--out", default="cache-out")
    sp.add_argument("--no-figures", action="store_true")

    sp = add("mask", "anonymize a text file, or check it for PII")
    sp.add_argument("--in", dest="inp")
    sp.add_argument("--out")
    sp.add_argument("--check", metavar="FILE")

    sp = add("fixtures", "regenerate the bundled fixture files, or verify them")
    sp.add_argument("--verify", action="store_true")
    sp.add_argument("--out", help="write to this directory instead of the package")
    return p


# ---------------------------------------------------------------------------
# helpers


def _config(args):
    from .config import AppConfig

    overrides = {
        "seed": getattr(args, "seed", None),
        "workload.warmup": getattr(args, "warmup", None),
        "workload.test": getattr(args, "test", None),
    }
    return AppConfig.load(getattr(args, "config", None), overrides=overrides)


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n")


def _bundle_for(modality: str, index=None, corpus=None):
    from .corpus import Corpus, ingest_corpus
    from .fixtures import build_records
    from .index import IndexBundle, load_index

    if index:
        b = load_index(index)
        if b.modality != modality:
            raise UsageError(f"index {index} has modality {b.modality}, not {modality}")
        return b
    if corpus:
        return IndexBundle.build(ingest_corpus(corpus, modality))
    return IndexBundle.build(Corpus.from_records(build_records(), modality))


def _local_clients(cfg):
    """Clients from ``federation.clients``, or one per modality over the bundled fixture."""
    from .federation import FederatedClient
    from .retrieval import make_backend

    specs = cfg["federation.clients"] or [
        {"client_id": f"{m}-client", "modality": m} for m in ("text", "sql", "kg")
    ]
    out = []
    for s in specs:
        if "modality" not in s:
            raise UsageError("each federation.clients entry needs a modality")
        m = s["modality"]
        bundle = _bundle_for(m, s.get("index"), s.get("corpus"))
        out.append(FederatedClient(s.get("client_id") or f"{m}-client", make_backend(bundle, cfg), cfg, s.get("key")))
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args, cfg):
    from .corpus import ingest_corpus
    from .index import IndexBundle, save_index

    bundle = IndexBundle.build(ingest_corpus(args.input, args.modality))
    path = save_index(bundle, args.out)
    a = bundle.assoc
    _emit({
        "index": str(path),
        "modality": bundle.modality,
        "records": bundle.corpus.N,
        "vocabulary": len(bundle.corpus.vocabulary),
        "association_nodes": len(a.adjacency) if a else 0,
        "association_edges": a.n_edges if a else 0,
    })
    return EXIT_OK


def cmd_query(args, cfg):
    from .federation import FederationServer, Transcript, remote_query

    abstract = Path(args.abstract_file).read_text(encoding="utf-8") if args.abstract_file else args.abstract
    if args.top_k < 1:
        raise UsageError("--top-k must be >= 1")
    if args.server:
        _emit(remote_query(args.server, args.title, abstract, args.top_k, args.alpha, args.tau,
                           timeout=cfg["federation.timeout_s"] * 2))
        return EXIT_OK
    transcript = Transcript(args.record_transcript) if getattr(args, "record_transcript", None) else None
    server = FederationServer(cfg, transcript)
    for c in _local_clients(cfg):
        ack = server.add_local(c)
        if ack.type != "Ack":
            raise RuntimeError(ack.payload.get("message"))
    _emit(server.query(args.title, abstract, args.top_k, args.alpha, args.tau).to_dict())
    return EXIT_OK


def cmd_serve(args, cfg):
    from .federation import FederationServer, Transcript, serve, stop

    transcript = Transcript(args.record_transcript) if getattr(args, "record_transcript", None) else None
    fed = FederationServer(cfg, transcript)
    if cfg["federation.clients"]:
        for c in _local_clients(cfg):
            fed.add_local(c)
    srv = serve(cfg, fed, args.host, args.port)
    host, port = srv.server_address[:2]
    print(f"hyfed server listening on {host}:{port}", file=sys.stderr, flush=True)

    def _shutdown(signum, frame):
        log.info("signal %s: shutting down", signum)
        threading.Thread(target=stop, args=(srv,), daemon=True).start()

    signal.signal(signal.SIGINT, _shutdown)
    signal.signal(signal.SIGTERM, _shutdown)
    srv.serve_forever(poll_interval=0.2)
    print(f"hyfed server stopped; roster was {sorted(fed.roster)}", file=sys.stderr)
    return EXIT_OK


def cmd_client(args, cfg):
    from .federation import FederatedClient, run_client
    from .retrieval import make_backend

    bundle = _bundle_for(args.modality, args.index)
    client = FederatedClient(args.client_id or f"{args.modality}-client", make_backend(bundle, cfg), cfg)
    stop_event = threading.Event()

    def _shutdown(signum, frame):
        stop_event.set()

    signal.signal(signal.SIGINT, _shutdown)
    signal.signal(signal.SIGTERM, _shutdown)
    run_client(client, args.server, stop_event, timeout=cfg["federation.timeout_s"])
    return EXIT_OK


def cmd_bench(args, cfg):
    from .bench import load_qrels, load_queries, parse_grid, report_csv, report_json, run_benchmark
    from .fixtures import fixture_path
    from .retrieval import make_backend

    mods = ["text", "sql", "kg"] if args.backend == "all" else [args.backend]
    if args.index and len(mods) != 1:
        raise UsageError("--index serves one backend; pass --backend text|sql|kg")
    grid = parse_grid(args.alpha_sweep) if args.alpha_sweep else None
    if grid is not None and "text" not in mods:
        raise UsageError("--alpha-sweep needs the text backend")
    queries = load_queries(args.queries or fixture_path("queries.jsonl"))
    qrels = load_qrels(args.qrels or fixture_path("qrels.tsv"))
    backends = {m: make_backend(_bundle_for(m, args.index, args.corpus), cfg) for m in mods}
    report = run_benchmark(backends, queries, qrels, grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report_json(report), encoding="utf-8")
    (out / "report.csv").write_text(report_csv(report), encoding="utf-8")
    files = ["report.json", "report.csv"]
    if not args.no_figures:
        from .plotting import plot_bench

        files += [p.name for p in plot_bench(report, out)]
    _emit({"out": str(out), "files": files, "backends": report["backends"]})
    return EXIT_OK


def cmd_cache_sim(args, cfg):
    from .bench import WorkloadParams, generate_workload, synthetic_records
    from .cache import TierConfig, simulate
    from .corpus import Corpus, build_association_graph

    if args.synthetic is not None:
        if args.synthetic < 1:
            raise UsageError("--synthetic must be >= 1")
        assoc = build_association_graph(Corpus.from_records(synthetic_records(args.synthetic, seed=cfg["seed"])))
        source = f"synthetic:{args.synthetic}"
    else:
        bundle = _bundle_for("text", None, args.corpus) if not args.index else None
        if args.index:
            from .index import load_index

            bundle = load_index(args.index)
        assoc = bundle.assoc
        source = args.index or args.corpus or "fixture"
    if assoc is None:
        raise ValueError("cache-sim needs a non-empty corpus")
    params = WorkloadParams.from_config(cfg)
    events = generate_workload(assoc, params)
    res = simulate(events, TierConfig.from_config(cfg), assoc.record_projection())
    report = {
        "source": source,
        "seed": params.seed,
        "warmup": params.warmup,
        "test": params.test,
        "stats": res.report(),
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cache_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    buf = io.StringIO()
    cols = ["seq", "node_id", "is_warmup", "outcome", "latency_ms", "cumulative_hit_rate"]
    w = csv.DictWriter(buf, cols, lineterminator="\n")
    w.writeheader()
    for row in res.trace:
        r = dict(row)
        if r["cumulative_hit_rate"] is None:
            r["cumulative_hit_rate"] = ""
        else:
            r["cumulative_hit_rate"] = f"{r['cumulative_hit_rate']:.6f}"
        w.writerow(r)
    (out / "cache_trace.csv").write_text(buf.getvalue(), encoding="utf-8")
    files = ["cache_report.json", "cache_trace.csv"]
    if not args.no_figures:
        from .plotting import plot_cache

        files += [p.name for p in plot_cache(res.report(), res.trace, out)]
    _emit({"out": str(out), "files": files, **report})
    return EXIT_OK


def cmd_mask(args, cfg):
    from .privacy import PiiDetector, anonymize

    det = PiiDetector.from_config(cfg)
    if args.check:
        if args.inp or args.out:
            raise UsageError("--check cannot be combined with --in/--out")
        text = Path(args.check).read_text(encoding="utf-8")
        spans = det.detect(text)
        _emit({"file": args.check, "spans": [
            {"start": s.start, "end": s.end, "category": s.category, "source": s.source} for s in spans
        ]})
        return EXIT_PII_FOUND if spans else EXIT_OK
    if not args.inp:
        raise UsageError("mask needs --in FILE (and optionally --out FILE) or --check FILE")
    text = Path(args.inp).read_text(encoding="utf-8")
    masked = anonymize(text, det)
    if args.out:
        Path(args.out).write_text(masked.text, encoding="utf-8")
        _emit({"in": args.inp, "out": args.out, "placeholders": len(masked.mapping)})
    else:
        sys.stdout.write(masked.text)
    return EXIT_OK


def cmd_fixtures(args, cfg):
    from . import fixtures

    if args.verify:
        drift = fixtures.verify(args.out)
        _emit({"verified": not drift, "drift": drift})
        return EXIT_OK if not drift else EXIT_RUNTIME
    paths = fixtures.write(args.out)
    _emit({"written": [str(p) for p in paths]})
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "query": cmd_query,
    "serve": cmd_serve,
    "client": cmd_client,
    "bench": cmd_bench,
    "cache-sim": cmd_cache_sim,
    "mask": cmd_mask,
    "fixtures": cmd_fixtures,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(args, "log_level", "WARNING"), format="%(levelname)s %(name)s: %(message)s")
    if not args.command:
        parser.print_usage(sys.stderr)
        print("hyfed: error: a command is required", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"hyfed {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        msg = str(exc) if not isinstance(exc, KeyError) else f"missing key {exc}"
        print(f"hyfed {args.command}: {msg}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
