"""Re-render figures from a finished run directory.

    python3 scripts/plot_reports.py bench-out      # needs report.json
    python3 scripts/plot_reports.py cache-out      # needs cache_report.json + cache_trace.csv
"""

import argparse
import csv
import json
import sys
from pathlib import Path

from hyfed.plotting import plot_bench, plot_cache


def _trace(path: Path) -> list[dict]:
    rows = []
    with path.open(encoding="utf-8", newline="") as fh:
        for r in csv.DictReader(fh):
            rows.append({
                "seq": int(r["seq"]),
                "node_id": r["node_id"],
                "is_warmup": r["is_warmup"] == "True",
                "outcome": r["outcome"],
                "latency_ms": float(r["latency_ms"]),
                "cumulative_hit_rate": float(r["cumulative_hit_rate"]) if r["cumulative_hit_rate"] else None,
            })
    return rows


def render(run_dir, out_dir=None) -> list[Path]:
    run = Path(run_dir)
    out = Path(out_dir) if out_dir else run
    paths = []
    if (run / "report.json").exists():
        paths += plot_bench(json.loads((run / "report.json").read_text(encoding="utf-8")), out)
    if (run / "cache_report.json").exists():
        rep = json.loads((run / "cache_report.json").read_text(encoding="utf-8"))
        paths += plot_cache(rep["stats"], _trace(run / "cache_trace.csv"), out)
    if not paths:
        raise FileNotFoundError(f"{run}: no report.json or cache_report.json")
    return paths


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("run_dir")
    p.add_argument("--out", help="write figures here instead of run_dir")
    args = p.parse_args(argv)
    try:
        for path in render(args.run_dir, args.out):
            print(path)
    except (OSError, KeyError, ValueError) as exc:
        print(f"plot_reports: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
