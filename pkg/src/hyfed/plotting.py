"""Figures for benchmark and cache reports (PNG, non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .bench import METRICS  # noqa: E402

_SAVE = {"dpi": 120, "metadata": {"Software": None}}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
    return path


def plot_bench(report: dict, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    backends = sorted(report.get("backends", {}))
    if backends:
        fig, ax = plt.subplots(figsize=(7, 3.6))
        width = 0.8 / len(backends)
        for i, name in enumerate(backends):
            row = report["backends"][name]
            xs = [j + i * width for j in range(len(METRICS))]
            ax.bar(xs, [row[m] for m in METRICS], width, label=name)
        ax.set_xticks([j + width * (len(backends) - 1) / 2 for j in range(len(METRICS))])
        ax.set_xticklabels(METRICS)
        ax.set_ylim(0, 1.05)
        ax.set_ylabel("score")
        ax.set_title(f"Retrieval quality by backend ({report.get('n_queries', 0)} queries)")
        ax.legend(frameon=False)
        paths.append(_save(fig, out / "bench_metrics.png"))
    sweep = report.get("alpha_sweep")
    if sweep:
        fig, ax = plt.subplots(figsize=(5, 3.4))
        alphas = [r["alpha"] for r in sweep]
        for m in ("MRR", "nDCG@10"):
            ax.plot(alphas, [r[m] for r in sweep], marker="o", label=m)
        ax.set_xlabel("alpha (sparse weight)")
        ax.set_ylabel("score")
        ax.set_title("Text backend alpha sweep")
        ax.legend(frameon=False)
        paths.append(_save(fig, out / "alpha_sweep.png"))
    return paths


def plot_cache(report: dict, trace: list[dict], out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(4.6, 3.4))
    labels = ["L1", "L2", "L3", "miss"]
    vals = [report["l1_rate"], report["l2_rate"], report["l3_rate"], report["miss_rate"]]
    ax.bar(labels, vals, color=["#3b6ea8", "#5e9c5a", "#c98b2b", "#a33"])
    for x, v in zip(labels, vals):
        ax.annotate(f"{v:.1%}", (x, v), ha="center", va="bottom", fontsize=8)
    ax.set_ylim(0, 1.1)
    ax.set_ylabel("share of test requests")
    ax.set_title("Cache tier shares")
    paths = [_save(fig, out / "cache_tiers.png")]

    test = [r for r in trace if not r["is_warmup"]]
    if test:
        fig, ax = plt.subplots(figsize=(5, 3.4))
        ax.plot(range(1, len(test) + 1), [r["cumulative_hit_rate"] for r in test])
        ax.set_xlabel("test request")
        ax.set_ylabel("cumulative hit rate")
        ax.set_ylim(0, 1.05)
        ax.set_title(f"Cumulative hit rate (final {report['hit_rate']:.1%})")
        paths.append(_save(fig, out / "cache_hit_curve.png"))
    return paths
