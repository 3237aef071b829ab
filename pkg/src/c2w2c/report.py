"""Delimited tables and matplotlib figures written next to each other."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .corpus import LENGTH_BUCKETS, CorpusStats  # noqa: E402

COVERAGE_POINTS = (5000, 10000, 20000)


def write_tsv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    lines = ["\t".join(header)]
    lines += ["\t".join(str(v) for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def stats_rows(stats: CorpusStats) -> list[tuple[str, str]]:
    rows = [
        ("total_tokens", str(stats.total_tokens)),
        ("unique_tokens", str(stats.unique_tokens)),
        ("unique_ratio", f"{stats.unique_ratio:.6f}"),
    ]
    rows += [(f"coverage_{k}", f"{stats.coverage(k):.6f}") for k in COVERAGE_POINTS]
    rows.append(("coverage_max_len_20", f"{stats.max_len_coverage(20):.6f}"))
    rows += [(f"length_{b}", str(stats.length_histogram[b])) for b in LENGTH_BUCKETS]
    return rows


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_length_histogram(stats: CorpusStats, path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    counts = [stats.length_histogram[b] for b in LENGTH_BUCKETS]
    ax.bar(LENGTH_BUCKETS, counts, color="tab:blue")
    ax.set_xlabel("Word length (characters)")
    ax.set_ylabel("Number of words in dataset")
    return _save(fig, path)


def plot_coverage(stats: CorpusStats, path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    n = stats.unique_tokens
    ks = sorted({max(1, round(n * f / 200)) for f in range(201)})
    ax.plot(ks, [stats.coverage(k) for k in ks], color="tab:green")
    for k in COVERAGE_POINTS:
        if k <= n:
            ax.axvline(k, color="grey", lw=0.6, ls=":")
    ax.set_xlabel("Most frequent types kept")
    ax.set_ylabel("Token coverage")
    ax.set_ylim(0, 1.01)
    return _save(fig, path)


def plot_training(epochs: Sequence[int], train_loss: Sequence[float], path, valid_ppl: Sequence[float] | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(epochs, train_loss, marker="o", ms=3, label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean NLL per unit")
    if valid_ppl:
        ax2 = ax.twinx()
        ax2.plot(epochs[: len(valid_ppl)], valid_ppl, color="tab:red", marker="s", ms=3, label="valid PP")
        ax2.set_ylabel("validation perplexity")
    ax.legend(loc="upper right")
    return _save(fig, path)


def plot_params(tables: dict[str, dict[str, int]], path) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    x = 0
    ticks, labels = [], []
    for model, counts in tables.items():
        for part, n in counts.items():
            if part == "total":
                continue
            ax.bar(x, n / 1e6)
            ticks.append(x)
            labels.append(f"{model}\n{part}")
            x += 1
        x += 1
    ax.set_xticks(ticks, labels, fontsize=8)
    ax.set_ylabel("parameters (millions)")
    return _save(fig, path)
