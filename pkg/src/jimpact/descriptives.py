"""Descriptive statistics: quartile-mix equitability, keyword frequency
tables, and category-level engagement summaries.

All functions are pure; the writers at the bottom serialize to CSV with
stable ordering so repeated runs produce identical bytes.
"""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from pathlib import Path

from .errors import AllZero, EmptyInput

QUARTILE_CLASSES = ("Q1", "Q2", "Q3", "Q4")


def shannon_equitability(counts) -> float:
    """Entropy of the class distribution scaled to [0, 1] by ln(k).

    ``counts`` maps each declared class to a nonnegative count; zero-count
    classes still widen the denominator ln(k). Raises AllZero when nothing
    was counted, ValueError for fewer than two declared classes or negative
    counts.
    """
    counts = dict(counts)
    k = len(counts)
    if k < 2:
        raise ValueError(f"need at least 2 declared classes, got {k}")
    values = list(counts.values())
    if any(v < 0 for v in values):
        raise ValueError("counts must be nonnegative")
    total = sum(values)
    if total == 0:
        raise AllZero("all class counts are zero")
    h = 0.0
    for v in values:
        if v > 0:
            p = v / total
            h -= p * math.log(p)
    return h / math.log(k)


def keyword_frequency(keywords) -> dict[str, float]:
    """Normalized keyword frequencies f(w) = n(w) / sum over all words.

    Accepts a word iterable or a ready Counter; raises EmptyInput on an
    empty multiset.
    """
    tally = Counter(keywords) if not isinstance(keywords, Counter) else keywords
    total = sum(tally.values())
    if total == 0:
        raise EmptyInput("no keywords to count")
    return {w: n / total for w, n in tally.items()}


def category_ai_summary(rows) -> dict[str, dict[str, float]]:
    """Two engagement-rate means per subject category.

    Each row is one journal-year observation: {"category", "year", "rate"}.
    pooled_mean averages every row directly; year_normalized_mean first
    averages journals within each (category, year) cell, then averages the
    per-year means with equal weight. The two coincide on balanced panels.
    """
    pooled: dict[str, list[float]] = defaultdict(list)
    cells: dict[str, dict[object, list[float]]] = defaultdict(lambda: defaultdict(list))
    for row in rows:
        cat = row["category"]
        rate = float(row["rate"])
        pooled[cat].append(rate)
        cells[cat][row["year"]].append(rate)
    out = {}
    for cat in pooled:
        year_means = [sum(v) / len(v) for v in cells[cat].values()]
        out[cat] = {
            "n_rows": len(pooled[cat]),
            "pooled_mean": sum(pooled[cat]) / len(pooled[cat]),
            "year_normalized_mean": sum(year_means) / len(year_means),
        }
    return out


# --- CSV writers ------------------------------------------------------------

def write_equitability_by_year(year_counts, path) -> None:
    """``year_counts`` maps year -> {class: count}; one output row per year."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["year", "n_journals", "equitability"])
        for year in sorted(year_counts):
            counts = year_counts[year]
            total = sum(counts.values())
            writer.writerow([year, total, f"{shannon_equitability(counts):.6f}"])


def write_keyword_freq(freq: dict[str, float], path, top_k: int | None = None) -> None:
    """Ranked keyword table, highest frequency first, ties alphabetical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
    if top_k is not None:
        ranked = ranked[:top_k]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["keyword", "frequency"])
        for word, f in ranked:
            writer.writerow([word, f"{f:.6f}"])


def write_ai_by_category(summary: dict[str, dict[str, float]], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["category", "n_rows", "pooled_mean", "year_normalized_mean"])
        for cat in sorted(summary):
            s = summary[cat]
            writer.writerow([
                cat, s["n_rows"],
                f"{s['pooled_mean']:.6f}", f"{s['year_normalized_mean']:.6f}",
            ])
