"""Per journal-year collaboration statistics from parsed article records.

Statistics use the population convention (divisor n): a journal-year is
treated as the complete population of that year's articles, not a sample.
Quantiles interpolate linearly between order statistics.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import EmptyInput
from .ingest import ArticleRecord, journal_key


def quantile(values, p: float) -> float:
    """Linear-interpolation quantile: h = p (n - 1), blend v[floor(h)] and
    the next order statistic by the fractional part."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p must be in [0, 1], got {p}")
    v = sorted(float(x) for x in values)
    if not v:
        raise EmptyInput("quantile of an empty list")
    h = p * (len(v) - 1)
    lo = math.floor(h)
    frac = h - lo
    if frac == 0.0:
        return v[lo]
    return v[lo] + frac * (v[lo + 1] - v[lo])


def _mean(v) -> float:
    return sum(v) / len(v)


def _pop_std(v) -> float:
    m = _mean(v)
    return math.sqrt(sum((x - m) ** 2 for x in v) / len(v))


def cross_country_rate(records) -> float:
    """Share of articles whose affiliations span at least two countries.

    Articles with no detected country sit in the denominator only.
    """
    records = list(records)
    if not records:
        raise EmptyInput("cross_country_rate of zero articles")
    multi = sum(1 for r in records if len(r.countries) >= 2)
    return multi / len(records)


@dataclass(frozen=True)
class JournalYearCollab:
    journal_key: str
    year: int
    n_articles: int
    avg_authors: float
    std_authors: float
    author_q25: float
    author_q50: float
    author_q75: float
    avg_institutions: float
    std_institutions: float
    inst_q25: float
    inst_q50: float
    inst_q75: float
    cross_country_rate: float

    def __post_init__(self):
        if self.n_articles < 1:
            raise ValueError("a journal-year row needs at least one article")
        if not (self.author_q25 <= self.author_q50 <= self.author_q75):
            raise ValueError("author quartiles out of order")
        if not (self.inst_q25 <= self.inst_q50 <= self.inst_q75):
            raise ValueError("institution quartiles out of order")
        if self.std_authors < 0 or self.std_institutions < 0:
            raise ValueError("standard deviations must be nonnegative")
        if not 0.0 <= self.cross_country_rate <= 1.0:
            raise ValueError("cross_country_rate outside [0, 1]")


def aggregate_collab(records) -> dict[tuple[str, int], JournalYearCollab]:
    """Group records by (journal key, year) and summarize author and
    institution counts per group. Records without a usable year (pub_year
    0) cannot join a journal-year cell and are skipped."""
    groups: dict[tuple[str, int], list[ArticleRecord]] = defaultdict(list)
    for record in records:
        if record.pub_year == 0:
            continue
        groups[(journal_key(record), record.pub_year)].append(record)

    out = {}
    for key, bucket in groups.items():
        # Sorted so the float accumulation order (and thus the result) is
        # independent of record order.
        authors = sorted(float(r.author_count) for r in bucket)
        insts = sorted(float(len(r.institutions)) for r in bucket)
        out[key] = JournalYearCollab(
            journal_key=key[0],
            year=key[1],
            n_articles=len(bucket),
            avg_authors=_mean(authors),
            std_authors=_pop_std(authors),
            author_q25=quantile(authors, 0.25),
            author_q50=quantile(authors, 0.50),
            author_q75=quantile(authors, 0.75),
            avg_institutions=_mean(insts),
            std_institutions=_pop_std(insts),
            inst_q25=quantile(insts, 0.25),
            inst_q50=quantile(insts, 0.50),
            inst_q75=quantile(insts, 0.75),
            cross_country_rate=cross_country_rate(bucket),
        )
    return out


_INT_FIELDS = {"year", "n_articles"}


def write_collab_csv(table: dict[tuple[str, int], JournalYearCollab], path) -> None:
    """Emit rows sorted by (journal_key, year); header equals the field
    names of JournalYearCollab in declaration order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = [f.name for f in fields(JournalYearCollab)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for key in sorted(table):
            row = table[key]
            writer.writerow([
                getattr(row, n) if n == "journal_key" or n in _INT_FIELDS
                else f"{getattr(row, n):.6f}"
                for n in names
            ])


def read_collab_csv(path) -> dict[tuple[str, int], JournalYearCollab]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            rec = JournalYearCollab(
                journal_key=row["journal_key"],
                year=int(row["year"]),
                n_articles=int(row["n_articles"]),
                avg_authors=float(row["avg_authors"]),
                std_authors=float(row["std_authors"]),
                author_q25=float(row["author_q25"]),
                author_q50=float(row["author_q50"]),
                author_q75=float(row["author_q75"]),
                avg_institutions=float(row["avg_institutions"]),
                std_institutions=float(row["std_institutions"]),
                inst_q25=float(row["inst_q25"]),
                inst_q50=float(row["inst_q50"]),
                inst_q75=float(row["inst_q75"]),
                cross_country_rate=float(row["cross_country_rate"]),
            )
            out[(rec.journal_key, rec.year)] = rec
    return out
