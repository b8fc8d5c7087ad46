"""Inter-rater agreement statistics and score summaries for human ratings.

Ratings arrive as one row per (article, annotator) with a boolean relevance
judgment and two ordinal 1-3 scores. Kappa statistics treat score levels as
unordered categories (unweighted); relevance gates the ordinal scores: a
"wrong relevance" row must carry 1s, enforced at load time.
"""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path

from .errors import DegenerateMarginals, GatingViolation, RowSumMismatch

_METRICS = ("relevance", "accuracy", "completeness")


@dataclass(frozen=True)
class AnnotationScore:
    article_id: str
    annotator_id: str
    ai_relevance_correct: bool
    subfield_accuracy: int
    subfield_completeness: int

    def __post_init__(self):
        for name in ("subfield_accuracy", "subfield_completeness"):
            v = getattr(self, name)
            if v not in (1, 2, 3):
                raise GatingViolation(f"{name} must be 1, 2, or 3; got {v!r}")
        if not self.ai_relevance_correct and (
            self.subfield_accuracy != 1 or self.subfield_completeness != 1
        ):
            raise GatingViolation(
                f"article {self.article_id!r} rated not-relevant by "
                f"{self.annotator_id!r} must carry accuracy=1, completeness=1"
            )

    def metric(self, name: str):
        if name == "relevance":
            return self.ai_relevance_correct
        if name == "accuracy":
            return self.subfield_accuracy
        if name == "completeness":
            return self.subfield_completeness
        raise KeyError(name)


def cohen_kappa(a, b) -> float:
    """Two-rater kappa: (p_o - p_e) / (1 - p_e), chance from marginal products.

    Raises ValueError on empty or length-mismatched input. When chance
    agreement is exactly 1 (both raters constant on the same label) kappa is
    1 by convention; constant disagreement would be undefined and raises.
    """
    a, b = list(a), list(b)
    if len(a) != len(b):
        raise ValueError(f"sequences differ in length: {len(a)} vs {len(b)}")
    if not a:
        raise ValueError("empty sequences")
    n = len(a)
    p_o = sum(x == y for x, y in zip(a, b)) / n
    ca, cb = Counter(a), Counter(b)
    p_e = sum(ca[lab] * cb.get(lab, 0) for lab in ca) / (n * n)
    if p_e >= 1.0:
        if p_o == 1.0:
            return 1.0
        raise DegenerateMarginals("chance agreement is 1 but raters disagree")
    return (p_o - p_e) / (1.0 - p_e)


def fleiss_kappa(counts, r: int) -> float:
    """Multi-rater kappa from an items-by-categories count matrix.

    Every row must sum to the rater count r >= 2. Per-item agreement is
    (sum n_ic^2 - r) / (r (r - 1)); chance is the sum of squared pooled
    category shares.
    """
    rows = [list(row) for row in counts]
    if not rows:
        raise ValueError("empty count matrix")
    if r < 2:
        raise RowSumMismatch(f"rater count must be >= 2, got {r}")
    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            raise RowSumMismatch(f"row {i} has {len(row)} categories, expected {width}")
        if sum(row) != r:
            raise RowSumMismatch(f"row {i} sums to {sum(row)}, expected {r}")
    n_items = len(rows)
    p_bar = sum(
        (sum(c * c for c in row) - r) / (r * (r - 1)) for row in rows
    ) / n_items
    totals = [sum(row[j] for row in rows) for j in range(width)]
    grand = n_items * r
    p_e = sum((t / grand) ** 2 for t in totals)
    if p_e >= 1.0:
        if p_bar == 1.0:
            return 1.0
        raise DegenerateMarginals("chance agreement is 1 but items disagree")
    return (p_bar - p_e) / (1.0 - p_e)


@dataclass
class ScoreSummary:
    annotator_id: str  # "overall" for the pooled row
    n: int
    relevance_mean: float
    relevance_se: float | None
    accuracy_mean: float
    accuracy_se: float | None
    completeness_mean: float
    completeness_se: float | None


def _mean_se(values) -> tuple[float, float | None]:
    n = len(values)
    mean = sum(values) / n
    if n == 1:
        return mean, None
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(var) / math.sqrt(n)


def score_summary(scores) -> list[ScoreSummary]:
    """Mean and standard error (sample std / sqrt(n)) per annotator plus an
    overall row; single-rating groups report SE as absent (None)."""
    scores = list(scores)
    if not scores:
        return []
    by_annotator: dict[str, list[AnnotationScore]] = defaultdict(list)
    for s in scores:
        by_annotator[s.annotator_id].append(s)
    out = []
    for key in ["overall"] + sorted(by_annotator):
        group = scores if key == "overall" else by_annotator[key]
        rel = [float(s.ai_relevance_correct) for s in group]
        acc = [float(s.subfield_accuracy) for s in group]
        comp = [float(s.subfield_completeness) for s in group]
        rm, rse = _mean_se(rel)
        am, ase = _mean_se(acc)
        cm, cse = _mean_se(comp)
        out.append(ScoreSummary(key, len(group), rm, rse, am, ase, cm, cse))
    return out


def load_scores(path) -> list[AnnotationScore]:
    """Read rating rows from CSV; enforces the gating rule and uniqueness of
    (article_id, annotator_id)."""
    scores = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {
            "article_id", "annotator_id", "ai_relevance_correct",
            "subfield_accuracy", "subfield_completeness",
        }
        missing = required - set(reader.fieldnames or [])
        if missing:
            raise GatingViolation(
                f"rating file lacks columns: {', '.join(sorted(missing))}"
            )
        for row in reader:
            rel_raw = row["ai_relevance_correct"].strip().lower()
            if rel_raw not in ("true", "false", "1", "0"):
                raise GatingViolation(
                    f"ai_relevance_correct must be boolean, got {rel_raw!r}"
                )
            acc_raw = (row["subfield_accuracy"] or "").strip()
            comp_raw = (row["subfield_completeness"] or "").strip()
            score = AnnotationScore(
                article_id=row["article_id"].strip(),
                annotator_id=row["annotator_id"].strip(),
                ai_relevance_correct=rel_raw in ("true", "1"),
                subfield_accuracy=int(acc_raw) if acc_raw else None,
                subfield_completeness=int(comp_raw) if comp_raw else None,
            )
            key = (score.article_id, score.annotator_id)
            if key in seen:
                raise GatingViolation(f"duplicate rating for {key}")
            seen.add(key)
            scores.append(score)
    return scores


def _by_article(scores):
    out: dict[str, dict[str, AnnotationScore]] = defaultdict(dict)
    for s in scores:
        out[s.article_id][s.annotator_id] = s
    return out


def pairwise_kappas(scores) -> list[dict]:
    """Cohen's kappa per metric for every annotator pair with shared articles."""
    articles = _by_article(scores)
    annotators = sorted({s.annotator_id for s in scores})
    rows = []
    for i, a in enumerate(annotators):
        for b in annotators[i + 1:]:
            shared = sorted(
                aid for aid, ratings in articles.items()
                if a in ratings and b in ratings
            )
            if not shared:
                continue
            for metric in _METRICS:
                seq_a = [articles[aid][a].metric(metric) for aid in shared]
                seq_b = [articles[aid][b].metric(metric) for aid in shared]
                rows.append({
                    "row_type": "cohen_kappa",
                    "metric": metric,
                    "annotator_a": a,
                    "annotator_b": b,
                    "n": len(shared),
                    "value": cohen_kappa(seq_a, seq_b),
                })
    return rows


def fleiss_subset_kappas(scores) -> list[dict]:
    """Fleiss' kappa per metric on the dominant multiply-rated subset.

    Articles are grouped by how many annotators rated them; the statistic
    needs a constant rater count, so it runs on the modal count >= 2
    (ties broken toward more raters). Returns [] when no article has two
    raters.
    """
    articles = _by_article(scores)
    by_count = Counter(len(v) for v in articles.values() if len(v) >= 2)
    if not by_count:
        return []
    r = max(by_count, key=lambda c: (by_count[c], c))
    subset = sorted(aid for aid, v in articles.items() if len(v) == r)

    rows = []
    levels = {"relevance": [False, True], "accuracy": [1, 2, 3],
              "completeness": [1, 2, 3]}
    for metric in _METRICS:
        lv = levels[metric]
        counts = []
        for aid in subset:
            tally = Counter(s.metric(metric) for s in articles[aid].values())
            counts.append([tally.get(level, 0) for level in lv])
        rows.append({
            "row_type": "fleiss_kappa",
            "metric": metric,
            "annotator_a": "",
            "annotator_b": "",
            "n": len(subset),
            "value": fleiss_kappa(counts, r),
        })
    return rows


def write_agreement_report(scores, path) -> None:
    """Emit pairwise kappas, Fleiss kappas, and per-annotator score means
    into one tidy CSV."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = ["row_type", "metric", "annotator_a", "annotator_b", "n", "value", "se"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in pairwise_kappas(scores) + fleiss_subset_kappas(scores):
            writer.writerow({**row, "se": "", "value": f"{row['value']:.6f}"})
        for s in score_summary(scores):
            for metric, mean, se in (
                ("relevance", s.relevance_mean, s.relevance_se),
                ("accuracy", s.accuracy_mean, s.accuracy_se),
                ("completeness", s.completeness_mean, s.completeness_se),
            ):
                writer.writerow({
                    "row_type": "score_mean",
                    "metric": metric,
                    "annotator_a": s.annotator_id,
                    "annotator_b": "",
                    "n": s.n,
                    "value": f"{mean:.6f}",
                    "se": "" if se is None else f"{se:.6f}",
                })


def check_design(scores, design: dict) -> list[str]:
    """Compare a rating set against a declared study design; returns a list
    of human-readable violations (empty when conformant).

    Recognized keys: n_articles, n_annotators, per_annotator (ratings per
    annotator), shared_articles (articles rated by all annotators).
    """
    problems = []
    articles = _by_article(scores)
    annotators = {s.annotator_id for s in scores}
    if "n_articles" in design and len(articles) != design["n_articles"]:
        problems.append(
            f"expected {design['n_articles']} articles, found {len(articles)}"
        )
    if "n_annotators" in design and len(annotators) != design["n_annotators"]:
        problems.append(
            f"expected {design['n_annotators']} annotators, found {len(annotators)}"
        )
    if "per_annotator" in design:
        per = Counter(s.annotator_id for s in scores)
        off = {a: c for a, c in per.items() if c != design["per_annotator"]}
        for a, c in sorted(off.items()):
            problems.append(
                f"annotator {a} has {c} ratings, expected {design['per_annotator']}"
            )
    if "shared_articles" in design:
        shared = sum(1 for v in articles.values() if set(v) == annotators)
        if shared != design["shared_articles"]:
            problems.append(
                f"expected {design['shared_articles']} articles rated by "
                f"everyone, found {shared}"
            )
    return problems
