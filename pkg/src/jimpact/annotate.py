"""Three-stage abstract annotation pipeline and engagement features.

Stage 1 screens an abstract for substantive AI/ML engagement (strict
yes/no), stage 2 extracts keywords and assigns subfields from a closed
six-label taxonomy, stage 3 re-validates the keywords. A false stage-1
verdict short-circuits; empty abstracts never reach the endpoint at all.
Every stage response is cached content-addressed, keyed by abstract bytes,
stage id, prompt version, and model name, so warm reruns are pure replays.
"""

from __future__ import annotations

import csv
import json
import re
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import UnparseableResponse, ZeroDenominator
from .ingest import ArticleRecord, journal_key
from .llm_cache import ResponseCache, cache_key
from .llm_client import LlmClient

# Bump on ANY template wording change; stale cache entries then miss.
PROMPT_VERSION = "1.0.0"

TAXONOMY = (
    "NaturalLanguageProcessing",
    "ComputerVision",
    "LearningAlgorithms",
    "KnowledgeRepresentation",
    "Search",
    "DistributedAI",
)
_CANON = {re.sub(r"[^a-z]", "", label.casefold()): label for label in TAXONOMY}


def _load_prompt(name: str) -> str:
    return resources.files("jimpact").joinpath(f"prompts/{name}").read_text(
        encoding="utf-8"
    )


_PROMPTS = {
    "stage1": _load_prompt("stage1_relevance.txt"),
    "stage2": _load_prompt("stage2_extract.txt"),
    "stage3": _load_prompt("stage3_validate.txt"),
}

_RETRY_HINTS = {
    "stage1": "Answer with exactly one word: yes or no.",
    "stage2": 'Reply with exactly {"keywords": [...], "subfields": [...]} and no other text.',
    "stage3": 'Reply with exactly {"confirmed": [...]} and no other text.',
}


# --- response parsing ---------------------------------------------------------

def _parse_yes_no(text: str) -> bool:
    tokens = text.strip().split()
    if len(tokens) != 1:
        raise ValueError(f"expected a single token, got {text!r}")
    word = tokens[0].strip(".,!:;").casefold()
    if word == "yes":
        return True
    if word == "no":
        return False
    raise ValueError(f"expected yes/no, got {text!r}")


def _extract_json(text: str) -> dict:
    cleaned = text.strip()
    cleaned = re.sub(r"^```(?:json)?\s*", "", cleaned)
    cleaned = re.sub(r"\s*```$", "", cleaned)
    start, end = cleaned.find("{"), cleaned.rfind("}")
    if start < 0 or end <= start:
        raise ValueError(f"no JSON object in {text!r}")
    obj = json.loads(cleaned[start:end + 1])
    if not isinstance(obj, dict):
        raise ValueError("response JSON is not an object")
    return obj


def normalize_subfield(label: str) -> str | None:
    """Map a model-supplied label onto the closed taxonomy, tolerant of
    spacing/case ("natural language processing" -> NaturalLanguageProcessing).
    Returns None for anything outside the taxonomy."""
    return _CANON.get(re.sub(r"[^a-z]", "", str(label).casefold()))


def _dedup_keywords(raw) -> list[str]:
    seen = set()
    out = []
    for word in raw:
        if not isinstance(word, str):
            raise ValueError("keyword entries must be strings")
        word = word.strip()
        if not word:
            continue
        key = word.casefold()
        if key not in seen:
            seen.add(key)
            out.append(word)
    return out


def _parse_stage2(text: str) -> tuple[list[str], list[str], list[str]]:
    obj = _extract_json(text)
    if "keywords" not in obj or "subfields" not in obj:
        raise ValueError("stage-2 reply must carry 'keywords' and 'subfields'")
    if not isinstance(obj["keywords"], list) or not isinstance(obj["subfields"], list):
        raise ValueError("stage-2 fields must be lists")
    keywords = _dedup_keywords(obj["keywords"])
    subfields, dropped = [], []
    for label in obj["subfields"]:
        canon = normalize_subfield(label)
        if canon is None:
            dropped.append(str(label))
        elif canon not in subfields:
            subfields.append(canon)
    return keywords, subfields, dropped


def _parse_stage3(text: str, keywords: list[str]) -> list[str]:
    obj = _extract_json(text)
    if "confirmed" not in obj or not isinstance(obj["confirmed"], list):
        raise ValueError("stage-3 reply must carry a 'confirmed' list")
    confirmed = {str(c).casefold() for c in obj["confirmed"]}
    return [k for k in keywords if k.casefold() in confirmed]


# --- stage execution -----------------------------------------------------------

def _ask(client: LlmClient, cache: ResponseCache | None, abstract: str,
         stage: str, prompt: str, parse):
    """Fetch-or-replay one stage. The accepted raw response is cached before
    returning; a cached-but-unparseable entry is treated as a miss."""
    key = cache_key(abstract, stage, PROMPT_VERSION, client.model)
    if cache is not None:
        cached = cache.get(key)
        if cached is not None:
            try:
                return parse(cached)
            except (ValueError, json.JSONDecodeError):
                pass  # corrupt or stale entry: refetch below

    messages = [{"role": "user", "content": prompt}]
    raw = client.chat(messages)
    try:
        parsed = parse(raw)
    except (ValueError, json.JSONDecodeError):
        retry_messages = messages + [
            {"role": "assistant", "content": raw},
            {"role": "user",
             "content": f"That reply did not match the required format. {_RETRY_HINTS[stage]}"},
        ]
        raw = client.chat(retry_messages)
        try:
            parsed = parse(raw)
        except (ValueError, json.JSONDecodeError) as exc:
            raise UnparseableResponse(
                f"{stage} reply violated the output schema twice: {exc}"
            ) from exc
    if cache is not None:
        cache.put(key, raw)
    return parsed


def stage1_relevance(abstract: str, client: LlmClient,
                     cache: ResponseCache | None = None) -> bool:
    if not abstract:
        raise ValueError("stage 1 requires a nonempty abstract")
    prompt = _PROMPTS["stage1"].replace("<<ABSTRACT>>", abstract)
    return _ask(client, cache, abstract, "stage1", prompt, _parse_yes_no)


def stage2_extract(abstract: str, client: LlmClient,
                   cache: ResponseCache | None = None):
    """Returns (keywords, subfields, dropped_labels); dropped_labels records
    taxonomy-violating labels for the audit trail."""
    if not abstract:
        raise ValueError("stage 2 requires a nonempty abstract")
    prompt = _PROMPTS["stage2"].replace("<<ABSTRACT>>", abstract)
    return _ask(client, cache, abstract, "stage2", prompt, _parse_stage2)


def stage3_validate(keywords: list[str], abstract: str, client: LlmClient,
                    cache: ResponseCache | None = None) -> list[str]:
    if not keywords:
        raise ValueError("stage 3 requires a nonempty keyword list")
    prompt = (
        _PROMPTS["stage3"]
        .replace("<<ABSTRACT>>", abstract)
        .replace("<<KEYWORDS>>", json.dumps(keywords, ensure_ascii=False))
    )
    return _ask(client, cache, abstract, "stage3", prompt,
                lambda text: _parse_stage3(text, keywords))


# --- results ---------------------------------------------------------------------

@dataclass(frozen=True)
class AnnotationResult:
    article_id: str
    relevant: bool
    raw_keywords: tuple[str, ...]
    validated_keywords: tuple[str, ...]
    subfields: tuple[str, ...]
    prompt_version: str
    model_name: str
    unmapped_subfields: bool = False
    audit_notes: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.relevant and (
            self.raw_keywords or self.validated_keywords or self.subfields
        ):
            raise ValueError("non-relevant results must carry no keywords/subfields")
        raw_fold = {k.casefold() for k in self.raw_keywords}
        if any(k.casefold() not in raw_fold for k in self.validated_keywords):
            raise ValueError("validated keywords must be a subset of raw keywords")
        unknown = [s for s in self.subfields if s not in TAXONOMY]
        if unknown:
            raise ValueError(f"labels outside the taxonomy: {unknown}")
        if self.relevant and not self.subfields and not self.unmapped_subfields:
            raise ValueError(
                "relevant result with no subfields must set unmapped_subfields"
            )


def annotate(article: ArticleRecord, client: LlmClient,
             cache: ResponseCache | None = None) -> AnnotationResult:
    """Run the pipeline for one article.

    Abstract-less articles come back relevant=false with zero endpoint
    traffic. Stage errors propagate to the caller (the corpus driver parks
    failures in a retry queue).
    """
    def result(relevant, raw=(), validated=(), subfields=(),
               unmapped=False, notes=()):
        return AnnotationResult(
            article_id=article.article_id,
            relevant=relevant,
            raw_keywords=tuple(raw),
            validated_keywords=tuple(validated),
            subfields=tuple(subfields),
            prompt_version=PROMPT_VERSION,
            model_name=client.model,
            unmapped_subfields=unmapped,
            audit_notes=tuple(notes),
        )

    abstract = article.abstract_text
    if not abstract:
        return result(False, notes=["no abstract: ineligible for annotation"])

    if not stage1_relevance(abstract, client, cache):
        return result(False)

    keywords, subfields, dropped = stage2_extract(abstract, client, cache)
    notes = [f"dropped label outside taxonomy: {d}" for d in dropped]
    unmapped = not subfields
    if unmapped:
        notes.append("no taxonomy subfield could be assigned")

    validated: list[str] = []
    if keywords:
        validated = stage3_validate(keywords, abstract, client, cache)
    else:
        notes.append("stage 2 returned no keywords; stage 3 skipped")

    return result(True, keywords, validated, subfields, unmapped, notes)


def annotate_corpus(records, client: LlmClient, cache: ResponseCache | None = None,
                    max_inflight: int = 8, retry_queue_path=None):
    """Annotate many records with bounded endpoint concurrency.

    Returns (results, pending): results in input order for the articles
    that finished; pending as (article_id, error text) for those that
    failed all retries, also appended to the retry queue file when a path
    is given. Failures never abort the run.
    """
    records = list(records)
    results: list[AnnotationResult | None] = [None] * len(records)
    errors: dict[int, str] = {}

    def work(i):
        return annotate(records[i], client, cache)

    with ThreadPoolExecutor(max_workers=max(1, max_inflight)) as pool:
        futures = {pool.submit(work, i): i for i in range(len(records))}
        for fut, i in futures.items():
            try:
                results[i] = fut.result()
            except Exception as exc:
                errors[i] = f"{type(exc).__name__}: {exc}"

    pending = [
        (records[i].article_id, errors[i]) for i in sorted(errors)
    ]
    finished = [r for r in results if r is not None]
    if retry_queue_path and pending:
        path = Path(retry_queue_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a", encoding="utf-8") as fh:
            for article_id, error in pending:
                fh.write(json.dumps({"article_id": article_id, "error": error}))
                fh.write("\n")
    return finished, pending


# --- engagement features -----------------------------------------------------------

@dataclass(frozen=True)
class EngagementFeatures:
    journal_key: str
    year: int
    n_ai: int
    n_total: int
    engagement_rate: float
    subfield_counts: dict[str, int] = field(default_factory=dict)
    subfield_distribution: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_total <= 0:
            raise ZeroDenominator(
                f"journal-year {self.journal_key}/{self.year} has no articles"
            )
        if self.n_ai > self.n_total:
            raise ValueError("n_ai cannot exceed n_total")
        if abs(self.engagement_rate - self.n_ai / self.n_total) > 1e-12:
            raise ValueError("engagement_rate must equal n_ai / n_total")
        total = sum(self.subfield_counts.values())
        if total > 0:
            s = sum(self.subfield_distribution.values())
            if abs(s - 1.0) > 1e-9:
                raise ValueError("subfield distribution must sum to 1")
        elif self.subfield_distribution:
            raise ValueError("distribution must be empty when no counts exist")


def engagement_features(jkey: str, year: int, annotations, n_total: int) -> EngagementFeatures:
    """Eq.-style per journal-year features: engagement rate n_ai/n_total and
    the subfield composition normalized by the total subfield count (an
    article contributes one count to every subfield it carries)."""
    annotations = list(annotations)
    if n_total == 0:
        raise ZeroDenominator(f"journal-year {jkey}/{year} has zero articles")
    n_ai = sum(1 for a in annotations if a.relevant)
    if n_total < n_ai:
        raise ValueError(f"n_total {n_total} < relevant count {n_ai}")
    counts: Counter = Counter()
    for a in annotations:
        counts.update(a.subfields)
    total = sum(counts.values())
    distribution = (
        {k: counts[k] / total for k in counts} if total > 0 else {}
    )
    return EngagementFeatures(
        journal_key=jkey,
        year=year,
        n_ai=n_ai,
        n_total=n_total,
        engagement_rate=n_ai / n_total,
        subfield_counts=dict(counts),
        subfield_distribution=distribution,
    )


def aggregate_engagement(records, annotations):
    """Join annotations onto records by article id and compute per
    journal-year features.

    Every record with a usable year counts in its cell's denominator,
    abstract or not; the per-cell count of abstract-less articles is
    returned alongside for auditability.
    """
    by_id = {a.article_id: a for a in annotations}
    cells: dict[tuple[str, int], list[ArticleRecord]] = defaultdict(list)
    for record in records:
        if record.pub_year == 0:
            continue
        cells[(journal_key(record), record.pub_year)].append(record)

    features = {}
    no_abstract = {}
    for (jkey, year), bucket in cells.items():
        anns = [by_id[r.article_id] for r in bucket if r.article_id in by_id]
        features[(jkey, year)] = engagement_features(jkey, year, anns, len(bucket))
        no_abstract[(jkey, year)] = sum(1 for r in bucket if not r.abstract_text)
    return features, no_abstract


# --- serialization --------------------------------------------------------------------

_ANNOTATION_FIELDS = (
    "article_id", "relevant", "raw_keywords", "validated_keywords",
    "subfields", "prompt_version", "model_name", "unmapped_subfields",
    "audit_notes",
)


def write_annotations_jsonl(annotations, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for a in annotations:
            row = {}
            for name in _ANNOTATION_FIELDS:
                value = getattr(a, name)
                row[name] = list(value) if isinstance(value, tuple) else value
            fh.write(json.dumps(row, ensure_ascii=False))
            fh.write("\n")


def read_annotations_jsonl(path) -> list[AnnotationResult]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            data = json.loads(line)
            out.append(AnnotationResult(
                article_id=data["article_id"],
                relevant=data["relevant"],
                raw_keywords=tuple(data["raw_keywords"]),
                validated_keywords=tuple(data["validated_keywords"]),
                subfields=tuple(data["subfields"]),
                prompt_version=data["prompt_version"],
                model_name=data["model_name"],
                unmapped_subfields=data.get("unmapped_subfields", False),
                audit_notes=tuple(data.get("audit_notes", ())),
            ))
    return out


@dataclass(frozen=True)
class EngagementRow:
    """One engagement.csv row read back for joining."""

    journal_key: str
    year: int
    n_total: int
    n_ai: int
    n_no_abstract: int
    engagement_rate: float
    subfield_counts: tuple
    subfield_shares: tuple


def read_engagement_csv(path) -> dict:
    """engagement.csv -> {(journal_key, year): EngagementRow}."""
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for raw in reader:
            row = EngagementRow(
                journal_key=raw["journal_key"],
                year=int(raw["year"]),
                n_total=int(raw["n_total"]),
                n_ai=int(raw["n_ai"]),
                n_no_abstract=int(raw["n_no_abstract"]),
                engagement_rate=float(raw["engagement_rate"]),
                subfield_counts=tuple(
                    int(raw[f"count_{label}"]) for label in TAXONOMY),
                subfield_shares=tuple(
                    float(raw[f"share_{label}"]) for label in TAXONOMY),
            )
            out[(row.journal_key, row.year)] = row
    return out


def write_engagement_csv(features: dict, no_abstract: dict, path) -> None:
    """One row per journal-year, sorted by key; per-subfield count and share
    columns in taxonomy order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ["journal_key", "year", "n_total", "n_ai", "n_no_abstract",
              "engagement_rate"]
    header += [f"count_{label}" for label in TAXONOMY]
    header += [f"share_{label}" for label in TAXONOMY]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for key in sorted(features):
            f = features[key]
            row = [f.journal_key, f.year, f.n_total, f.n_ai,
                   no_abstract.get(key, 0), f"{f.engagement_rate:.6f}"]
            row += [f.subfield_counts.get(label, 0) for label in TAXONOMY]
            row += [
                f"{f.subfield_distribution.get(label, 0.0):.6f}"
                for label in TAXONOMY
            ]
            writer.writerow(row)
