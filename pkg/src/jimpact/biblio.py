"""Harmonize journal bibliometric tables and build lagged modeling rows.

Several upstream tables describe overlapping journal sets under different
column names and identifier coverage. This module merges them into one
journal-year table (ISSN first, then EISSN, then fuzzy title), records
where each field value came from, and assembles per-journal modeling rows
whose covariates are drawn strictly from the years before the target year.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields as dc_fields
from typing import Iterable, Mapping, Optional, Sequence

from .errors import ColumnMappingInvalid, LeakageError
from .ingest import normalize_title

QUARTILES = ("Q1", "Q2", "Q3", "Q4")

# quartile -> numeric score, larger = more prestigious
_QUARTILE_SCORE = {"Q1": 4, "Q2": 3, "Q3": 2, "Q4": 1}

FUZZY_THRESHOLD = 0.90


@dataclass(frozen=True)
class JournalBibRecord:
    """One journal-year observation from a single bibliometric source.

    Optional metrics are None when the source does not report them,
    never a sentinel number.
    """

    issn: str
    eissn: str
    title: str
    subject_category: str
    year: int
    impact_factor: Optional[float] = None
    quartile: Optional[str] = None
    total_cites_3y: Optional[int] = None
    total_refs: Optional[int] = None
    publication_count: Optional[int] = None
    publication_delay_weeks: Optional[float] = None
    copyright_retention: Optional[bool] = None
    apc: Optional[float] = None

    def __post_init__(self):
        if not (2016 <= self.year <= 2024):
            raise ValueError(f"year {self.year} outside supported range")
        if not (self.issn or self.eissn or self.title.strip()):
            raise ValueError("record needs an ISSN, EISSN, or title")
        if self.quartile is not None and self.quartile not in QUARTILES:
            raise ValueError(f"unknown quartile {self.quartile!r}")
        for name in ("impact_factor", "publication_delay_weeks", "apc"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be nonnegative")
        for name in ("total_cites_3y", "total_refs", "publication_count"):
            v = getattr(self, name)
            if v is not None and (v < 0 or v != int(v)):
                raise ValueError(f"{name} must be a nonnegative count")


_METRIC_FIELDS = (
    "impact_factor", "quartile", "total_cites_3y", "total_refs",
    "publication_count", "publication_delay_weeks", "copyright_retention",
    "apc",
)
_IDENTITY_FIELDS = ("issn", "eissn", "title", "subject_category")

_INT_FIELDS = {"total_cites_3y", "total_refs", "publication_count", "year"}
_FLOAT_FIELDS = {"impact_factor", "publication_delay_weeks", "apc"}
_BOOL_FIELDS = {"copyright_retention"}

_TRUE_WORDS = {"true", "yes", "y", "1"}
_FALSE_WORDS = {"false", "no", "n", "0"}


def quartile_score(quartile: str) -> int:
    """Q1 -> 4 ... Q4 -> 1, so larger means higher standing."""
    try:
        return _QUARTILE_SCORE[quartile]
    except KeyError:
        raise ValueError(f"unknown quartile {quartile!r}") from None


def _parse_cell(field_name: str, raw: str):
    raw = raw.strip()
    if raw == "":
        return None
    if field_name in _INT_FIELDS:
        return int(float(raw))
    if field_name in _FLOAT_FIELDS:
        return float(raw)
    if field_name in _BOOL_FIELDS:
        low = raw.lower()
        if low in _TRUE_WORDS:
            return True
        if low in _FALSE_WORDS:
            return False
        raise ValueError(f"cannot read boolean {raw!r} for {field_name}")
    return raw


_VALID_MAP_KEYS = {f.name for f in dc_fields(JournalBibRecord)}


def load_bib_table(path, column_map: Mapping[str, str],
                   default_year: Optional[int] = None) -> list[JournalBibRecord]:
    """Read one delimited bibliometric table using a declared column map.

    ``column_map`` maps JournalBibRecord field names to the table's column
    headers. The mapping must cover ``year`` (unless ``default_year`` is
    given, for year-less policy tables) plus at least one identifier.
    """
    bad = sorted(set(column_map) - _VALID_MAP_KEYS)
    if bad:
        raise ColumnMappingInvalid(f"unknown field names in column map: {bad}")
    if not ({"issn", "eissn", "title"} & set(column_map)):
        raise ColumnMappingInvalid(
            "column map must include at least one of issn, eissn, title")
    if "year" not in column_map and default_year is None:
        raise ColumnMappingInvalid("column map must include year")

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = sorted(set(column_map.values()) - set(header))
        if missing:
            raise ColumnMappingInvalid(
                f"{path}: mapped columns missing from table: {missing}")
        records = []
        for row in reader:
            kwargs = {}
            for field_name, col in column_map.items():
                try:
                    kwargs[field_name] = _parse_cell(field_name, row[col] or "")
                except ValueError as exc:
                    raise ColumnMappingInvalid(f"{path}: {exc}") from exc
            for ident in _IDENTITY_FIELDS:
                kwargs.setdefault(ident, "")
                if kwargs[ident] is None:
                    kwargs[ident] = ""
            if kwargs.get("year") is None:
                kwargs["year"] = default_year
            records.append(JournalBibRecord(**kwargs))
    return records


# --- fuzzy title matching ----------------------------------------------------


def _normalize_for_match(s: str) -> str:
    return normalize_title(s)


def _levenshtein(a: str, b: str) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1,
                           prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def fuzzy_title_match(a: str, b: str) -> float:
    """Similarity of two journal titles after normalization, in [0, 1].

    1 - edit_distance / max(length); two empty strings count as identical.
    """
    na, nb = _normalize_for_match(a), _normalize_for_match(b)
    if not na and not nb:
        return 1.0
    longest = max(len(na), len(nb))
    return 1.0 - _levenshtein(na, nb) / longest


def titles_match(a: str, b: str) -> bool:
    return fuzzy_title_match(a, b) >= FUZZY_THRESHOLD


# --- harmonization -----------------------------------------------------------


@dataclass
class UnifiedCell:
    """Merged journal-year values plus per-field provenance.

    provenance[field] is the contributing source's name; when a
    lower-priority source filled a gap the primary source left, the value
    is additionally marked in ``supplemented``.
    """

    journal_key: str
    year: int
    primary_source: str = ""
    values: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    supplemented: set = field(default_factory=set)


@dataclass
class UnifiedTable:
    cells: dict  # (journal_key, year) -> UnifiedCell
    conflicts: list  # (journal_key, year, field, kept_source, dropped_source)
    fuzzy_joins: list  # (title_a, title_b, similarity)

    def get(self, journal_key: str, year: int) -> Optional[UnifiedCell]:
        return self.cells.get((journal_key, year))

    def to_records(self) -> list[JournalBibRecord]:
        out = []
        for (_, year), cell in sorted(self.cells.items()):
            kw = {k: cell.values.get(k) for k in _METRIC_FIELDS}
            out.append(JournalBibRecord(
                issn=cell.values.get("issn", ""),
                eissn=cell.values.get("eissn", ""),
                title=cell.values.get("title", ""),
                subject_category=cell.values.get("subject_category", ""),
                year=year, **kw))
        return out


class _JournalRegistry:
    """Resolves records to stable journal identities via ISSN, EISSN,
    then fuzzy title."""

    def __init__(self):
        self._by_issn = {}
        self._by_eissn = {}
        self._titles = []  # (normalized_title, key)
        # key -> (issn, eissn, title, source); frozen when the journal is
        # first seen, so every cell of a journal shares one identity and
        # re-harmonizing a merged table cannot re-key it
        self.identity = {}
        self.fuzzy_joins = []

    def resolve(self, rec: JournalBibRecord, source_name: str) -> str:
        key = None
        if rec.issn and rec.issn in self._by_issn:
            key = self._by_issn[rec.issn]
        elif rec.eissn and rec.eissn in self._by_eissn:
            key = self._by_eissn[rec.eissn]
        else:
            norm = _normalize_for_match(rec.title)
            if norm:
                for known, known_key in self._titles:
                    sim = fuzzy_title_match(norm, known)
                    if sim >= FUZZY_THRESHOLD:
                        key = known_key
                        if norm != known:
                            self.fuzzy_joins.append((rec.title, known, sim))
                        break
        if key is None:
            key = rec.issn or rec.eissn or _normalize_for_match(rec.title)
            self.identity[key] = (rec.issn, rec.eissn, rec.title, source_name)
        self._register(rec, key)
        return key

    def _register(self, rec: JournalBibRecord, key: str):
        if rec.issn:
            self._by_issn.setdefault(rec.issn, key)
        if rec.eissn:
            self._by_eissn.setdefault(rec.eissn, key)
        norm = _normalize_for_match(rec.title)
        if norm and all(t != norm for t, _ in self._titles):
            self._titles.append((norm, key))


def harmonize(sources: Sequence[tuple[str, Iterable[JournalBibRecord]]]) -> UnifiedTable:
    """Merge bibliometric tables into one journal-year table.

    ``sources`` is ordered by priority: on conflicting values the earlier
    source wins and the disagreement is logged. Values only a later source
    provides are kept and marked supplemented.
    """
    registry = _JournalRegistry()
    cells: dict = {}
    conflicts = []

    for source_name, records in sources:
        for rec in records:
            key = registry.resolve(rec, source_name)
            cell = cells.get((key, rec.year))
            if cell is None:
                cell = UnifiedCell(journal_key=key, year=rec.year,
                                   primary_source=source_name)
                cells[(key, rec.year)] = cell
                # identity fields come from the journal's founding source
                issn, eissn, title, founder = registry.identity[key]
                for field_name, value in (("issn", issn), ("eissn", eissn),
                                          ("title", title)):
                    if value:
                        cell.values[field_name] = value
                        cell.provenance[field_name] = founder
            for field_name in ("subject_category",) + _METRIC_FIELDS:
                value = getattr(rec, field_name)
                if value is None or value == "":
                    continue
                if field_name not in cell.values:
                    cell.values[field_name] = value
                    cell.provenance[field_name] = source_name
                    if source_name != cell.primary_source:
                        cell.supplemented.add(field_name)
                elif cell.values[field_name] != value:
                    conflicts.append((key, rec.year, field_name,
                                      cell.provenance[field_name], source_name))

    ordered = dict(sorted(cells.items()))
    return UnifiedTable(cells=ordered, conflicts=conflicts,
                        fuzzy_joins=list(registry.fuzzy_joins))


# --- lagged modeling rows ------------------------------------------------------


#: covariates taken from the unified bibliometric table, per lag year
BIB_COVARIATES = ("impact_factor", "quartile_score", "total_cites_3y",
                  "total_refs", "publication_count")
#: static policy attributes (no lag structure)
POLICY_COVARIATES = ("publication_delay_weeks", "copyright_retention", "apc")
#: covariates taken from the collaboration features table, per lag year
COLLAB_COVARIATES = ("avg_authors", "avg_institutions", "cross_country_rate")
#: covariates taken from the engagement features table, per lag year
ENGAGEMENT_COVARIATES = ("engagement_rate",)

FEATURE_GROUPS = ("bibliometric", "collaboration", "engagement")


@dataclass(frozen=True)
class JoinedJournalYear:
    """One modeling row: outcomes at the target year, covariates from
    earlier years only. Construction fails if any covariate is bound to
    the target year itself."""

    journal_key: str
    target_year: int
    subject_category: str
    impact_factor_t: Optional[float]
    total_cites_3y_t: Optional[float]
    quartile_score_t: Optional[float]
    covariates: Mapping[str, Optional[float]]
    covariate_years: Mapping[str, int]
    completeness: Mapping[str, bool]

    def __post_init__(self):
        leaked = sorted(n for n, y in self.covariate_years.items()
                        if y == self.target_year)
        if leaked:
            raise LeakageError(
                f"covariates bound to target year {self.target_year}: {leaked}")
        future = sorted(n for n, y in self.covariate_years.items()
                        if y > self.target_year)
        if future:
            raise LeakageError(
                f"covariates bound to future years: {future}")
        if self.quartile_score_t is not None and \
                self.quartile_score_t not in (1, 2, 3, 4):
            raise ValueError("quartile_score must be in 1..4")


def _cell_bib_covariate(cell: Optional[UnifiedCell], name: str):
    if cell is None:
        return None
    if name == "quartile_score":
        q = cell.values.get("quartile")
        return None if q is None else float(quartile_score(q))
    v = cell.values.get(name)
    return None if v is None else float(v)


def build_subset(unified: UnifiedTable,
                 collab: Mapping[tuple[str, int], object],
                 engagement: Mapping[tuple[str, int], object],
                 target_year: int,
                 lags: Sequence[int] = (1, 2, 3)) -> list[JoinedJournalYear]:
    """Assemble modeling rows for one target year.

    Keeps journals with a present impact factor at the target year;
    covariates come from target_year - lag for each requested lag. Lags
    that would touch the target year or the future are rejected.
    """
    bad = [l for l in lags if l < 1]
    if bad:
        raise LeakageError(
            f"lags {sorted(bad)} reach the target year or later")
    lags = tuple(dict.fromkeys(int(l) for l in lags))

    journal_keys = sorted({k for (k, _) in unified.cells})
    rows = []
    for jkey in journal_keys:
        t_cell = unified.get(jkey, target_year)
        if t_cell is None or t_cell.values.get("impact_factor") is None:
            continue

        covariates: dict = {}
        covariate_years: dict = {}
        group_complete = {g: True for g in FEATURE_GROUPS}

        for lag in lags:
            year = target_year - lag
            cell = unified.get(jkey, year)
            for name in BIB_COVARIATES:
                col = f"{name}_lag{lag}"
                value = _cell_bib_covariate(cell, name)
                covariates[col] = value
                covariate_years[col] = year
                if value is None:
                    group_complete["bibliometric"] = False
            c = collab.get((jkey, year))
            for name in COLLAB_COVARIATES:
                col = f"{name}_lag{lag}"
                value = None if c is None else float(getattr(c, name))
                covariates[col] = value
                covariate_years[col] = year
                if value is None:
                    group_complete["collaboration"] = False
            e = engagement.get((jkey, year))
            for name in ENGAGEMENT_COVARIATES:
                col = f"{name}_lag{lag}"
                value = None if e is None else float(getattr(e, name))
                covariates[col] = value
                covariate_years[col] = year
                if value is None:
                    group_complete["engagement"] = False

        for name in POLICY_COVARIATES:
            v = t_cell.values.get(name)
            if v is None:
                for lag in lags:
                    cell = unified.get(jkey, target_year - lag)
                    if cell is not None and cell.values.get(name) is not None:
                        v = cell.values[name]
                        break
            covariates[name] = None if v is None else float(v)

        q = t_cell.values.get("quartile")
        rows.append(JoinedJournalYear(
            journal_key=jkey,
            target_year=target_year,
            subject_category=t_cell.values.get("subject_category", ""),
            impact_factor_t=float(t_cell.values["impact_factor"]),
            total_cites_3y_t=(None if t_cell.values.get("total_cites_3y") is None
                              else float(t_cell.values["total_cites_3y"])),
            quartile_score_t=(None if q is None else float(quartile_score(q))),
            covariates=covariates,
            covariate_years=covariate_years,
            completeness=group_complete,
        ))
    return rows


def model_row_columns(lags: Sequence[int] = (1, 2, 3)) -> list[str]:
    """Stable covariate column order used by the CSV writer."""
    cols = []
    for lag in lags:
        for name in BIB_COVARIATES:
            cols.append(f"{name}_lag{lag}")
    for lag in lags:
        for name in COLLAB_COVARIATES:
            cols.append(f"{name}_lag{lag}")
    for lag in lags:
        for name in ENGAGEMENT_COVARIATES:
            cols.append(f"{name}_lag{lag}")
    cols.extend(POLICY_COVARIATES)
    return cols


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and v == int(v):
        return str(int(v))
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def write_model_rows(rows: Sequence[JoinedJournalYear], path,
                     lags: Sequence[int] = (1, 2, 3)):
    cov_cols = model_row_columns(lags)
    header = (["journal_key", "target_year", "subject_category",
               "impact_factor", "total_cites_3y", "quartile_score"]
              + cov_cols
              + [f"complete_{g}" for g in FEATURE_GROUPS])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in sorted(rows, key=lambda r: r.journal_key):
            line = [row.journal_key, row.target_year, row.subject_category,
                    _fmt(row.impact_factor_t), _fmt(row.total_cites_3y_t),
                    _fmt(row.quartile_score_t)]
            line += [_fmt(row.covariates.get(c)) for c in cov_cols]
            line += [str(row.completeness[g]).lower() for g in FEATURE_GROUPS]
            w.writerow(line)


def read_model_rows(path) -> tuple[list[dict], list[str]]:
    """Read a model rows table back as dicts with floats where possible.

    Returns (rows, covariate_column_names)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = list(reader.fieldnames or [])
        fixed = {"journal_key", "target_year", "subject_category"}
        cov_cols = [c for c in header
                    if c not in fixed and not c.startswith("complete_")
                    and c not in ("impact_factor", "total_cites_3y",
                                  "quartile_score")]
        rows = []
        for raw in reader:
            row = {
                "journal_key": raw["journal_key"],
                "target_year": int(raw["target_year"]),
                "subject_category": raw["subject_category"],
            }
            for col in ("impact_factor", "total_cites_3y", "quartile_score"):
                row[col] = float(raw[col]) if raw[col] != "" else None
            for col in cov_cols:
                val = raw[col]
                if val in ("true", "false"):
                    row[col] = 1.0 if val == "true" else 0.0
                else:
                    row[col] = float(val) if val != "" else None
            for col in header:
                if col.startswith("complete_"):
                    row[col] = raw[col] == "true"
            rows.append(row)
    return rows, cov_cols
