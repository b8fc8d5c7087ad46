"""JATS/PMC article XML parsing into normalized records.

Extraction is tag-first: structured elements win when present, and a curated
name/abbreviation table (shipped as country_table.json, versioned) backstops
country detection from raw affiliation strings. Parsing is best-effort:
absent fields come back empty or zero, never invented.
"""

from __future__ import annotations

import json
import re
import unicodedata
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import MalformedXml, MissingJournalIdentity, RootNotFound

_WS = re.compile(r"\s+")
_ZIP = re.compile(r"\b\d{4,10}(?:-\d{4})?\b")
_STATE_ZIP = re.compile(r"^([A-Z]{2})\s+\d{5}(?:-\d{4})?$")


def _load_country_table() -> dict:
    with resources.files("jimpact").joinpath("country_table.json").open(
        "r", encoding="utf-8"
    ) as fh:
        return json.load(fh)


_TABLE = _load_country_table()
_NAMES: dict[str, str] = _TABLE["names"]
_US_STATES = frozenset(_TABLE["us_states"])
_VALID_CODES = frozenset(_NAMES.values())


def _collapse(text: str) -> str:
    return _WS.sub(" ", text).strip()


def normalize_title(title: str) -> str:
    """Lowercase, strip accents and punctuation, collapse whitespace.

    Shared by journal keying and fuzzy title comparison so both sides of a
    join see the same canonical form.
    """
    text = unicodedata.normalize("NFKD", title)
    text = "".join(c for c in text if not unicodedata.combining(c))
    text = text.casefold()
    text = re.sub(r"[^a-z0-9\s]", " ", text)
    return _collapse(text)


@dataclass(frozen=True)
class ArticleRecord:
    """One parsed article. Sets are stored frozen so records are hashable
    and safe to share across threads."""

    article_id: str
    journal_issn: str
    journal_eissn: str
    journal_title: str
    pub_year: int  # 0 when the XML carries no usable year
    article_type: str
    abstract_text: str
    author_count: int
    institutions: frozenset[str] = field(default_factory=frozenset)
    countries: frozenset[str] = field(default_factory=frozenset)
    keywords: tuple[str, ...] = ()

    def __post_init__(self):
        if not (self.journal_issn or self.journal_eissn or self.journal_title):
            raise MissingJournalIdentity(
                f"article {self.article_id!r} has no ISSN, EISSN, or title"
            )
        if self.pub_year != 0 and not (1900 <= self.pub_year <= 2100):
            raise ValueError(f"pub_year out of range: {self.pub_year}")
        if self.author_count < 0:
            raise ValueError("author_count must be nonnegative")
        if any(not inst for inst in self.institutions):
            raise ValueError("institutions must not contain empty strings")
        for code in self.countries:
            if not re.fullmatch(r"[A-Z]{2}", code):
                raise ValueError(f"invalid country code: {code!r}")

    @property
    def has_abstract(self) -> bool:
        return bool(self.abstract_text)


def journal_key(record: ArticleRecord) -> str:
    """Stable journal identity: ISSN, then EISSN, then normalized title."""
    if record.journal_issn:
        return record.journal_issn
    if record.journal_eissn:
        return record.journal_eissn
    return normalize_title(record.journal_title)


def _normalize_country_token(token: str, allow_code: bool = False) -> str | None:
    # allow_code applies only to explicit <country> tags: in free text a
    # bare two-letter token is almost always a US state, not an ISO code.
    cleaned = _collapse(_ZIP.sub(" ", token)).strip(" .;")
    if not cleaned:
        return None
    if allow_code and re.fullmatch(r"[A-Za-z]{2}", cleaned) and cleaned.upper() in _VALID_CODES:
        return cleaned.upper()
    key = _collapse(re.sub(r"[^\w\s'.-]", " ", cleaned)).casefold()
    hit = _NAMES.get(key) or _NAMES.get(key.rstrip("."))
    return hit


def _countries_from_text(text: str) -> set[str]:
    """Pattern fallback over the trailing comma segments of an affiliation."""
    segments = [s for s in (seg.strip() for seg in text.split(",")) if s]
    for raw in reversed(segments[-3:]):
        code = _normalize_country_token(raw)
        if code:
            return {code}
        m = _STATE_ZIP.match(raw)
        if m and m.group(1) in _US_STATES:
            return {"US"}
    return set()


def extract_countries(affiliations) -> frozenset[str]:
    """Country codes from (affiliation text, optional country-tag value)
    pairs. A recognizable tag decides its affiliation outright; otherwise
    the pattern table scans the text. Unmatched affiliations contribute
    nothing; extraction never fails."""
    out: set[str] = set()
    for text, tag in affiliations:
        if tag:
            code = _normalize_country_token(tag, allow_code=True)
            if code:
                out.add(code)
                continue
        if text:
            out |= _countries_from_text(text)
    return frozenset(out)


def _text(el) -> str:
    return _collapse(" ".join(el.itertext())) if el is not None else ""


def _find_year(article_meta) -> int:
    if article_meta is None:
        return 0
    dates = article_meta.findall("pub-date")
    electronic, printed, other = [], [], []
    for d in dates:
        kind = (d.get("pub-type") or d.get("date-type") or "").lower()
        fmt = (d.get("publication-format") or "").lower()
        year_el = d.find("year")
        if year_el is None or not (year_el.text or "").strip():
            continue
        try:
            year = int(year_el.text.strip())
        except ValueError:
            continue
        if kind == "epub" or fmt == "electronic":
            electronic.append(year)
        elif kind in ("ppub", "collection") or fmt == "print":
            printed.append(year)
        else:
            other.append(year)
    for bucket in (electronic, printed, other):
        if bucket:
            return bucket[0]
    return 0


def parse_article(xml_bytes: bytes) -> ArticleRecord:
    """Parse one JATS article document into a record.

    Raises MalformedXml for unparseable bytes and MissingJournalIdentity
    when neither ISSN, EISSN, nor a journal title is present. A missing
    abstract is not an error: the record simply carries empty text and is
    skipped by annotation downstream.
    """
    try:
        root = ET.fromstring(xml_bytes)
    except ET.ParseError as exc:
        raise MalformedXml(f"unparseable XML: {exc}") from exc
    if root.tag != "article":
        # Tolerate a wrapping element (e.g. pmc-articleset).
        inner = root.find(".//article")
        if inner is None:
            raise MalformedXml(f"no <article> element (root is <{root.tag}>)")
        root = inner

    journal_meta = root.find("front/journal-meta")
    issn = eissn = ""
    title = ""
    if journal_meta is not None:
        for issn_el in journal_meta.findall("issn"):
            kind = (issn_el.get("pub-type") or issn_el.get("publication-format") or "").lower()
            value = _collapse(issn_el.text or "")
            if not value:
                continue
            if kind in ("ppub", "print"):
                issn = issn or value
            elif kind in ("epub", "electronic"):
                eissn = eissn or value
            else:
                issn = issn or value
        title_el = journal_meta.find("journal-title-group/journal-title")
        if title_el is None:
            title_el = journal_meta.find("journal-title")
        title = _text(title_el)

    article_meta = root.find("front/article-meta")
    article_id = ""
    if article_meta is not None:
        by_type = {
            (el.get("pub-id-type") or "").lower(): _collapse(el.text or "")
            for el in article_meta.findall("article-id")
        }
        article_id = by_type.get("pmc") or by_type.get("pmid") or by_type.get("doi") or ""
        if article_id and article_id.isdigit() and "pmc" in by_type:
            article_id = f"PMC{article_id}"

    abstract_el = article_meta.find("abstract") if article_meta is not None else None
    abstract = _text(abstract_el)

    authors = 0
    if article_meta is not None:
        for group in article_meta.findall("contrib-group"):
            authors += sum(
                1 for c in group.findall("contrib")
                if (c.get("contrib-type") or "author") == "author"
            )

    institutions: set[str] = set()
    affiliations: list[tuple[str, str | None]] = []
    if article_meta is not None:
        aff_nodes = article_meta.findall(".//aff")
        for aff in aff_nodes:
            for inst in aff.findall(".//institution"):
                name = _text(inst)
                if name:
                    institutions.add(name)
            country_el = aff.find(".//country")
            tag_value = None
            if country_el is not None:
                tag_value = country_el.get("country") or _text(country_el)
            affiliations.append((_text(aff), tag_value or None))

    keywords = []
    if article_meta is not None:
        for kwd in article_meta.findall(".//kwd-group/kwd"):
            word = _text(kwd)
            if word:
                keywords.append(word)

    return ArticleRecord(
        article_id=article_id,
        journal_issn=issn,
        journal_eissn=eissn,
        journal_title=title,
        pub_year=_find_year(article_meta),
        article_type=root.get("article-type") or "",
        abstract_text=abstract,
        author_count=authors,
        institutions=frozenset(institutions),
        countries=extract_countries(affiliations),
        keywords=tuple(keywords),
    )


@dataclass(frozen=True)
class ParseReport:
    """Per-file outcome from a corpus walk: a record or an error, never both."""

    path: str
    record: ArticleRecord | None
    error: str | None


def stream_corpus(root_path):
    """Yield a ParseReport for every .xml/.nxml under root, lexicographic by
    path. Parse failures are reported in-stream and never abort the walk."""
    root = Path(root_path)
    if not root.is_dir():
        raise RootNotFound(f"corpus root is not a directory: {root}")
    files = sorted(
        p for p in root.rglob("*")
        if p.is_file() and p.suffix.lower() in (".xml", ".nxml")
    )
    for path in files:
        try:
            record = parse_article(path.read_bytes())
        except Exception as exc:  # typed errors and surprises both reported
            yield ParseReport(str(path), None, f"{type(exc).__name__}: {exc}")
        else:
            yield ParseReport(str(path), record, None)


_FIELD_ORDER = (
    "article_id", "journal_issn", "journal_eissn", "journal_title",
    "pub_year", "article_type", "abstract_text", "author_count",
    "institutions", "countries", "keywords",
)


def record_to_dict(record: ArticleRecord) -> dict:
    out = {}
    for name in _FIELD_ORDER:
        value = getattr(record, name)
        if isinstance(value, frozenset):
            value = sorted(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[name] = value
    return out


def record_from_dict(data: dict) -> ArticleRecord:
    return ArticleRecord(
        article_id=data["article_id"],
        journal_issn=data["journal_issn"],
        journal_eissn=data["journal_eissn"],
        journal_title=data["journal_title"],
        pub_year=int(data["pub_year"]),
        article_type=data["article_type"],
        abstract_text=data["abstract_text"],
        author_count=int(data["author_count"]),
        institutions=frozenset(data["institutions"]),
        countries=frozenset(data["countries"]),
        keywords=tuple(data["keywords"]),
    )


def write_records(records, path) -> None:
    """One JSON object per line, UTF-8, keys in a stable order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_dict(record), ensure_ascii=False))
            fh.write("\n")


def read_records(path) -> list[ArticleRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(record_from_dict(json.loads(line)))
    return out
