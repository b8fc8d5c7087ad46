"""Single-file TOML configuration for the pipeline.

One config file drives every stage so a run is reproducible from (inputs,
config, prompt assets) alone. The API key is the only setting taken from
the environment.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import UsageError


@dataclass
class BibSourceConfig:
    name: str
    path: str
    columns: dict
    default_year: Optional[int] = None


@dataclass
class Config:
    # [paths]
    corpus_dir: str = ""
    out_dir: str = "out"
    cache_dir: str = ""
    records_path: str = ""
    # [endpoint]
    base_url: str = ""
    model: str = ""
    max_inflight: int = 4
    timeout: float = 60.0
    max_attempts: int = 5
    # [bib]
    bib_sources: list = field(default_factory=list)
    # [join]
    target_years: list = field(default_factory=lambda: [2019, 2023])
    lags: list = field(default_factory=lambda: [1, 2, 3])
    # [fit]
    fit_targets: list = field(default_factory=lambda: ["impact_factor"])
    fit_covariates: list = field(default_factory=list)
    zscore: bool = False
    significant_only: bool = False
    # [agree]
    human_eval_path: str = ""
    design_path: str = ""
    # [describe]
    top_k: int = 20

    raw_bytes: bytes = b""

    def config_hash(self) -> str:
        return hashlib.sha256(self.raw_bytes).hexdigest()

    def resolve(self, rel: str) -> str:
        """Paths in the config are relative to the config file's directory."""
        base = Path(self.config_dir) if getattr(self, "config_dir", "") else Path(".")
        p = Path(rel)
        return str(p if p.is_absolute() else base / p)


def _expect(table: dict, key: str, kind, where: str):
    value = table.get(key)
    if value is not None and not isinstance(value, kind):
        raise UsageError(f"config: {where}.{key} has the wrong type")
    return value


def load_config(path) -> Config:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    raw = p.read_bytes()
    try:
        data = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise UsageError(f"config file does not parse: {exc}") from exc

    cfg = Config(raw_bytes=raw)
    cfg.config_dir = str(p.parent)

    paths = data.get("paths", {})
    cfg.corpus_dir = _expect(paths, "corpus_dir", str, "paths") or ""
    cfg.out_dir = _expect(paths, "out_dir", str, "paths") or "out"
    cfg.cache_dir = _expect(paths, "cache_dir", str, "paths") or ""
    cfg.records_path = _expect(paths, "records", str, "paths") or ""

    ep = data.get("endpoint", {})
    cfg.base_url = _expect(ep, "base_url", str, "endpoint") or ""
    cfg.model = _expect(ep, "model", str, "endpoint") or ""
    cfg.max_inflight = _expect(ep, "max_inflight", int, "endpoint") or 4
    cfg.timeout = float(ep.get("timeout", 60))
    cfg.max_attempts = _expect(ep, "max_attempts", int, "endpoint") or 5

    bib = data.get("bib", {})
    for i, src in enumerate(bib.get("sources", [])):
        name = src.get("name")
        spath = src.get("path")
        columns = src.get("columns")
        if not name or not spath or not isinstance(columns, dict):
            raise UsageError(
                f"config: bib.sources[{i}] needs name, path, and a columns table")
        cfg.bib_sources.append(BibSourceConfig(
            name=name, path=spath, columns=dict(columns),
            default_year=src.get("default_year")))

    join = data.get("join", {})
    if "target_years" in join:
        cfg.target_years = list(join["target_years"])
    if "lags" in join:
        cfg.lags = list(join["lags"])

    fit = data.get("fit", {})
    if "targets" in fit:
        cfg.fit_targets = list(fit["targets"])
    if "covariates" in fit:
        cfg.fit_covariates = list(fit["covariates"])
    cfg.zscore = bool(fit.get("zscore", False))
    cfg.significant_only = bool(fit.get("significant_only", False))

    agree = data.get("agree", {})
    cfg.human_eval_path = _expect(agree, "human_eval", str, "agree") or ""
    cfg.design_path = _expect(agree, "design", str, "agree") or ""

    describe = data.get("describe", {})
    cfg.top_k = int(describe.get("top_k", 20))

    return cfg
