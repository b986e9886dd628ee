"""Trial data ingestion and the five-model analysis of a single endpoint.

Input files are delimited text with a ``subject_id,arm,outcome`` header; an
empty outcome cell means missing.  A schema (TOML or JSON) names the ordered
category labels and may map raw arm codes onto the two compared arms, which
is how a pairwise comparison is extracted from a multi-arm trial.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .diagnostics import summarize
from .errors import (
    ConfigError,
    DomainError,
    DuplicateSubject,
    EmptyAfterFilter,
    OrdsimError,
    ParseError,
)
from .ordcore import OrdinalCounts, dichotomize
from .posterior import MODEL_LABELS, ModelSpec
from .sampler import SamplerConfig, run_model

try:  # Python 3.11+
    import tomllib as _toml
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as _toml

__all__ = [
    "TrialSchema",
    "TrialDataset",
    "CutpointSummary",
    "ModelResult",
    "CaseAnalysisResult",
    "load_schema",
    "load_trial",
    "complete_cases",
    "analyze_case",
    "write_case_outputs",
    "synthetic_ascot_bundle",
    "SPARSE_THRESHOLD",
]

SPARSE_THRESHOLD = 5
REQUIRED_COLUMNS = ("subject_id", "arm", "outcome")


@dataclass(frozen=True)
class TrialSchema:
    """Ordered category labels plus an optional raw-arm-code filter.

    ``arm_map`` maps raw arm codes to 0 (control) or 1 (treatment); rows whose
    arm code is absent from the map are dropped at load time.
    """

    labels: tuple
    name: str = "outcome"
    arm_map: Optional[dict] = None

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))
        if len(self.labels) < 2:
            raise ConfigError("a schema needs at least 2 category labels")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError("category labels must be distinct")
        if self.arm_map is not None:
            amap = {str(k): int(v) for k, v in dict(self.arm_map).items()}
            if set(amap.values()) != {0, 1}:
                raise ConfigError("arm_map must send at least one code to each of 0 and 1")
            object.__setattr__(self, "arm_map", amap)

    @property
    def j(self) -> int:
        return len(self.labels)

    @classmethod
    def default(cls, j: int) -> "TrialSchema":
        return cls(tuple(str(i) for i in range(1, j + 1)))

    def to_dict(self) -> dict:
        d = {"name": self.name, "labels": list(self.labels)}
        if self.arm_map is not None:
            d["arm_map"] = dict(self.arm_map)
        return d


def load_schema(path) -> TrialSchema:
    """Read a schema document (``.toml`` or ``.json``)."""
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"schema file not found: {p}")
    raw = p.read_bytes()
    try:
        if p.suffix.lower() == ".json":
            doc = json.loads(raw.decode("utf-8"))
        else:
            doc = _toml.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{p}: cannot parse schema: {exc}") from None
    unknown = set(doc) - {"name", "labels", "arm_map"}
    if unknown:
        raise ConfigError(f"{p}: unknown schema keys {sorted(unknown)}")
    if "labels" not in doc:
        raise ConfigError(f"{p}: schema needs a 'labels' list")
    return TrialSchema(tuple(doc["labels"]), doc.get("name", p.stem), doc.get("arm_map"))


@dataclass(frozen=True)
class TrialDataset:
    """Subject-level rows; ``outcome`` holds categories 1..j with 0 for missing."""

    subject_ids: tuple
    arm: np.ndarray
    outcome: np.ndarray
    schema: TrialSchema

    def __post_init__(self):
        arm = np.asarray(self.arm, dtype=np.int64)
        out = np.asarray(self.outcome, dtype=np.int64)
        if not (len(self.subject_ids) == arm.size == out.size):
            raise ValueError("subject_ids, arm and outcome must have equal length")
        if len(set(self.subject_ids)) != len(self.subject_ids):
            raise DuplicateSubject("subject ids are not unique")
        if np.any((arm != 0) & (arm != 1)):
            raise DomainError("arm must be 0 or 1")
        if np.any((out < 0) | (out > self.schema.j)):
            raise DomainError(f"outcome outside 1..{self.schema.j}")
        arm.setflags(write=False)
        out.setflags(write=False)
        object.__setattr__(self, "arm", arm)
        object.__setattr__(self, "outcome", out)

    @property
    def j(self) -> int:
        return self.schema.j

    @property
    def missing(self) -> np.ndarray:
        return self.outcome == 0

    def __len__(self) -> int:
        return len(self.subject_ids)

    def counts(self) -> OrdinalCounts:
        """Arm x category table over rows with an observed outcome."""
        c = np.zeros((2, self.j), dtype=np.int64)
        obs = ~self.missing
        np.add.at(c, (self.arm[obs], self.outcome[obs] - 1), 1)
        return OrdinalCounts(c)


def _sniff_delimiter(header: str) -> str:
    if "\t" in header and "," not in header:
        return "\t"
    return ","


def load_trial(path, schema: Optional[TrialSchema] = None) -> TrialDataset:
    """Parse and validate a delimited trial file.

    Without a schema, categories are taken as 1..max(outcome).
    """
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8-sig")
    except FileNotFoundError:
        raise FileNotFoundError(f"data file not found: {p}") from None
    except UnicodeDecodeError as exc:
        raise ParseError(f"{p}: not valid UTF-8 ({exc})") from None
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise ParseError(f"{p}: missing header line")
    delim = _sniff_delimiter(lines[0])
    reader = csv.reader(io.StringIO(text), delimiter=delim)
    header = [h.strip() for h in next(reader)]
    missing_cols = [c for c in REQUIRED_COLUMNS if c not in header]
    if missing_cols:
        raise ParseError(f"{p}: header lacks column(s) {', '.join(missing_cols)}")
    pos = {c: header.index(c) for c in REQUIRED_COLUMNS}

    ids, arms, outs = [], [], []
    seen: dict = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"{p}: line {lineno}: expected {len(header)} fields, got {len(row)}")
        sid = row[pos["subject_id"]].strip()
        if not sid:
            raise ParseError(f"{p}: line {lineno}, column 'subject_id': empty subject id")
        raw_arm = row[pos["arm"]].strip()
        if schema is not None and schema.arm_map is not None:
            if raw_arm not in schema.arm_map:
                continue
            arm = schema.arm_map[raw_arm]
        else:
            if raw_arm not in ("0", "1"):
                raise DomainError(f"{p}: line {lineno}, column 'arm': {raw_arm!r} is not 0 or 1")
            arm = int(raw_arm)
        if sid in seen:
            raise DuplicateSubject(f"{p}: line {lineno}: subject {sid!r} already seen on line {seen[sid]}")
        seen[sid] = lineno
        cell = row[pos["outcome"]].strip()
        if cell == "":
            y = 0
        else:
            try:
                y = int(cell)
            except ValueError:
                raise ParseError(f"{p}: line {lineno}, column 'outcome': {cell!r} is not an integer") from None
            top = schema.j if schema is not None else None
            if y < 1 or (top is not None and y > top):
                rng = f"1..{top}" if top is not None else ">= 1"
                raise DomainError(f"{p}: line {lineno}, column 'outcome': {y} outside {rng}")
        ids.append(sid)
        arms.append(arm)
        outs.append(y)
    if schema is None:
        schema = TrialSchema.default(max(max(outs, default=0), 2))
    return TrialDataset(tuple(ids), np.array(arms, dtype=np.int64),
                        np.array(outs, dtype=np.int64), schema)


def complete_cases(d: TrialDataset) -> tuple:
    """Drop rows with a missing outcome; returns ``(dataset, n_dropped)``."""
    keep = ~d.missing
    n_drop = int((~keep).sum())
    if not keep.any():
        raise EmptyAfterFilter("no rows with an observed outcome")
    if n_drop == 0:
        return d, 0
    ids = tuple(s for s, k in zip(d.subject_ids, keep) if k)
    return TrialDataset(ids, d.arm[keep], d.outcome[keep], d.schema), n_drop


# ---------------------------------------------------------------------------
# analysis

@dataclass(frozen=True)
class CutpointSummary:
    cutpoint: int
    median: float
    ci_low: float
    ci_high: float
    rhat: float
    ess_bulk: float
    ess_tail: float
    prior_dominated: bool = False


@dataclass
class ModelResult:
    model: str
    cutpoints: list = field(default_factory=list)
    diagnostics: Optional[dict] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def degraded(self) -> bool:
        return bool(self.diagnostics and self.diagnostics.get("degraded"))


@dataclass
class CaseAnalysisResult:
    name: str
    labels: tuple
    counts: OrdinalCounts
    n_dropped: int
    sparse: list
    models: dict

    @property
    def j(self) -> int:
        return self.counts.j

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "labels": list(self.labels),
            "counts": self.counts.counts.tolist(),
            "n_dropped": self.n_dropped,
            "sparse_categories": self.sparse,
            "models": {
                lab: {
                    "status": "ok" if r.ok else "failed",
                    "error": r.error,
                    "diagnostics": r.diagnostics,
                    "cutpoints": [vars(c) for c in r.cutpoints],
                }
                for lab, r in self.models.items()
            },
        }

    def table_rows(self) -> list:
        """One row per model and cut-point, in model order."""
        rows = []
        for lab, r in self.models.items():
            if not r.ok:
                rows.append({"model": lab, "cutpoint": None, "status": "failed", "error": r.error})
                continue
            for c in r.cutpoints:
                rows.append({
                    "model": lab, "cutpoint": c.cutpoint, "median": c.median,
                    "ci_low": c.ci_low, "ci_high": c.ci_high, "rhat": c.rhat,
                    "ess_bulk": c.ess_bulk, "ess_tail": c.ess_tail,
                    "n_divergent": r.diagnostics["n_divergent"],
                    "prior_dominated": c.prior_dominated, "status": "ok",
                })
        return rows


def sparse_categories(counts: OrdinalCounts, labels: Sequence[str],
                      threshold: int = SPARSE_THRESHOLD) -> list:
    """Categories with fewer than ``threshold`` observations in either arm."""
    out = []
    c = counts.counts
    for i in range(counts.j):
        if c[0, i] < threshold or c[1, i] < threshold:
            out.append({"category": i + 1, "label": labels[i],
                        "control": int(c[0, i]), "treatment": int(c[1, i])})
    return out


def _prior_dominated(counts: OrdinalCounts, k: int) -> bool:
    d = dichotomize(counts, k).counts
    return bool(np.any(d == 0))


def _fit_one(spec: ModelSpec, counts: OrdinalCounts, cfg: SamplerConfig) -> ModelResult:
    try:
        fit = run_model(spec, counts, cfg)
    except OrdsimError as exc:
        return ModelResult(spec.label, error=f"{type(exc).__name__}: {exc}")
    diag = fit.diagnostics
    info = diag.summary()
    info.update({"degraded": diag.degraded, "escalated": diag.escalated,
                 "n_boundary": diag.n_boundary, "ess_threshold": diag.ess_threshold,
                 "attempts": [list(a) for a in diag.attempts]})
    cuts = []
    for i, k in enumerate(fit.draws.cutpoints):
        s = summarize(fit.draws.theta[:, :, i])
        pd = spec.kind == "sep-logistic" and _prior_dominated(counts, int(k))
        cuts.append(CutpointSummary(int(k), s.median, s.ci_low, s.ci_high, float(diag.rhat[i]),
                                    float(diag.ess_bulk[i]), float(diag.ess_tail[i]), pd))
    return ModelResult(spec.label, cuts, info)


def analyze_case(d: TrialDataset, cfg: SamplerConfig, models: Sequence[str] = MODEL_LABELS,
                 sparse_threshold: int = SPARSE_THRESHOLD, jobs: int = 1,
                 prior_sd_effect: float = 100.0, prior_sd_increment: float = 100.0) -> CaseAnalysisResult:
    """Fit every requested model to the complete cases of ``d``.

    Each model sees the same tabulated counts and the same sampler settings,
    so a model's result equals a direct ``run_model`` call on those counts.
    A failing model is reported with its error and does not stop the others.
    """
    cc, n_drop = complete_cases(d)
    counts = cc.counts()
    if d.j < 3 and any(m != "sep-logistic" for m in models):
        raise ValueError("only sep-logistic is defined for j = 2; other models need j >= 3")
    if (counts.arm_totals == 0).any():
        raise EmptyAfterFilter("each arm needs at least one complete case")
    specs = [ModelSpec.from_label(m, d.j, prior_sd_effect=prior_sd_effect,
                                  prior_sd_increment=prior_sd_increment) for m in models]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda s: _fit_one(s, counts, cfg), specs))
    else:
        results = [_fit_one(s, counts, cfg) for s in specs]
    return CaseAnalysisResult(
        name=d.schema.name, labels=d.schema.labels, counts=counts, n_dropped=n_drop,
        sparse=sparse_categories(counts, d.schema.labels, sparse_threshold),
        models={r.model: r for r in results},
    )


# ---------------------------------------------------------------------------
# outputs

CASE_CSV_HEADER = ("endpoint", "model", "cutpoint", "median", "ci_low", "ci_high", "rhat",
                   "ess_bulk", "ess_tail", "n_divergent", "prior_dominated", "status")


def _g6(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (str, bool, int)):
        return str(x)
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.6g}"


def case_csv_text(res: CaseAnalysisResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CASE_CSV_HEADER)
    for row in res.table_rows():
        w.writerow([res.name] + [_g6(row.get(h)) for h in CASE_CSV_HEADER[1:]])
    return buf.getvalue()


def write_case_outputs(res: CaseAnalysisResult, out_dir) -> tuple:
    """Write ``<name>.json`` and ``<name>.csv``; returns both paths."""
    from .simstudy import atomic_write

    out = Path(out_dir)
    jpath = out / f"{res.name}.json"
    cpath = out / f"{res.name}.csv"
    atomic_write(jpath, json.dumps(res.to_dict(), indent=2, allow_nan=True) + "\n")
    atomic_write(cpath, case_csv_text(res))
    return jpath, cpath


# ---------------------------------------------------------------------------
# synthetic case-study bundle

def _free_days_probs(j: int, empty: Sequence[int]) -> np.ndarray:
    """Days-free style scale: mass at the floor and ceiling, a thin middle."""
    p = np.full(j, 0.004)
    p[0] = 0.08
    p[-1] = 0.55
    p[-2] = 0.10
    p[-3] = 0.05
    p[np.asarray(empty, dtype=int)] = 0.0
    return p / p.sum()


def _bundle_specs() -> list:
    who = np.array([0.02, 0.03, 0.04, 0.06, 0.10, 0.25, 0.30, 0.20])
    mmrc = np.array([0.35, 0.30, 0.20, 0.10, 0.05])
    days_a = _free_days_probs(29, empty=[3, 5, 8, 11, 14, 17, 19])
    days_b = _free_days_probs(29, empty=[2, 6, 9, 12, 13, 16, 20, 22])
    return [
        ("who8", tuple(f"WHO {i}" for i in range(1, 9)), who, math.log(1.25)),
        ("mmrc5", tuple(f"mMRC {i}" for i in range(5)), mmrc, math.log(1.15)),
        ("free_days_a", tuple(f"{d} days" for d in range(29)), days_a, math.log(1.1)),
        ("free_days_b", tuple(f"{d} days" for d in range(29)), days_b, math.log(1.1)),
    ]


def synthetic_ascot_bundle(out_dir, seed: int = 2021, n_per_arm: int = 150,
                           missing_rate: float = 0.03) -> list:
    """Write four synthetic endpoints shaped like a COVID-19 trial's secondary outcomes.

    Each endpoint gets ``<name>.csv`` (three raw arms: low, intermediate, high)
    and ``<name>.toml`` whose ``arm_map`` extracts low vs intermediate.  The
    two 29-point scales contain categories with no observations.  Returns the
    list of ``(data_path, schema_path)``.
    """
    from .ordcore import cumlogits_from_probs, probs_from_cumlogits

    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, labels, p0, log_or in _bundle_specs():
        j = len(labels)
        pos = np.flatnonzero(p0 > 0)
        eta = cumlogits_from_probs(p0[pos]) + log_or
        p1 = np.zeros(j)
        p1[pos] = probs_from_cumlogits(eta)
        rows = []
        sid = 0
        for code, probs in (("low", p0), ("intermediate", p1), ("high", p1)):
            ys = rng.choice(j, size=n_per_arm, p=probs) + 1
            miss = rng.random(n_per_arm) < missing_rate
            for y, m in zip(ys, miss):
                sid += 1
                rows.append((f"S{sid:05d}", code, "" if m else str(int(y))))
        order = rng.permutation(len(rows))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REQUIRED_COLUMNS)
        for i in order:
            w.writerow(rows[i])
        dpath = out / f"{name}.csv"
        dpath.write_text(buf.getvalue(), encoding="utf-8")
        spath = out / f"{name}.toml"
        lab_txt = ", ".join(json.dumps(lab) for lab in labels)
        spath.write_text(
            f'name = "{name}"\nlabels = [{lab_txt}]\n\n[arm_map]\nlow = 0\nintermediate = 1\n',
            encoding="utf-8")
        written.append((dpath, spath))
    return written
