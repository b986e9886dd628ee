"""Tidy tables and static SVG plots of simulation metrics and case results.

SVG is written as plain text with fixed number formatting and no timestamps,
so identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import io
import json
import math
from html import escape
from pathlib import Path
from typing import Iterable, Sequence

from .errors import MissingColumns, UnknownKind
from .posterior import MODEL_LABELS
from .simstudy import AGGREGATE_HEADER

__all__ = [
    "METRIC_KINDS",
    "KINDS",
    "tidy_metric_rows",
    "tidy_forest_rows",
    "emit_csv",
    "parse_csv",
    "metric_svg",
    "forest_svg",
    "load_aggregate",
    "load_case_results",
    "render_report",
]

METRIC_KINDS = {
    "bias": ("bias", "bias_mcse", 0.0, "Bias (log-OR)"),
    "relbias": ("relbias_pct", "relbias_mcse", 0.0, "Relative bias (%)"),
    "coverage": ("coverage", "coverage_mcse", 0.95, "95% CrI coverage"),
    "mse": ("mse", "mse_mcse", None, "MSE (log-OR)"),
}
KINDS = tuple(METRIC_KINDS) + ("forest",)
TIDY_METRIC_COLUMNS = ("scenario_id", "model", "cutpoint", "metric", "value", "mcse", "n_effective_reps")
TIDY_FOREST_COLUMNS = ("endpoint", "model", "cutpoint", "median", "ci_low", "ci_high", "status")


def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return str(x)
    if isinstance(x, int):
        return str(x)
    x = float(x)
    return "nan" if math.isnan(x) else f"{x:.6g}"


def _parse_cell(col: str, v: str):
    if col in ("scenario_id", "model", "metric", "endpoint", "status"):
        return v
    if v == "":
        return None
    if col in ("cutpoint", "n_effective_reps"):
        return int(v)
    return float(v)


# ---------------------------------------------------------------------------
# inputs

def load_aggregate(path) -> list:
    """Rows of an aggregate file (or the one inside a run directory)."""
    p = Path(path)
    if p.is_dir():
        p = p / "aggregate.csv"
    if not p.is_file():
        raise FileNotFoundError(f"aggregate file not found: {p}")
    with open(p, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        missing = [c for c in AGGREGATE_HEADER if c not in cols]
        if missing:
            raise MissingColumns(f"{p}: missing column(s) {', '.join(missing)}")
        return [{k: _parse_cell(k if k in TIDY_METRIC_COLUMNS else "value", row[k])
                 for k in AGGREGATE_HEADER} for row in reader]


def load_case_results(path) -> list:
    """Case-analysis JSON documents from a file or every ``*.json`` in a directory."""
    p = Path(path)
    files = sorted(p.glob("*.json")) if p.is_dir() else [p]
    if not files or not all(f.is_file() for f in files):
        raise FileNotFoundError(f"no case result files at {p}")
    docs = []
    for f in files:
        doc = json.loads(f.read_text(encoding="utf-8"))
        if "models" not in doc or "name" not in doc:
            raise MissingColumns(f"{f}: not a case result (needs 'name' and 'models')")
        docs.append(doc)
    return docs


# ---------------------------------------------------------------------------
# tidy tables

def tidy_metric_rows(agg_rows: Iterable[dict], kind: str) -> list:
    if kind not in METRIC_KINDS:
        raise UnknownKind(f"unknown metric kind {kind!r}; choose from {', '.join(METRIC_KINDS)}")
    col, mcol, _, _ = METRIC_KINDS[kind]
    return [
        {"scenario_id": r["scenario_id"], "model": r["model"], "cutpoint": r["cutpoint"],
         "metric": col, "value": r[col], "mcse": r[mcol], "n_effective_reps": r["n_effective_reps"]}
        for r in agg_rows
    ]


def tidy_forest_rows(docs: Iterable[dict]) -> list:
    rows = []
    for doc in docs:
        for model, res in doc["models"].items():
            if res.get("status") != "ok":
                rows.append({"endpoint": doc["name"], "model": model, "cutpoint": None,
                             "median": None, "ci_low": None, "ci_high": None, "status": "failed"})
                continue
            for c in res["cutpoints"]:
                rows.append({"endpoint": doc["name"], "model": model, "cutpoint": c["cutpoint"],
                             "median": c["median"], "ci_low": c["ci_low"], "ci_high": c["ci_high"],
                             "status": "ok"})
    return rows


def emit_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([r[c] if isinstance(r[c], str) else _num(r[c]) for c in columns])
    return buf.getvalue()


def parse_csv(text: str) -> list:
    reader = csv.DictReader(io.StringIO(text))
    return [{k: _parse_cell(k, v) for k, v in row.items()} for row in reader]


# ---------------------------------------------------------------------------
# SVG primitives

class _Svg:
    def __init__(self, width: float, height: float):
        self.w, self.h = width, height
        self.parts: list = []

    def add(self, s: str):
        self.parts.append(s)

    def line(self, x1, y1, x2, y2, stroke="#000", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.add(f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                 f'stroke="{stroke}" stroke-width="{width:g}"{d}/>')

    def rect(self, x, y, w, h, fill="none", stroke="none", opacity=1.0):
        self.add(f'<rect x="{x:.2f}" y="{y:.2f}" width="{w:.2f}" height="{h:.2f}" fill="{fill}" '
                 f'stroke="{stroke}" fill-opacity="{opacity:g}"/>')

    def circle(self, x, y, r=3.0, fill="#000"):
        self.add(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r:g}" fill="{fill}"/>')

    def text(self, x, y, s, size=11, anchor="start", weight="normal"):
        self.add(f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" text-anchor="{anchor}" '
                 f'font-weight="{weight}" font-family="sans-serif">{escape(str(s))}</text>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w:.0f}" height="{self.h:.0f}" '
                f'viewBox="0 0 {self.w:.0f} {self.h:.0f}">')
        body = "\n".join(self.parts)
        return f'<?xml version="1.0" encoding="UTF-8"?>\n{head}\n<rect width="100%" height="100%" fill="#fff"/>\n{body}\n</svg>\n'


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list:
    if not (math.isfinite(lo) and math.isfinite(hi)) or hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-12 * step:
        out.append(round(v, 12))
        v += step
    return out


def _order_models(models: Iterable[str]) -> list:
    ms = sorted(set(models), key=lambda m: (MODEL_LABELS.index(m) if m in MODEL_LABELS else 99, m))
    return ms


# ---------------------------------------------------------------------------
# plots

def metric_svg(rows: Sequence[dict], kind: str, title: str = "") -> str:
    """Metric against cut-point, one panel per model, with +-2 MCSE bars.

    Coverage panels carry the 0.95 line and a shaded band of 0.95 +- 2
    binomial MCSE; bias-type panels carry a zero line.
    """
    if kind not in METRIC_KINDS:
        raise UnknownKind(f"unknown metric kind {kind!r}")
    col, mcol, ref, ylab = METRIC_KINDS[kind]
    models = _order_models(r["model"] for r in rows)
    cuts = sorted({r["cutpoint"] for r in rows})
    vals = []
    for r in rows:
        v, m = r[col], r[mcol]
        if v is None or not math.isfinite(v):
            continue
        e = 2.0 * m if (m is not None and math.isfinite(m)) else 0.0
        vals.extend([v - e, v + e])
    n_eff = [r["n_effective_reps"] for r in rows if r["n_effective_reps"]]
    band = None
    if kind == "coverage" and n_eff:
        half = 2.0 * math.sqrt(0.95 * 0.05 / min(n_eff))
        band = (0.95 - half, 0.95 + half)
        vals.extend(band)
    if ref is not None:
        vals.append(ref)
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.08 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    pw, ph, ml, mt, gap = 200.0, 180.0, 60.0, 50.0, 20.0
    width = ml + len(models) * (pw + gap) + 10
    height = mt + ph + 60
    svg = _Svg(width, height)
    svg.text(width / 2, 20, title or ylab, size=14, anchor="middle", weight="bold")
    xs = {k: i for i, k in enumerate(cuts)}
    span = max(len(cuts) - 1, 1)

    def ymap(v):
        return mt + ph - (v - lo) / (hi - lo) * ph

    for pi, model in enumerate(models):
        x0 = ml + pi * (pw + gap)

        def xmap(k):
            return x0 + 15 + xs[k] / span * (pw - 30) if len(cuts) > 1 else x0 + pw / 2

        svg.rect(x0, mt, pw, ph, stroke="#888")
        svg.text(x0 + pw / 2, mt - 8, model, size=12, anchor="middle", weight="bold")
        if band is not None:
            svg.rect(x0, ymap(band[1]), pw, ymap(band[0]) - ymap(band[1]), fill="#9ecae1", opacity=0.4)
        if ref is not None:
            svg.line(x0, ymap(ref), x0 + pw, ymap(ref), stroke="#c00", dash="4,3")
        if pi == 0:
            for t in _nice_ticks(lo, hi):
                svg.line(x0 - 4, ymap(t), x0, ymap(t))
                svg.text(x0 - 6, ymap(t) + 4, f"{t:g}", size=10, anchor="end")
        for k in cuts:
            svg.text(xmap(k), mt + ph + 15, k, size=10, anchor="middle")
        for r in rows:
            if r["model"] != model or r[col] is None or not math.isfinite(r[col]):
                continue
            x, v, m = xmap(r["cutpoint"]), r[col], r[mcol]
            if m is not None and math.isfinite(m) and m > 0:
                svg.line(x, ymap(v - 2 * m), x, ymap(v + 2 * m), stroke="#333")
            svg.circle(x, ymap(v), 3.0, fill="#08519c")
    svg.text(ml + (width - ml) / 2, height - 15, "cut-point k", size=12, anchor="middle")
    svg.add(f'<text x="15" y="{mt + ph / 2:.2f}" font-size="12" font-family="sans-serif" '
            f'text-anchor="middle" transform="rotate(-90 15 {mt + ph / 2:.2f})">{escape(ylab)}</text>')
    return svg.render()


def forest_svg(doc: dict) -> str:
    """Per-cut-point posterior median and 95% interval, one track per model."""
    models = _order_models(doc["models"])
    pts = []
    for m in models:
        res = doc["models"][m]
        if res.get("status") == "ok":
            pts.extend((m, c) for c in res["cutpoints"])
    cuts = sorted({c["cutpoint"] for _, c in pts})
    finite = [v for _, c in pts for v in (c["ci_low"], c["ci_high"]) if v is not None and math.isfinite(v)]
    lo, hi = (min(finite + [0.0]), max(finite + [0.0])) if finite else (-1.0, 1.0)
    # very diffuse intervals would flatten everything else; clip the axis
    lo, hi = max(lo, -5.0), min(hi, 5.0)
    pad = 0.05 * (hi - lo if hi > lo else 1.0)
    lo, hi = lo - pad, hi + pad

    tw, row_h, ml, mt, gap = 180.0, 14.0, 90.0, 50.0, 16.0
    height = mt + len(cuts) * row_h + 50
    width = ml + len(models) * (tw + gap) + 10
    svg = _Svg(width, height)
    svg.text(width / 2, 20, f"{doc['name']}: posterior median and 95% CrI of cut-point log-OR",
             size=13, anchor="middle", weight="bold")
    yk = {k: mt + (i + 0.5) * row_h for i, k in enumerate(cuts)}
    for k in cuts:
        svg.text(ml - 8, yk[k] + 4, f"k={k}", size=10, anchor="end")
    for ti, m in enumerate(models):
        x0 = ml + ti * (tw + gap)

        def xmap(v):
            return x0 + (min(max(v, lo), hi) - lo) / (hi - lo) * tw

        svg.rect(x0, mt, tw, len(cuts) * row_h, stroke="#888")
        svg.text(x0 + tw / 2, mt - 8, m, size=12, anchor="middle", weight="bold")
        svg.line(xmap(0.0), mt, xmap(0.0), mt + len(cuts) * row_h, stroke="#c00", dash="4,3")
        for t in _nice_ticks(lo, hi, 4):
            svg.text(xmap(t), mt + len(cuts) * row_h + 14, f"{t:g}", size=9, anchor="middle")
        res = doc["models"][m]
        if res.get("status") != "ok":
            svg.text(x0 + tw / 2, mt + 20, "fit failed", size=11, anchor="middle")
            continue
        for c in res["cutpoints"]:
            y = yk[c["cutpoint"]]
            svg.line(xmap(c["ci_low"]), y, xmap(c["ci_high"]), y, stroke="#333")
            fill = "#999" if c.get("prior_dominated") else "#08519c"
            svg.circle(xmap(c["median"]), y, 2.5, fill=fill)
    svg.text(ml + (width - ml) / 2, height - 10, "log-OR", size=12, anchor="middle")
    return svg.render()


# ---------------------------------------------------------------------------
# driver

def render_report(path, kind: str, fmt: str, out_dir) -> list:
    """Write the requested report files; returns their paths."""
    from .simstudy import atomic_write

    if kind not in KINDS:
        raise UnknownKind(f"unknown report kind {kind!r}; choose from {', '.join(KINDS)}")
    if fmt not in ("csv", "svg"):
        raise UnknownKind(f"unknown format {fmt!r}; choose csv or svg")
    out = Path(out_dir)
    written = []
    if kind == "forest":
        docs = load_case_results(path)
        if fmt == "csv":
            p = out / "forest.csv"
            atomic_write(p, emit_csv(tidy_forest_rows(docs), TIDY_FOREST_COLUMNS))
            return [p]
        for doc in docs:
            p = out / f"forest_{doc['name']}.svg"
            atomic_write(p, forest_svg(doc))
            written.append(p)
        return written
    agg = load_aggregate(path)
    if fmt == "csv":
        p = out / f"{kind}.csv"
        atomic_write(p, emit_csv(tidy_metric_rows(agg, kind), TIDY_METRIC_COLUMNS))
        return [p]
    by_sid: dict = {}
    for r in agg:
        by_sid.setdefault(r["scenario_id"], []).append(r)
    for sid in sorted(by_sid):
        p = out / f"{kind}_{sid}.svg"
        atomic_write(p, metric_svg(by_sid[sid], kind, title=f"{METRIC_KINDS[kind][3]} - scenario {sid}"))
        written.append(p)
    return written
