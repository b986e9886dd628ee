"""Simulation grid, replicate execution, persistence and performance metrics.

A scenario is one cell of the grid (sample size, category count, control
shape, proportionality scenario).  Each replicate draws one dataset, fits every
analysis model to it and emits one :class:`MetricRecord` per model and
cut-point.  Records are appended to a per-scenario newline-delimited JSON file
in replicate order, so an interrupted run can resume from the last complete
replicate.  Aggregation is a pure fold over records.
"""
from __future__ import annotations

import csv
import fnmatch
import hashlib
import io
import json
import math
import os
import tempfile
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .diagnostics import summarize
from .dgm import (
    S1,
    S2,
    S3,
    SHAPES,
    ControlShape,
    PropScenario,
    discretize_beta,
    generate_truth,
    standard_scenarios,
    sample_trial,
)
from .errors import EmptyPlan, InsufficientReplicates, OrdsimError
from .posterior import MODEL_LABELS, ModelSpec
from .sampler import SamplerConfig, run_model

__all__ = [
    "GridPlan",
    "ScenarioConfig",
    "MetricRecord",
    "AggregateRow",
    "MCSEResult",
    "METRICS",
    "AGGREGATE_HEADER",
    "build_grid",
    "filter_scenarios",
    "replicate_truth",
    "run_replicate",
    "aggregate",
    "mcse",
    "mcse_for",
    "adapt_nsim",
    "run_grid",
    "load_records",
    "write_aggregate_csv",
    "read_aggregate_csv",
    "fit_success_rate",
]

METRICS = ("bias", "relbias_pct", "coverage", "mse")
AGGREGATE_HEADER = (
    "scenario_id", "model", "cutpoint",
    "bias", "bias_mcse", "relbias_pct", "relbias_mcse",
    "coverage", "coverage_mcse", "mse", "mse_mcse", "n_effective_reps",
)
RELBIAS_MODES = ("mean-ratio", "ratio-of-means")
_MASK64 = 0xFFFFFFFFFFFFFFFF
_DGM_STREAM = 0


# ---------------------------------------------------------------------------
# scenario description

def prop_to_dict(p: PropScenario) -> dict:
    if isinstance(p, S1):
        return {"type": "s1", "mean_logOR": float(p.mean_logOR), "sigma": float(p.sigma)}
    if isinstance(p, S2):
        return {"type": "s2", "zeta": float(p.zeta), "gamma": float(p.gamma)}
    if isinstance(p, S3):
        return {"type": "s3", "top_logOR": float(p.top_logOR)}
    raise TypeError(f"unknown scenario type {type(p).__name__}")


def prop_from_dict(d: dict) -> PropScenario:
    kind = d.get("type")
    if kind == "s1":
        return S1(float(d["mean_logOR"]), float(d["sigma"]))
    if kind == "s2":
        return S2(float(d.get("zeta", S2.zeta)), float(d.get("gamma", S2.gamma)))
    if kind == "s3":
        return S3(float(d["top_logOR"]))
    raise ValueError(f"unknown proportionality scenario {kind!r}")


def prop_label(p: PropScenario) -> str:
    if isinstance(p, S1):
        return f"s1(or={math.exp(p.mean_logOR):.4g},sd={p.sigma:g})"
    if isinstance(p, S2):
        return f"s2(zeta={p.zeta:.4g},gamma={p.gamma:g})"
    return f"s3(or={math.exp(p.top_logOR):.4g})"


def _as_shape(s) -> ControlShape:
    if isinstance(s, ControlShape):
        return s
    try:
        return SHAPES[s]
    except KeyError:
        raise ValueError(f"unknown control shape {s!r}; choose from {sorted(SHAPES)}") from None


def _sampler_dict(cfg: SamplerConfig) -> dict:
    return asdict(cfg)


@dataclass(frozen=True)
class ScenarioConfig:
    """One cell of the simulation grid.

    ``scenario_id`` hashes every field except ``n_sim`` and the sampler seed
    (per-fit seeds are derived from ``seed``), so extending a run to more
    replicates keeps the identity and the seed streams of existing ones.
    """

    n_obs: int
    j: int
    shape: ControlShape
    prop: PropScenario
    n_sim: int = 1000
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    models: tuple = MODEL_LABELS
    seed: int = 0
    prior_sd_effect: float = 100.0
    prior_sd_increment: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "shape", _as_shape(self.shape))
        object.__setattr__(self, "models", tuple(self.models))
        if self.n_sim < 1:
            raise ValueError("n_sim must be at least 1")
        if self.n_obs < 2:
            raise ValueError("n_obs must be at least 2")
        if self.j < 2:
            raise ValueError("j must be at least 2")
        if not self.models:
            raise ValueError("at least one model is required")
        for m in self.models:
            if m not in MODEL_LABELS:
                raise ValueError(f"unknown model {m!r}")
        if self.j < 3 and any(m != "sep-logistic" for m in self.models):
            raise ValueError("only sep-logistic is defined for j = 2")

    def design(self) -> dict:
        smp = _sampler_dict(self.sampler)
        smp.pop("seed")
        return {
            "n_obs": int(self.n_obs),
            "j": int(self.j),
            "shape": {"name": self.shape.name, "a": self.shape.a, "b": self.shape.b},
            "prop": prop_to_dict(self.prop),
            "sampler": smp,
            "models": list(self.models),
            "seed": int(self.seed),
            "prior_sd_effect": float(self.prior_sd_effect),
            "prior_sd_increment": float(self.prior_sd_increment),
        }

    @property
    def scenario_id(self) -> str:
        blob = json.dumps(self.design(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def label(self) -> str:
        return f"n{self.n_obs}-j{self.j}-{self.shape.name}-{prop_label(self.prop)}"

    def model_specs(self) -> list:
        return [ModelSpec.from_label(m, self.j, prior_sd_effect=self.prior_sd_effect,
                                     prior_sd_increment=self.prior_sd_increment)
                for m in self.models]

    def records_per_replicate(self) -> int:
        return len(self.models) * (self.j - 1)

    def to_dict(self) -> dict:
        d = self.design()
        d["sampler"]["seed"] = int(self.sampler.seed)
        d["n_sim"] = int(self.n_sim)
        d["scenario_id"] = self.scenario_id
        d["label"] = self.label
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        sh = d["shape"]
        shape = ControlShape(sh["name"], float(sh["a"]), float(sh["b"]))
        return cls(
            n_obs=int(d["n_obs"]), j=int(d["j"]), shape=shape, prop=prop_from_dict(d["prop"]),
            n_sim=int(d["n_sim"]), sampler=SamplerConfig(**d["sampler"]),
            models=tuple(d["models"]), seed=int(d["seed"]),
            prior_sd_effect=float(d["prior_sd_effect"]),
            prior_sd_increment=float(d["prior_sd_increment"]),
        )


@dataclass(frozen=True)
class GridPlan:
    """Axis values for the scenario grid; the defaults give the full cross product."""

    n_obs: tuple = (1500, 4000, 10000)
    j: tuple = (3, 7, 11)
    shapes: tuple = ("symmetric", "skewed")
    props: tuple = tuple(standard_scenarios())
    n_sim: int = 1000
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    models: tuple = MODEL_LABELS
    seed: int = 0
    prior_sd_effect: float = 100.0
    prior_sd_increment: float = 100.0

    @classmethod
    def scenario1_only(cls, **kw) -> "GridPlan":
        props = tuple(p for p in standard_scenarios() if isinstance(p, S1))
        return cls(props=props, **kw)


def build_grid(plan: GridPlan) -> list:
    """Cross product n_obs x j x shape x proportionality scenario."""
    axes = {"n_obs": plan.n_obs, "j": plan.j, "shapes": plan.shapes, "props": plan.props}
    for name, values in axes.items():
        if len(values) == 0:
            raise EmptyPlan(f"grid axis {name!r} is empty")
    out = []
    for n in plan.n_obs:
        for j in plan.j:
            for shape in plan.shapes:
                for prop in plan.props:
                    out.append(ScenarioConfig(
                        n_obs=int(n), j=int(j), shape=_as_shape(shape), prop=prop,
                        n_sim=plan.n_sim, sampler=plan.sampler, models=tuple(plan.models),
                        seed=plan.seed, prior_sd_effect=plan.prior_sd_effect,
                        prior_sd_increment=plan.prior_sd_increment,
                    ))
    return out


def filter_scenarios(scenarios: Sequence[ScenarioConfig], patterns: Iterable[str]) -> list:
    """Keep scenarios whose id starts with, or whose label glob-matches, any pattern."""
    pats = [p.strip() for p in patterns if p.strip()]
    if not pats:
        return list(scenarios)
    keep = []
    for sc in scenarios:
        sid, lab = sc.scenario_id, sc.label
        if any(sid.startswith(p) or fnmatch.fnmatchcase(lab, p) for p in pats):
            keep.append(sc)
    return keep


# ---------------------------------------------------------------------------
# replicates

def _seed_seq(sc: ScenarioConfig, rep: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(sc.seed) & _MASK64, int(sc.scenario_id, 16), int(rep),
                                   int(stream)])


def _model_stream(label: str) -> int:
    return 1 + zlib.crc32(label.encode())


def _model_seed(sc: ScenarioConfig, rep: int, label: str) -> int:
    hi, lo = _seed_seq(sc, rep, _model_stream(label)).generate_state(2, dtype=np.uint32)
    return (int(hi) << 32) | int(lo)


def rng_fingerprint(sc: ScenarioConfig, rep: int) -> str:
    state = _seed_seq(sc, rep, _DGM_STREAM).generate_state(2, dtype=np.uint32)
    return f"{int(state[0]):08x}{int(state[1]):08x}"


def replicate_truth(sc: ScenarioConfig, rep: int) -> tuple:
    """Regenerate the (TruePair, OrdinalCounts) of one replicate from its seed."""
    rng = np.random.default_rng(_seed_seq(sc, rep, _DGM_STREAM))
    pi0 = discretize_beta(sc.shape, sc.j)
    tp = generate_truth(pi0, sc.prop, rng)
    return tp, sample_trial(tp, sc.n_obs, rng)


@dataclass
class MetricRecord:
    scenario_id: str
    replicate: int
    model: str
    cutpoint: int
    theta_true: Optional[float]
    median: Optional[float]
    ci_low: Optional[float]
    ci_high: Optional[float]
    diagnostics: dict
    refit_escalated: bool
    rng_fingerprint: str
    status: str = "ok"
    failure_reason: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False, separators=(",", ":"), allow_nan=False)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricRecord":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _finite_or_none(x) -> Optional[float]:
    x = float(x)
    return x if math.isfinite(x) else None


def _diag_entry(diag, i: int) -> dict:
    return {
        "rhat": _finite_or_none(diag.rhat[i]),
        "ess_bulk": _finite_or_none(diag.ess_bulk[i]),
        "ess_tail": _finite_or_none(diag.ess_tail[i]),
        "n_divergent": int(diag.n_divergent),
        "max_treedepth_hits": int(diag.max_treedepth_hits),
        "n_boundary": int(diag.n_boundary),
        "n_chains": int(diag.n_chains),
        "converged": bool(diag.converged),
        "attempts": [list(a) for a in diag.attempts],
    }


def _failed(sc, rep, label, theta_true, fp, reason) -> list:
    out = []
    for i, k in enumerate(range(2, sc.j + 1)):
        tt = None if theta_true is None else float(theta_true[i])
        out.append(MetricRecord(sc.scenario_id, rep, label, k, tt, None, None, None, {},
                                False, fp, "failed", reason))
    return out


def run_replicate(sc: ScenarioConfig, rep: int) -> list:
    """Simulate one dataset and fit every model of ``sc`` to it.

    Failures (an infeasible truth draw, a chain that cannot start) become
    records with ``status == "failed"`` and a reason, one per affected
    model and cut-point.
    """
    if not 0 <= rep < sc.n_sim:
        raise ValueError(f"replicate {rep} outside 0..{sc.n_sim - 1}")
    fp = rng_fingerprint(sc, rep)
    try:
        tp, data = replicate_truth(sc, rep)
    except OrdsimError as exc:
        reason = f"{type(exc).__name__}: {exc}"
        return [r for m in sc.models for r in _failed(sc, rep, m, None, fp, reason)]

    records = []
    for label, spec in zip(sc.models, sc.model_specs()):
        cfg = replace(sc.sampler, seed=_model_seed(sc, rep, label))
        try:
            fit = run_model(spec, data, cfg)
        except OrdsimError as exc:
            records.extend(_failed(sc, rep, label, tp.theta_true, fp,
                                   f"{type(exc).__name__}: {exc}"))
            continue
        diag = fit.diagnostics
        for i, k in enumerate(fit.draws.cutpoints):
            s = summarize(fit.draws.theta[:, :, i])
            records.append(MetricRecord(
                scenario_id=sc.scenario_id, replicate=rep, model=label, cutpoint=int(k),
                theta_true=float(tp.theta_true[i]), median=s.median, ci_low=s.ci_low,
                ci_high=s.ci_high, diagnostics=_diag_entry(diag, i),
                refit_escalated=bool(diag.escalated), rng_fingerprint=fp,
            ))
    return records


# ---------------------------------------------------------------------------
# Monte Carlo standard errors

@dataclass(frozen=True)
class MCSEResult:
    """Bootstrap MCSE, its jackknife-after-bootstrap SE and ``mcse + 2 se``."""

    mcse: float
    se: float

    @property
    def upper(self) -> float:
        return self.mcse + 2.0 * self.se


def _boot_counts(n: int, n_boot: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.integers(0, n, size=(n_boot, n))
    counts = np.zeros((n_boot, n), dtype=np.int32)
    np.add.at(counts, (np.repeat(np.arange(n_boot), n), idx.ravel()), 1)
    return counts


def _jab(counts: np.ndarray, stats: np.ndarray) -> MCSEResult:
    """Bootstrap SD plus its jackknife-after-bootstrap standard error.

    The JAB SE includes the resampling noise of the leave-one-out bootstrap
    SDs, so with ``n_boot`` near the replicate count it is conservative.
    """
    n = counts.shape[1]
    sd = float(np.std(stats, ddof=1))
    if sd == 0.0:
        return MCSEResult(0.0, 0.0)
    absent = (counts == 0).astype(float)
    m = absent.sum(axis=0)
    ok = m >= 2
    if ok.sum() < 2:
        return MCSEResult(sd, float("nan"))
    s1 = absent.T @ stats
    s2 = absent.T @ (stats * stats)
    var_i = (s2[ok] - s1[ok] ** 2 / m[ok]) / (m[ok] - 1.0)
    sd_i = np.sqrt(np.clip(var_i, 0.0, None))
    nn = sd_i.size
    se = math.sqrt((nn - 1.0) / nn * float(np.sum((sd_i - sd_i.mean()) ** 2)))
    return MCSEResult(sd, se)


def mcse(values, n_boot: int = 1000, rng: Optional[np.random.Generator] = None,
         counts: Optional[np.ndarray] = None) -> MCSEResult:
    """MCSE of the mean of per-replicate ``values``.

    Resamples replicates ``n_boot`` times; ``counts`` lets several metrics of
    one cell share the same bootstrap samples.
    """
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.size < 10:
        raise InsufficientReplicates(f"MCSE needs at least 10 replicates, got {v.size}")
    if np.all(v == v[0]):
        # resampled means of a constant differ only by rounding
        return MCSEResult(0.0, 0.0)
    if counts is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        counts = _boot_counts(v.size, n_boot, rng)
    stats = counts @ v / v.size
    return _jab(counts, stats)


def _ratio_mcse(a, b, counts) -> MCSEResult:
    stats = 100.0 * ((counts @ a) / (counts @ b) - 1.0)
    return _jab(counts, stats)


# ---------------------------------------------------------------------------
# aggregation

@dataclass
class AggregateRow:
    scenario_id: str
    model: str
    cutpoint: int
    bias: float
    bias_mcse: float
    relbias_pct: float
    relbias_mcse: float
    coverage: float
    coverage_mcse: float
    mse: float
    mse_mcse: float
    n_effective_reps: int
    # audit-only fields (not part of the aggregate file)
    upper: dict = field(default_factory=dict)
    relbias_mean_ratio: float = float("nan")
    relbias_ratio_of_means: float = float("nan")
    coverage_mcse_closed: float = float("nan")
    n_failed: int = 0
    n_excluded_divergent: int = 0

    def csv_values(self) -> list:
        return [getattr(self, h) for h in AGGREGATE_HEADER]

    @property
    def coverage_check_ok(self) -> bool:
        """Bootstrap coverage MCSE within 15% of sqrt(p(1-p)/n)."""
        cf = self.coverage_mcse_closed
        if not (math.isfinite(cf) and math.isfinite(self.coverage_mcse)):
            return False
        if cf == 0.0:
            return self.coverage_mcse == 0.0
        return abs(self.coverage_mcse - cf) <= 0.15 * cf

    def upper_fractional(self) -> dict:
        """Upper bounds with relative bias on the fractional (not percent) scale."""
        out = dict(self.upper)
        if "relbias_pct" in out:
            out["relbias_pct"] = out["relbias_pct"] / 100.0
        return out


def _cell_rng(seed: int, key: tuple) -> np.random.Generator:
    tag = zlib.crc32("|".join(map(str, key)).encode())
    return np.random.default_rng(np.random.SeedSequence([int(seed) & _MASK64, tag]))


def _model_order(label: str) -> int:
    return MODEL_LABELS.index(label) if label in MODEL_LABELS else len(MODEL_LABELS)


def aggregate(records: Iterable[MetricRecord], exclude_divergent: bool = False,
              relbias: str = "mean-ratio", n_boot: int = 1000, seed: int = 0,
              strict: bool = True) -> list:
    """Performance metrics per (scenario, model, cut-point).

    Records are sorted by replicate inside each cell, so the result does not
    depend on input order.  Failed records, and with ``exclude_divergent``
    fits that still had divergences, are left out of the metrics.  With
    ``strict`` a cell with fewer than two usable replicates raises; otherwise
    its metrics are NaN.
    """
    if relbias not in RELBIAS_MODES:
        raise ValueError(f"relbias must be one of {RELBIAS_MODES}")
    cells: dict = {}
    for r in records:
        cells.setdefault((r.scenario_id, r.model, int(r.cutpoint)), []).append(r)
    rows = []
    for key in sorted(cells, key=lambda k: (k[0], _model_order(k[1]), k[1], k[2])):
        recs = sorted(cells[key], key=lambda r: r.replicate)
        good = [r for r in recs if r.ok]
        n_failed = len(recs) - len(good)
        n_div = 0
        if exclude_divergent:
            kept = [r for r in good if int(r.diagnostics.get("n_divergent", 0)) == 0]
            n_div = len(good) - len(kept)
            good = kept
        rows.append(_aggregate_cell(key, good, relbias, n_boot, seed, strict, n_failed, n_div))
    return rows


def _aggregate_cell(key, good, relbias, n_boot, seed, strict, n_failed, n_div) -> AggregateRow:
    n = len(good)
    nan = float("nan")
    if n < 2:
        if strict:
            raise InsufficientReplicates(
                f"cell {key[0]}/{key[1]}/k={key[2]} has {n} usable replicates; need >= 2")
        return AggregateRow(*key, nan, nan, nan, nan, nan, nan, nan, nan, n,
                            n_failed=n_failed, n_excluded_divergent=n_div)
    per, med, truth = _per_replicate(good)
    est = {m: float(v.mean()) for m, v in per.items()}
    rb_ratio = float(100.0 * (np.exp(med).mean() / np.exp(truth).mean() - 1.0))
    rb_mean = est["relbias_pct"]
    if relbias == "ratio-of-means":
        est["relbias_pct"] = rb_ratio

    errs = {m: MCSEResult(nan, nan) for m in METRICS}
    if n >= 10:
        counts = _boot_counts(n, n_boot, _cell_rng(seed, key))
        for m, v in per.items():
            errs[m] = mcse(v, counts=counts)
        if relbias == "ratio-of-means":
            errs["relbias_pct"] = _ratio_mcse(np.exp(med), np.exp(truth), counts)
    p = est["coverage"]
    return AggregateRow(
        scenario_id=key[0], model=key[1], cutpoint=key[2],
        bias=est["bias"], bias_mcse=errs["bias"].mcse,
        relbias_pct=est["relbias_pct"], relbias_mcse=errs["relbias_pct"].mcse,
        coverage=p, coverage_mcse=errs["coverage"].mcse,
        mse=est["mse"], mse_mcse=errs["mse"].mcse,
        n_effective_reps=n,
        upper={m: errs[m].upper for m in METRICS},
        relbias_mean_ratio=rb_mean, relbias_ratio_of_means=rb_ratio,
        coverage_mcse_closed=math.sqrt(p * (1.0 - p) / n),
        n_failed=n_failed, n_excluded_divergent=n_div,
    )


def _per_replicate(good: list) -> tuple:
    med = np.array([r.median for r in good], dtype=float)
    truth = np.array([r.theta_true for r in good], dtype=float)
    lo = np.array([r.ci_low for r in good], dtype=float)
    hi = np.array([r.ci_high for r in good], dtype=float)
    d = med - truth
    per = {
        "bias": d,
        "relbias_pct": 100.0 * np.expm1(d),
        "coverage": ((lo <= truth) & (truth <= hi)).astype(float),
        "mse": d * d,
    }
    return per, med, truth


def mcse_for(records: Iterable[MetricRecord], metric: str, n_boot: int = 1000,
             seed: int = 0) -> dict:
    """MCSE (with jackknife SE) of ``metric`` for every cell of ``records``."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    cells: dict = {}
    for r in records:
        if r.ok:
            cells.setdefault((r.scenario_id, r.model, int(r.cutpoint)), []).append(r)
    out = {}
    for key, recs in cells.items():
        per, _, _ = _per_replicate(sorted(recs, key=lambda r: r.replicate))
        v = per[metric]
        if v.size < 10:
            raise InsufficientReplicates(f"cell {key} has {v.size} usable replicates; need >= 10")
        out[key] = mcse(v, counts=_boot_counts(v.size, n_boot, _cell_rng(seed, key)))
    return out


def adapt_nsim(sc: ScenarioConfig, threshold: float = 0.05, batch: int = 250,
               cap: Optional[int] = None, runner: Callable = run_replicate,
               sink: Optional[list] = None, n_boot: int = 1000) -> int:
    """Run replicates in batches until every MCSE upper bound is below ``threshold``.

    Relative bias is judged on the fractional scale.  Returns the number of
    replicates run (at most ``cap``, by default ``sc.n_sim``).
    """
    if batch < 1:
        raise ValueError("batch must be positive")
    cap = sc.n_sim if cap is None else int(cap)
    sc = replace(sc, n_sim=max(cap, 1))
    records = sink if sink is not None else []
    n = 0
    while n < cap:
        m = min(batch, cap - n)
        for rep in range(n, n + m):
            records.extend(runner(sc, rep))
        n += m
        if math.isinf(threshold):
            break
        rows = aggregate(records, n_boot=n_boot, seed=sc.seed, strict=False)
        bounds = [b for row in rows for b in row.upper_fractional().values()]
        if bounds and all(math.isfinite(b) and b < threshold for b in bounds):
            break
    return n


def fit_success_rate(records: Iterable[MetricRecord], rhat_max: float = 1.01,
                     ess_per_chain: float = 100.0) -> tuple:
    """Fraction of (scenario, replicate, model) fits meeting the R-hat/ESS thresholds.

    Returns ``(rate, n_fits, failures)`` where ``failures`` lists the keys of
    fits that failed outright or missed a threshold.
    """
    fits: dict = {}
    for r in records:
        fits.setdefault((r.scenario_id, r.replicate, r.model), []).append(r)
    bad = []
    for key, recs in sorted(fits.items()):
        good = True
        for r in recs:
            dg = r.diagnostics
            if not r.ok:
                good = False
                break
            need = ess_per_chain * dg["n_chains"]
            if not (dg["rhat"] is not None and dg["rhat"] < rhat_max
                    and dg["ess_bulk"] is not None and dg["ess_bulk"] >= need
                    and dg["ess_tail"] is not None and dg["ess_tail"] >= need):
                good = False
                break
        if not good:
            bad.append(key)
    total = len(fits)
    return ((total - len(bad)) / total if total else float("nan"), total, bad)


# ---------------------------------------------------------------------------
# files

def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, float):
        return "nan" if math.isnan(x) else f"{x:.6g}"
    return str(x)


def atomic_write(path, data: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def aggregate_csv_text(rows: Sequence[AggregateRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_HEADER)
    for row in rows:
        w.writerow([_fmt(v) for v in row.csv_values()])
    return buf.getvalue()


def write_aggregate_csv(path, rows: Sequence[AggregateRow]):
    atomic_write(path, aggregate_csv_text(rows))


def read_aggregate_csv(path) -> list:
    """Parse an aggregate file into dicts with numeric columns converted."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        out = []
        for row in reader:
            d = dict(row)
            for k, v in row.items():
                if k in ("scenario_id", "model"):
                    continue
                if k in ("cutpoint", "n_effective_reps"):
                    d[k] = int(v)
                else:
                    d[k] = float(v)
            out.append(d)
        return out


def audit_csv_text(rows: Sequence[AggregateRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario_id", "model", "cutpoint", "relbias_mean_ratio", "relbias_ratio_of_means",
                "coverage_mcse", "coverage_mcse_closed", "coverage_check_ok",
                "bias_upper", "relbias_upper_fraction", "coverage_upper", "mse_upper",
                "n_effective_reps", "n_failed", "n_excluded_divergent"])
    for r in rows:
        up = r.upper_fractional()
        w.writerow([_fmt(v) for v in (
            r.scenario_id, r.model, r.cutpoint, r.relbias_mean_ratio, r.relbias_ratio_of_means,
            r.coverage_mcse, r.coverage_mcse_closed, r.coverage_check_ok,
            up.get("bias", float("nan")), up.get("relbias_pct", float("nan")),
            up.get("coverage", float("nan")), up.get("mse", float("nan")),
            r.n_effective_reps, r.n_failed, r.n_excluded_divergent)])
    return buf.getvalue()


def _read_jsonl(path: Path) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.endswith("\n"):
                break  # torn final write
            out.append(MetricRecord.from_dict(json.loads(line)))
    return out


def load_records(path) -> list:
    """Read one record file or every ``*.jsonl`` under a run directory."""
    p = Path(path)
    if p.is_dir():
        base = p / "records" if (p / "records").is_dir() else p
        files = sorted(base.glob("*.jsonl"))
    else:
        files = [p]
    out = []
    for f in files:
        out.extend(_read_jsonl(f))
    return out


def _complete_prefix(records: list, sc: ScenarioConfig) -> tuple:
    """Records of replicates 0..r-1 that are fully present, plus r."""
    by_rep: dict = {}
    for r in records:
        by_rep.setdefault(r.replicate, []).append(r)
    need = sc.records_per_replicate()
    kept, rep = [], 0
    while rep in by_rep and len(by_rep[rep]) == need:
        kept.extend(by_rep[rep])
        rep += 1
    return kept, rep


@dataclass
class RunSummary:
    out_dir: Path
    scenarios: list
    n_records: int
    n_failed_records: int
    n_failed_replicates: int
    aggregate_path: Path
    manifest_path: Path
    errors: list = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return self.n_failed_records > 0


def _replicate_task(args):
    sc, rep = args
    return sc.scenario_id, rep, [r.to_json() for r in run_replicate(sc, rep)]


def run_grid(scenarios: Sequence[ScenarioConfig], out_dir, jobs: int = 1, resume: bool = False,
             exclude_divergent: bool = False, relbias: str = "mean-ratio", n_boot: int = 1000,
             config_hash: Optional[str] = None, log: Optional[Callable[[str], None]] = None,
             max_replicates: Optional[int] = None) -> RunSummary:
    """Execute every replicate of every scenario and write the run files.

    ``records/<scenario_id>.jsonl`` receives whole replicates in order, so a
    killed run leaves a valid prefix; with ``resume`` that prefix is kept and
    only missing replicates run.  ``max_replicates`` stops after that many new
    replicates (used to exercise interruption).
    """
    out = Path(out_dir)
    rec_dir = out / "records"
    rec_dir.mkdir(parents=True, exist_ok=True)
    say = log or (lambda msg: None)
    started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())

    pending = []
    for sc in scenarios:
        path = rec_dir / f"{sc.scenario_id}.jsonl"
        start = 0
        if resume and path.exists():
            kept, start = _complete_prefix(_read_jsonl(path), sc)
            kept = [r for r in kept if r.replicate < sc.n_sim]
            start = min(start, sc.n_sim)
            atomic_write(path, "".join(r.to_json() + "\n" for r in kept))
        else:
            atomic_write(path, "")
        pending.extend((sc, rep) for rep in range(start, sc.n_sim))
    if max_replicates is not None:
        pending = pending[:max_replicates]

    handles = {}
    try:
        def emit(sid, rep, lines):
            fh = handles.get(sid)
            if fh is None:
                fh = handles[sid] = open(rec_dir / f"{sid}.jsonl", "a", encoding="utf-8")
            fh.write("".join(line + "\n" for line in lines))
            fh.flush()
            os.fsync(fh.fileno())

        if jobs > 1 and len(pending) > 1:
            # results may arrive out of order; release each scenario's prefix in order
            nxt = {}
            for sc, rep in pending:
                nxt.setdefault(sc.scenario_id, rep)
            buffered: dict = {}
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for sid, rep, lines in pool.map(_replicate_task, pending, chunksize=1):
                    buffered[(sid, rep)] = lines
                    while (sid, nxt[sid]) in buffered:
                        emit(sid, nxt[sid], buffered.pop((sid, nxt[sid])))
                        nxt[sid] += 1
        else:
            for sc, rep in pending:
                sid, rep, lines = _replicate_task((sc, rep))
                emit(sid, rep, lines)
                say(f"{sc.label} replicate {rep + 1}/{sc.n_sim}")
    finally:
        for fh in handles.values():
            fh.close()

    records = []
    errors = []
    failed_reps = set()
    for sc in scenarios:
        recs = _read_jsonl(rec_dir / f"{sc.scenario_id}.jsonl")
        records.extend(recs)
        for r in recs:
            if not r.ok:
                failed_reps.add((r.scenario_id, r.replicate))
                errors.append(f"scenario {sc.label} ({r.scenario_id}) replicate {r.replicate} "
                              f"model {r.model}: {r.failure_reason}")
    rows = aggregate(records, exclude_divergent=exclude_divergent, relbias=relbias,
                     n_boot=n_boot, seed=scenarios[0].seed if scenarios else 0, strict=False)
    agg_path = out / "aggregate.csv"
    write_aggregate_csv(agg_path, rows)
    atomic_write(out / "audit.csv", audit_csv_text(rows))

    manifest = {
        "package": "ordsim",
        "version": __version__,
        "config_hash": config_hash,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "aggregation": {"exclude_divergent": exclude_divergent, "relbias": relbias,
                        "n_boot": n_boot},
        "scenarios": [sc.to_dict() for sc in scenarios],
        "files": {"records": "records", "aggregate": "aggregate.csv", "audit": "audit.csv"},
        "n_records": len(records),
        "n_failed_records": sum(not r.ok for r in records),
    }
    man_path = out / "manifest.json"
    atomic_write(man_path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return RunSummary(out, list(scenarios), len(records), manifest["n_failed_records"],
                      len(failed_reps), agg_path, man_path, errors)
