"""Command-line entry point ``ordsim``.

Exit codes: 0 success, 1 usage/config/IO error, 2 partial computational
failure (some replicates or model fits failed).
"""
from __future__ import annotations

import sys
from dataclasses import replace
from pathlib import Path

import click

from . import __version__
from .errors import ConfigError, MissingColumns, OrdsimError, UnknownKind
from .posterior import MODEL_LABELS

EXIT_OK, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2


def _fail(msg: str, code: int = EXIT_USAGE):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.version_option(__version__, prog_name="ordsim")
def main():
    """Bayesian cumulative-logit models for ordinal trial outcomes."""


# ---------------------------------------------------------------------------
# simulate

@main.command()
@click.argument("config", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--resume", is_flag=True, help="Keep complete replicates already on disk.")
@click.option("--scenarios", "patterns", multiple=True,
              help="Scenario id prefix or label glob (repeatable, or comma separated).")
@click.option("--nsim-override", type=click.IntRange(min=1), default=None,
              help="Replicates per scenario, replacing the config value.")
@click.option("--exclude-divergent", is_flag=True,
              help="Leave fits that kept divergences out of the aggregates.")
@click.option("--jobs", type=click.IntRange(min=1), default=None,
              help="Worker processes (default: config value, else logical cores).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), default=None,
              help="Output directory (default: config out_dir).")
@click.option("--quiet", is_flag=True)
def simulate(config, resume, patterns, nsim_override, exclude_divergent, jobs, out_dir, quiet):
    """Run the simulation grid described by CONFIG."""
    from .config import load_config
    from .simstudy import build_grid, filter_scenarios, run_grid

    try:
        rc = load_config(config)
    except ConfigError as exc:
        _fail(str(exc))
    plan = rc.plan
    if nsim_override is not None:
        plan = replace(plan, n_sim=nsim_override)
    try:
        scenarios = build_grid(plan)
    except OrdsimError as exc:
        _fail(str(exc))
    pats = [p for item in patterns for p in item.split(",")]
    scenarios = filter_scenarios(scenarios, pats)
    if not scenarios:
        _fail("no scenario matches the --scenarios filter")
    out = out_dir or rc.out_dir
    log = (lambda m: None) if quiet else (lambda m: click.echo(m, err=True))
    try:
        summary = run_grid(
            scenarios, out, jobs=jobs or rc.jobs, resume=resume,
            exclude_divergent=exclude_divergent or rc.exclude_divergent,
            relbias=rc.relbias, n_boot=rc.n_boot, config_hash=rc.config_hash, log=log,
        )
    except OSError as exc:
        _fail(f"I/O error: {exc}")
    for line in summary.errors:
        click.echo(f"failed: {line}", err=True)
    click.echo(f"{len(scenarios)} scenario(s), {summary.n_records} records, "
               f"{summary.n_failed_records} failed; wrote {summary.aggregate_path} "
               f"and {summary.manifest_path}")
    sys.exit(EXIT_PARTIAL if summary.partial else EXIT_OK)


# ---------------------------------------------------------------------------
# fit

def _print_case(res):
    from .trialio import _g6

    click.echo(f"endpoint {res.name}: j={res.j}, n={int(res.counts.n)} complete cases "
               f"({res.n_dropped} dropped)")
    if res.sparse:
        cats = ", ".join(str(s["category"]) for s in res.sparse)
        click.echo(f"sparse categories (< threshold in an arm): {cats}")
    for label, r in res.models.items():
        click.echo(f"\n== {label} ==")
        if not r.ok:
            click.echo(f"  FAILED: {r.error}")
            continue
        dg = r.diagnostics
        click.echo(f"  divergences {dg['n_divergent']}  treedepth hits {dg['max_treedepth_hits']}  "
                   f"escalated {dg['escalated']}  degraded {dg['degraded']}")
        click.echo(f"  {'k':>3} {'median':>10} {'ci_low':>10} {'ci_high':>10} {'rhat':>8} "
                   f"{'ess_bulk':>9} {'ess_tail':>9} {'div':>4}")
        for c in r.cutpoints:
            flag = "  prior-dominated" if c.prior_dominated else ""
            click.echo(f"  {c.cutpoint:>3} {_g6(c.median):>10} {_g6(c.ci_low):>10} "
                       f"{_g6(c.ci_high):>10} {_g6(c.rhat):>8} {_g6(c.ess_bulk):>9} "
                       f"{_g6(c.ess_tail):>9} {dg['n_divergent']:>4}{flag}")


@main.command()
@click.argument("data", type=click.Path(dir_okay=False, path_type=Path))
@click.option("--model", type=click.Choice(list(MODEL_LABELS) + ["all"]), default="all",
              show_default=True)
@click.option("--schema", type=click.Path(dir_okay=False, path_type=Path), default=None,
              help="Category labels / arm filter (TOML or JSON).")
@click.option("--chains", type=click.IntRange(min=2), default=4, show_default=True)
@click.option("--warmup", type=click.IntRange(min=150), default=3750, show_default=True)
@click.option("--draws", type=click.IntRange(min=4), default=3750, show_default=True)
@click.option("--target-accept", type=click.FloatRange(0, 1, min_open=True, max_open=True),
              default=0.8, show_default=True)
@click.option("--max-treedepth", type=click.IntRange(min=0), default=10, show_default=True)
@click.option("--seed", type=int, default=None, help="Sampler seed (env ORDSIM_SEED, else 0).")
@click.option("--prior-sd", type=click.FloatRange(min=0, min_open=True), default=100.0,
              show_default=True, help="Prior SD of every treatment-effect parameter.")
@click.option("--sparse-threshold", type=click.IntRange(min=1), default=5, show_default=True)
@click.option("--jobs", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path),
              default=Path("ordsim_fit"), show_default=True)
def fit(data, model, schema, chains, warmup, draws, target_accept, max_treedepth, seed,
        prior_sd, sparse_threshold, jobs, out_dir):
    """Fit the ordinal models to one trial endpoint in DATA."""
    import os

    from .sampler import SamplerConfig
    from .trialio import analyze_case, load_schema, load_trial, write_case_outputs

    if seed is None:
        env = os.environ.get("ORDSIM_SEED")
        try:
            seed = int(env) if env else 0
        except ValueError:
            _fail(f"ORDSIM_SEED must be an integer, got {env!r}")
    try:
        sch = load_schema(schema) if schema is not None else None
        ds = load_trial(data, sch)
    except FileNotFoundError as exc:
        _fail(str(exc))
    except OrdsimError as exc:
        _fail(str(exc))
    models = list(MODEL_LABELS) if model == "all" else [model]
    if ds.j < 3 and any(m != "sep-logistic" for m in models):
        _fail(f"model '{model}' requires j >= 3 categories (data has j = {ds.j}); use sep-logistic")
    cfg = SamplerConfig(chains=chains, warmup=warmup, draws=draws, target_accept=target_accept,
                        max_treedepth=max_treedepth, seed=seed)
    try:
        res = analyze_case(ds, cfg, models=models, sparse_threshold=sparse_threshold, jobs=jobs,
                           prior_sd_effect=prior_sd, prior_sd_increment=prior_sd)
    except OrdsimError as exc:
        _fail(str(exc))
    _print_case(res)
    try:
        jpath, cpath = write_case_outputs(res, out_dir)
    except OSError as exc:
        _fail(f"I/O error: {exc}")
    click.echo(f"\nwrote {jpath} and {cpath}")
    failed = [m for m, r in res.models.items() if not r.ok]
    sys.exit(EXIT_PARTIAL if failed else EXIT_OK)


# ---------------------------------------------------------------------------
# report

@main.command()
@click.argument("path", type=click.Path(path_type=Path))
@click.option("--kind", required=True, help="bias, relbias, coverage, mse or forest.")
@click.option("--format", "fmt", type=click.Choice(["csv", "svg"]), default="svg", show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path),
              default=Path("ordsim_report"), show_default=True)
def report(path, kind, fmt, out_dir):
    """Render tables or plots from a run directory or case results at PATH."""
    from .report import render_report

    try:
        written = render_report(path, kind, fmt, out_dir)
    except (UnknownKind, MissingColumns, FileNotFoundError, ValueError) as exc:
        _fail(str(exc))
    except OSError as exc:
        _fail(f"I/O error: {exc}")
    for p in written:
        click.echo(str(p))


# ---------------------------------------------------------------------------
# validate and demo data

@main.command()
@click.option("--suite", type=click.Choice(["gradients", "oracle", "sampler", "dgm", "all"]),
              default="all", show_default=True)
def validate(suite):
    """Run self-verification checks; exit 0 only if all pass."""
    from .validation import run_suite

    checks = run_suite(suite, echo=click.echo)
    n_fail = sum(not c.passed for c in checks)
    click.echo(f"{len(checks) - n_fail}/{len(checks)} checks passed")
    sys.exit(EXIT_OK if n_fail == 0 else EXIT_PARTIAL)


@main.command("make-bundle")
@click.argument("out_dir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--seed", type=int, default=2021, show_default=True)
@click.option("--n-per-arm", type=click.IntRange(min=1), default=150, show_default=True)
def make_bundle(out_dir, seed, n_per_arm):
    """Write the synthetic four-endpoint case-study bundle to OUT_DIR."""
    from .trialio import synthetic_ascot_bundle

    for d, s in synthetic_ascot_bundle(out_dir, seed=seed, n_per_arm=n_per_arm):
        click.echo(f"{d}  (schema {s})")


if __name__ == "__main__":  # pragma: no cover
    main()
