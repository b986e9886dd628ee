"""Self-verification suites run by ``ordsim validate``.

Each suite returns a list of :class:`Check`; a suite passes when every check
does.  The suites compare the implementation against finite differences, a
dense-grid posterior, closed-form targets and closed-form DGM values.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numba
import numpy as np
from scipy import integrate, optimize, special, stats

from .dgm import (
    S1,
    S2,
    S3,
    SYMMETRIC,
    ControlShape,
    discretize_beta,
    gen_scenario1,
    gen_scenario2,
    gen_scenario3,
    sample_trial,
    truncnorm_sample,
)
from .diagnostics import ess_bulk
from .ordcore import OrdinalCounts
from .posterior import (
    MODEL_LABELS,
    ModelSpec,
    baseline_cumlogits,
    cumlogits_for_arm,
    log_posterior,
)
from .sampler import SamplerConfig, nuts_chain, run_model

__all__ = ["Check", "SUITES", "run_suite", "gradient_checks", "grid_posterior_medians",
           "oracle_dataset"]


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  {self.detail}".rstrip()


# ---------------------------------------------------------------------------
# gradients

def _random_case(label: str, rng: np.random.Generator, min_prob: float = 1e-3):
    """Random (spec, params, data) with every implied category probability >= ``min_prob``."""
    while True:
        j = int(rng.integers(3, 9))
        spec = ModelSpec.from_label(label, j)
        if spec.kind == "sep-logistic":
            spec = spec.for_cutpoint(int(rng.integers(2, j + 1)))
        fj = spec.fit_j
        counts = np.vstack([rng.multinomial(int(rng.integers(0, 500)), rng.dirichlet(np.ones(fj)))
                            for _ in range(2)])
        x = np.concatenate([rng.normal(0.0, 1.0, fj - 1), rng.normal(0.0, 0.25, spec.n_effect)])
        ok = True
        for arm in (0, 1):
            eta = cumlogits_for_arm(spec, x, arm)
            c = np.concatenate([[1.0], special.expit(eta), [0.0]])
            if np.any(c[:-1] - c[1:] < min_prob):
                ok = False
        if ok:
            return spec, x, OrdinalCounts(counts)


def gradient_checks(n_cases: int = 100, step: float = 1e-5, seed: int = 0) -> list:
    """Central finite differences against the analytic gradient for every model."""
    rng = np.random.default_rng(seed)
    out = []
    for label in MODEL_LABELS:
        worst = 0.0
        for _ in range(n_cases):
            spec, x, data = _random_case(label, rng)
            g = log_posterior(spec, x, data).grad
            for i in range(x.size):
                e = np.zeros_like(x)
                e[i] = step
                fd = (log_posterior(spec, x + e, data).logp
                      - log_posterior(spec, x - e, data).logp) / (2 * step)
                err = abs(g[i] - fd) / max(1.0, abs(g[i]), abs(fd))
                worst = max(worst, err)
        out.append(Check(f"gradient/{label}", worst < 1e-6,
                         f"{n_cases} cases, max rel. error {worst:.2e} (< 1e-6)"))
    return out


# ---------------------------------------------------------------------------
# dense-grid posterior oracle

def oracle_dataset(seed: int = 20240607) -> OrdinalCounts:
    """Seeded PO dataset: j = 3, n = 200, odds ratio 1.5, symmetric control arm."""
    rng = np.random.default_rng(seed)
    tp = gen_scenario1(discretize_beta(SYMMETRIC, 3), S1(math.log(1.5), 0.0), rng)
    return sample_trial(tp, 200, rng)


def _po3_logpost(a2, a3, b, counts, prior_sd):
    """Log posterior of the 3-category PO model in (alpha_2, alpha_3, beta) space.

    The flat Dirichlet prior on the control simplex is uniform over
    1 > P(Y>=2) > P(Y>=3) > 0, so its density in alpha space is the product of
    logistic densities restricted to alpha_2 > alpha_3.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        lp = np.zeros(np.broadcast(a2, a3, b).shape)
        for arm, shift in ((0, 0.0), (1, b)):
            c2 = special.expit(a2 + shift)
            c3 = special.expit(a3 + shift)
            n1, n2, n3 = counts[arm]
            lp = lp + n1 * np.log1p(-c2) + n2 * np.log(c2 - c3) + n3 * np.log(c3)
        lp = lp + special.log_expit(a2) + special.log_expit(-a2)
        lp = lp + special.log_expit(a3) + special.log_expit(-a3)
        lp = lp - 0.5 * (b / prior_sd) ** 2
        return np.where((a2 > a3) & np.isfinite(lp), lp, -np.inf)


def _marginal_median(grid: np.ndarray, dens: np.ndarray) -> float:
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    cdf /= cdf[-1]
    return float(np.interp(0.5, cdf, grid))


def grid_posterior_medians(counts: OrdinalCounts, n_grid: int = 201, half_width: float = 6.0,
                           prior_sd: float = 100.0) -> np.ndarray:
    """Posterior medians of (alpha_2, alpha_3, beta) by trapezoid integration on a grid.

    The grid spans ``half_width`` standard errors either side of the posterior
    mode on each axis.
    """
    c = np.asarray(counts.counts, dtype=float)

    def nlp(z):
        a2, a3, b = z[0], z[0] - math.exp(z[1]), z[2]
        v = float(_po3_logpost(np.array(a2), np.array(a3), np.array(b), c, prior_sd))
        return -v if math.isfinite(v) else 1e300

    res = optimize.minimize(nlp, np.array([0.5, 0.0, 0.0]), method="Nelder-Mead",
                            options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
    mode = np.array([res.x[0], res.x[0] - math.exp(res.x[1]), res.x[2]])

    def f(v):
        return -float(_po3_logpost(np.array(v[0]), np.array(v[1]), np.array(v[2]), c, prior_sd))

    h = 1e-4
    hess = np.empty((3, 3))
    for i in range(3):
        for k in range(3):
            ei, ek = np.eye(3)[i] * h, np.eye(3)[k] * h
            hess[i, k] = (f(mode + ei + ek) - f(mode + ei - ek) - f(mode - ei + ek)
                          + f(mode - ei - ek)) / (4 * h * h)
    se = np.sqrt(np.diag(np.linalg.inv(hess)))
    axes = [np.linspace(m - half_width * s, m + half_width * s, n_grid) for m, s in zip(mode, se)]
    A2, A3 = np.meshgrid(axes[0], axes[1], indexing="ij")
    logd = np.empty((n_grid, n_grid, n_grid))
    for t, b in enumerate(axes[2]):
        logd[:, :, t] = _po3_logpost(A2, A3, b, c, prior_sd)
    dens = np.exp(logd - logd.max())
    meds = []
    for ax in range(3):
        other = [a for a in range(3) if a != ax]
        m = dens
        for o in sorted(other, reverse=True):
            m = integrate.trapezoid(m, axes[o], axis=o)
        meds.append(_marginal_median(axes[ax], m))
    return np.array(meds)


def sampler_oracle_medians(counts: OrdinalCounts, cfg: SamplerConfig) -> np.ndarray:
    spec = ModelSpec.po(3)
    fit = run_model(spec, counts, cfg)
    raw = fit.draws.raw["joint"].reshape(-1, spec.dim)
    alpha = np.array([baseline_cumlogits(spec, x) for x in raw])
    return np.median(np.column_stack([alpha, raw[:, -1]]), axis=0)


def oracle_checks(tol: float = 0.02) -> list:
    data = oracle_dataset()
    grid = grid_posterior_medians(data)
    cfg = SamplerConfig(chains=4, warmup=1000, draws=10000, seed=11)
    nuts = sampler_oracle_medians(data, cfg)
    names = ("alpha_2", "alpha_3", "beta")
    return [Check(f"oracle/{n}", abs(a - b) < tol, f"NUTS {a:.4f} vs grid {b:.4f} (tol {tol})")
            for n, a, b in zip(names, nuts, grid)]


# ---------------------------------------------------------------------------
# sampler on analytic targets

@numba.njit(cache=True)
def _std_normal(x, args):
    return -0.5 * np.dot(x, x), -x


@numba.njit(cache=True)
def _mvn(x, prec):
    g = -(prec @ x)
    return 0.5 * np.dot(x, g), g


def _draws(fn, dim, cfg, args) -> tuple:
    chains = [nuts_chain(fn, np.zeros(dim), cfg, chain_id=c, args=args) for c in range(cfg.chains)]
    return np.stack([c.draws for c in chains]), sum(c.n_divergent for c in chains)


def sampler_checks(seed: int = 3) -> list:
    out = []
    cfg = SamplerConfig(chains=4, warmup=1000, draws=3750, seed=seed)
    d, ndiv = _draws(_std_normal, 5, cfg, 0.0)
    flat = d.reshape(-1, 5)
    for i in range(5):
        ess = ess_bulk(d[:, :, i])
        mcse = flat[:, i].std() / math.sqrt(ess)
        out.append(Check(f"sampler/normal5/mean[{i}]", abs(flat[:, i].mean()) < 3 * mcse,
                         f"{flat[:, i].mean():+.4f} (3 MCSE = {3 * mcse:.4f})"))
        v = flat[:, i].var()
        out.append(Check(f"sampler/normal5/var[{i}]", abs(v - 1) < 0.05, f"{v:.4f}"))
        ks = stats.kstest(flat[:, i], "norm")
        out.append(Check(f"sampler/normal5/ks[{i}]", ks.pvalue > 0.001, f"p = {ks.pvalue:.3g}"))
    out.append(Check("sampler/normal5/divergences", ndiv == 0, f"{ndiv}"))

    cov = np.array([[1.0, 0.9], [0.9, 1.0]])
    d, ndiv = _draws(_mvn, 2, cfg, np.linalg.inv(cov))
    flat = d.reshape(-1, 2)
    for i in range(2):
        ess = ess_bulk(d[:, :, i])
        mcse = flat[:, i].std() / math.sqrt(ess)
        out.append(Check(f"sampler/corr2/mean[{i}]", abs(flat[:, i].mean()) < 3 * mcse,
                         f"{flat[:, i].mean():+.4f} (3 MCSE = {3 * mcse:.4f})"))
        v = flat[:, i].var()
        out.append(Check(f"sampler/corr2/var[{i}]", abs(v - 1) < 0.05, f"{v:.4f}"))
    out.append(Check("sampler/corr2/divergences", ndiv == 0, f"{ndiv}"))

    c0 = nuts_chain(_std_normal, np.zeros(3), SamplerConfig(warmup=150, draws=200, max_treedepth=0), args=0.0)
    out.append(Check("sampler/treedepth0", bool(np.all(np.isfinite(c0.draws)) and np.all(c0.n_leapfrog == 1)),
                     "one leapfrog step per transition"))
    return out


# ---------------------------------------------------------------------------
# data-generating mechanism

def dgm_checks() -> list:
    out = []
    u = discretize_beta(ControlShape("uniform", 1.0, 1.0), 4)
    out.append(Check("dgm/beta11-uniform", bool(np.array_equal(u, np.full(4, 0.25))), str(u)))
    worst = max(float(np.max(np.abs(discretize_beta(SYMMETRIC, j) - discretize_beta(SYMMETRIC, j)[::-1])))
                for j in (3, 4, 7, 11))
    out.append(Check("dgm/beta1.8-symmetry", worst < 1e-12, f"max asymmetry {worst:.1e}"))
    pi0 = discretize_beta(SYMMETRIC, 7)
    t2 = gen_scenario2(pi0, S2()).theta_true
    exp2 = math.log(0.8) + 0.06 * np.arange(6)
    out.append(Check("dgm/scenario2-theta", bool(np.array_equal(t2, exp2)),
                     f"theta_2 = {t2[0]:.4f}, theta_7 = {t2[-1]:.4f}"))
    t3 = gen_scenario3(discretize_beta(SYMMETRIC, 11), S3(math.log(1.1))).theta_true
    ok3 = bool(np.all(t3[:-1] == 0.0) and t3[-1] == math.log(1.1))
    out.append(Check("dgm/scenario3-theta", ok3, "zeros then log 1.1"))
    rng = np.random.default_rng(1)
    tp = gen_scenario1(np.full(3, 1 / 3), S1(math.log(1.5), 0.0), rng)
    ok1 = bool(np.all(tp.theta_true == math.log(1.5)) and tp.check())
    out.append(Check("dgm/scenario1-po", ok1, "sigma = 0 gives a constant log-OR"))
    null = gen_scenario1(pi0, S1(0.0, 0.0), rng)
    out.append(Check("dgm/null", bool(np.array_equal(null.pi0, null.pi1)), "pi1 == pi0"))
    xs = np.array([truncnorm_sample(0.0, 1.0, 0.0, np.inf, rng) for _ in range(20000)])
    se = xs.std() / math.sqrt(xs.size)
    target = math.sqrt(2 / math.pi)
    out.append(Check("dgm/truncnorm-halfnormal", abs(xs.mean() - target) < 3 * se,
                     f"{xs.mean():.4f} vs {target:.4f}"))
    return out


SUITES: dict = {
    "gradients": gradient_checks,
    "oracle": oracle_checks,
    "sampler": sampler_checks,
    "dgm": dgm_checks,
}


def run_suite(name: str, echo: Callable[[str], None] = print) -> list:
    """Run one suite (or ``"all"``), echoing a line per check."""
    names = list(SUITES) if name == "all" else [name]
    checks = []
    for n in names:
        if n not in SUITES:
            raise KeyError(f"unknown suite {n!r}")
        t0 = time.perf_counter()
        part = SUITES[n]()
        for c in part:
            echo(c.line())
        echo(f"-- {n}: {sum(c.passed for c in part)}/{len(part)} passed in {time.perf_counter() - t0:.1f}s")
        checks.extend(part)
    return checks
