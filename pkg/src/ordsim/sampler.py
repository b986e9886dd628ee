"""No-U-Turn sampler with windowed warmup, plus multi-chain model fitting.

The transition kernel is the multinomial variant of NUTS: trajectories grow
by doubling, states within a subtree are sampled uniformly in proportion to
their Boltzmann weight, subtrees are merged with biased progressive sampling,
and termination uses the generalized no-U-turn criterion.  Subtree U-turn
checks are done iteratively with momentum checkpoints, so the whole kernel
runs inside numba without recursion.

Warmup follows the familiar three-phase schedule: a fast step-size buffer,
doubling windows that estimate a diagonal inverse metric, and a terminal
step-size buffer.  Step size is tuned by dual averaging.

Densities handed to the kernel are numba-jitted functions with signature
``f(x, args) -> (logp, grad)``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numba
import numpy as np

from .errors import InitFailure, NonFiniteGradient
from .ordcore import OrdinalCounts, cutpoint_labels, dichotomize
from .posterior import ModelSpec, density_args, initial_point, ordinal_logp_grad

__all__ = [
    "SamplerConfig",
    "ChainOutput",
    "PosteriorDraws",
    "FitResult",
    "nuts_chain",
    "run_model",
    "chain_seed",
]

_STATUS_OK = 0
_STATUS_BAD_GRAD = 1
_STATUS_BAD_STEP = 2


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 4
    warmup: int = 3750
    draws: int = 3750
    target_accept: float = 0.8
    max_treedepth: int = 10
    seed: int = 0
    divergence_energy_threshold: float = 1000.0
    escalate: bool = True
    escalated_target_accept: float = 0.99
    escalated_max_treedepth: int = 12
    init_jitter: float = 1.0

    def __post_init__(self):
        if self.warmup < 150:
            raise ValueError("warmup must be at least 150 iterations")
        if self.chains < 2:
            raise ValueError("at least two chains are needed for split R-hat")
        if self.draws < 4:
            raise ValueError("need at least 4 post-warmup draws per chain")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_treedepth < 0:
            raise ValueError("max_treedepth must be non-negative")

    def escalated(self) -> "SamplerConfig":
        return replace(
            self,
            target_accept=max(self.target_accept, self.escalated_target_accept),
            max_treedepth=max(self.max_treedepth, self.escalated_max_treedepth),
        )


@dataclass
class ChainOutput:
    """Post-warmup draws and per-draw sampler statistics for one chain."""

    chain_id: int
    draws: np.ndarray
    treedepth: np.ndarray
    n_leapfrog: np.ndarray
    energy: np.ndarray
    divergent: np.ndarray
    boundary: np.ndarray
    accept_stat: np.ndarray
    step_size: float
    inv_metric: np.ndarray
    warmup_divergences: int = 0
    max_treedepth: int = 10

    @property
    def n_divergent(self) -> int:
        return int(self.divergent.sum())


# ---------------------------------------------------------------------------
# jitted kernel

@numba.njit(cache=True, nogil=True, error_model="numpy")
def _kinetic(p, inv_metric):
    s = 0.0
    for i in range(p.shape[0]):
        s += inv_metric[i] * p[i] * p[i]
    return 0.5 * s


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _is_turning(p_a, p_b, rho, inv_metric):
    sa = 0.0
    sb = 0.0
    for i in range(rho.shape[0]):
        sa += inv_metric[i] * p_a[i] * rho[i]
        sb += inv_metric[i] * p_b[i] * rho[i]
    return sa <= 0.0 or sb <= 0.0


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _bitcount(n):
    c = 0
    while n:
        c += n & 1
        n >>= 1
    return c


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _trailing_ones(n):
    c = 0
    while n & 1:
        c += 1
        n >>= 1
    return c


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _logaddexp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _sample_momentum(inv_metric):
    d = inv_metric.shape[0]
    p = np.empty(d)
    for i in range(d):
        p[i] = np.random.standard_normal() / np.sqrt(inv_metric[i])
    return p


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _leapfrog(fn, args, q, p, g, eps, inv_metric):
    """In-place leapfrog on (q, p); returns (logp, new_grad)."""
    d = q.shape[0]
    for i in range(d):
        p[i] += 0.5 * eps * g[i]
    for i in range(d):
        q[i] += eps * inv_metric[i] * p[i]
    logp, g_new = fn(q, args)
    if np.isfinite(logp):
        for i in range(d):
            p[i] += 0.5 * eps * g_new[i]
    return logp, g_new


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _init_stepsize(fn, args, q, logp, g, inv_metric, eps):
    if eps == 0.0 or eps > 1e7 or np.isnan(eps):
        return eps
    log08 = np.log(0.8)
    p = _sample_momentum(inv_metric)
    h0 = -logp + _kinetic(p, inv_metric)
    q1 = q.copy()
    lp1, _ = _leapfrog(fn, args, q1, p, g, eps, inv_metric)
    h = -lp1 + _kinetic(p, inv_metric)
    if np.isnan(h):
        h = np.inf
    direction = 1 if h0 - h > log08 else -1
    while True:
        p = _sample_momentum(inv_metric)
        h0 = -logp + _kinetic(p, inv_metric)
        q1 = q.copy()
        lp1, _ = _leapfrog(fn, args, q1, p, g, eps, inv_metric)
        h = -lp1 + _kinetic(p, inv_metric)
        if np.isnan(h):
            h = np.inf
        delta = h0 - h
        if direction == 1 and not delta > log08:
            break
        if direction == -1 and not delta < log08:
            break
        eps = 2.0 * eps if direction == 1 else 0.5 * eps
        if eps > 1e7 or eps == 0.0:
            break
    return eps


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _transition(fn, args, q0, logp0, g0, eps, inv_metric, max_depth, threshold):
    """One NUTS transition.

    Returns (q, logp, grad, accept_stat, depth, n_leapfrog, divergent,
    boundary, energy, status).
    """
    d = q0.shape[0]
    limit = max(max_depth, 1)
    p0 = _sample_momentum(inv_metric)
    h0 = -logp0 + _kinetic(p0, inv_metric)

    q_l = q0.copy()
    p_l = p0.copy()
    g_l = g0.copy()
    q_r = q0.copy()
    p_r = p0.copy()
    g_r = g0.copy()
    rho = p0.copy()
    log_w = 0.0

    q_prop = q0.copy()
    lp_prop = logp0
    g_prop = g0.copy()
    h_prop = h0

    r_ckpts = np.zeros((limit, d))
    r_sum_ckpts = np.zeros((limit, d))
    rho_sub = np.zeros(d)
    sub_q = np.empty(d)
    sub_g = np.empty(d)
    tmp = np.empty(d)

    depth = 0
    n_leap = 0
    sum_acc = 0.0
    divergent = False
    boundary = False

    while depth < limit:
        depth += 1
        direction = 1 if np.random.random() < 0.5 else -1
        if direction == 1:
            q = q_r.copy()
            p = p_r.copy()
            g = g_r.copy()
        else:
            q = q_l.copy()
            p = p_l.copy()
            g = g_l.copy()

        rho_sub[:] = 0.0
        log_w_sub = -np.inf
        sub_lp = -np.inf
        sub_h = np.inf
        stop = False
        n_sub = 1 << (depth - 1)
        for n in range(n_sub):
            lp, g = _leapfrog(fn, args, q, p, g, direction * eps, inv_metric)
            n_leap += 1
            if np.isfinite(lp):
                for i in range(d):
                    if not np.isfinite(g[i]):
                        return (q0, logp0, g0, 0.0, depth, n_leap, False, False, h0,
                                _STATUS_BAD_GRAD)
                h = -lp + _kinetic(p, inv_metric)
            else:
                h = np.inf
            dh = h - h0
            if not dh <= threshold:
                if np.isfinite(lp):
                    divergent = True
                else:
                    boundary = True
                stop = True
                break
            sum_acc += 1.0 if dh <= 0.0 else np.exp(-dh)
            for i in range(d):
                rho_sub[i] += p[i]
            lw = -dh
            new_log_w_sub = _logaddexp(log_w_sub, lw)
            if np.log(np.random.random()) < lw - new_log_w_sub:
                sub_q[:] = q
                sub_g[:] = g
                sub_lp = lp
                sub_h = h
            log_w_sub = new_log_w_sub

            if n_sub > 1:
                if n % 2 == 0:
                    idx = _bitcount(n >> 1)
                    r_ckpts[idx, :] = p
                    r_sum_ckpts[idx, :] = rho_sub
                else:
                    idx_max = _bitcount(n >> 1)
                    idx_min = idx_max - _trailing_ones(n) + 1
                    for c in range(idx_max, idx_min - 1, -1):
                        for i in range(d):
                            tmp[i] = rho_sub[i] - r_sum_ckpts[c, i] + r_ckpts[c, i]
                        if _is_turning(r_ckpts[c], p, tmp, inv_metric):
                            stop = True
                            break
                    if stop:
                        break
        if stop:
            break

        if direction == 1:
            q_r = q
            p_r = p
            g_r = g
        else:
            q_l = q
            p_l = p
            g_l = g

        if log_w_sub > log_w or np.random.random() < np.exp(log_w_sub - log_w):
            q_prop[:] = sub_q
            g_prop[:] = sub_g
            lp_prop = sub_lp
            h_prop = sub_h
        log_w = _logaddexp(log_w, log_w_sub)

        for i in range(d):
            rho[i] += rho_sub[i]
        if _is_turning(p_l, p_r, rho, inv_metric):
            break

    acc = sum_acc / n_leap if n_leap > 0 else 0.0
    return (q_prop, lp_prop, g_prop, acc, depth, n_leap, divergent, boundary, h_prop,
            _STATUS_OK)


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _run_chain(fn, args, init, seed, n_warmup, n_draws, target_accept, max_depth,
               threshold):
    np.random.seed(seed)
    d = init.shape[0]
    q = init.copy()
    logp, g = fn(q, args)
    inv_metric = np.ones(d)

    draws = np.empty((n_draws, d))
    st_depth = np.empty(n_draws, dtype=np.int64)
    st_leap = np.empty(n_draws, dtype=np.int64)
    st_energy = np.empty(n_draws)
    st_div = np.zeros(n_draws, dtype=np.bool_)
    st_bnd = np.zeros(n_draws, dtype=np.bool_)
    st_acc = np.empty(n_draws)
    warmup_div = 0

    eps = _init_stepsize(fn, args, q, logp, g, inv_metric, 1.0)
    if eps == 0.0 or eps > 1e7 or np.isnan(eps):
        return (draws, st_depth, st_leap, st_energy, st_div, st_bnd, st_acc, eps,
                inv_metric, warmup_div, _STATUS_BAD_STEP)

    # dual averaging constants
    gamma = 0.05
    t0 = 10.0
    kappa = 0.75
    mu = np.log(10.0 * eps)
    s_bar = 0.0
    x_bar = 0.0
    da_count = 0

    init_buffer = 75
    term_buffer = 50
    base_window = 25
    if init_buffer + base_window + term_buffer > n_warmup:
        init_buffer = int(0.15 * n_warmup)
        term_buffer = int(0.1 * n_warmup)
        base_window = n_warmup - (init_buffer + term_buffer)
    win_size = base_window
    next_window = init_buffer + win_size - 1
    win_counter = 0
    w_n = 0
    w_mean = np.zeros(d)
    w_m2 = np.zeros(d)

    for it in range(n_warmup + n_draws):
        (q, logp, g, acc, depth, n_leap, div, bnd, energy,
         status) = _transition(fn, args, q, logp, g, eps, inv_metric, max_depth, threshold)
        if status != _STATUS_OK:
            return (draws, st_depth, st_leap, st_energy, st_div, st_bnd, st_acc, eps,
                    inv_metric, warmup_div, status)
        if it < n_warmup:
            if div:
                warmup_div += 1
            da_count += 1
            eta = 1.0 / (da_count + t0)
            s_bar = (1.0 - eta) * s_bar + eta * (target_accept - acc)
            x = mu - s_bar * np.sqrt(da_count) / gamma
            x_eta = da_count ** (-kappa)
            x_bar = x_eta * x + (1.0 - x_eta) * x_bar
            eps = np.exp(x)

            in_window = (win_counter >= init_buffer
                         and win_counter < n_warmup - term_buffer
                         and win_counter != n_warmup)
            if in_window:
                w_n += 1
                for i in range(d):
                    delta = q[i] - w_mean[i]
                    w_mean[i] += delta / w_n
                    w_m2[i] += delta * (q[i] - w_mean[i])
            if win_counter == next_window and win_counter != n_warmup:
                last = n_warmup - term_buffer - 1
                if next_window != last:
                    win_size *= 2
                    next_window = win_counter + win_size
                    if next_window != last:
                        if next_window + 2 * win_size >= n_warmup - term_buffer:
                            next_window = last
                if w_n > 1:
                    for i in range(d):
                        var = w_m2[i] / (w_n - 1.0)
                        inv_metric[i] = (w_n / (w_n + 5.0)) * var + 1e-3 * (5.0 / (w_n + 5.0))
                w_n = 0
                w_mean[:] = 0.0
                w_m2[:] = 0.0
                eps = _init_stepsize(fn, args, q, logp, g, inv_metric, eps)
                mu = np.log(10.0 * eps)
                s_bar = 0.0
                x_bar = 0.0
                da_count = 0
            win_counter += 1
            if it == n_warmup - 1:
                eps = np.exp(x_bar)
        else:
            k = it - n_warmup
            draws[k, :] = q
            st_depth[k] = depth
            st_leap[k] = n_leap
            st_energy[k] = energy
            st_div[k] = div
            st_bnd[k] = bnd
            st_acc[k] = acc
    return (draws, st_depth, st_leap, st_energy, st_div, st_bnd, st_acc, eps,
            inv_metric, warmup_div, _STATUS_OK)


# ---------------------------------------------------------------------------
# Python surface

def chain_seed(seed: int, *keys: int) -> int:
    """32-bit seed for the kernel RNG, derived from ``seed`` and stream keys."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(k) for k in keys]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def nuts_chain(logpost, init, cfg: SamplerConfig, chain_id: int = 0, args=(),
               attempt: int = 0) -> ChainOutput:
    """Run one chain of warmup plus ``cfg.draws`` retained iterations.

    ``logpost`` must be a numba-jitted ``f(x, args) -> (logp, grad)``.
    """
    init = np.ascontiguousarray(init, dtype=np.float64)
    logp0, grad0 = logpost(init, args)
    if not np.isfinite(logp0):
        raise InitFailure(f"chain {chain_id}: log density is not finite at the initial point")
    if not np.all(np.isfinite(grad0)):
        raise NonFiniteGradient(f"chain {chain_id}: non-finite gradient at the initial point")
    seed = chain_seed(cfg.seed, chain_id, attempt)
    (draws, depth, leap, energy, div, bnd, acc, eps, inv_metric, warm_div,
     status) = _run_chain(logpost, args, init, seed, cfg.warmup, cfg.draws,
                          cfg.target_accept, cfg.max_treedepth,
                          cfg.divergence_energy_threshold)
    if status == _STATUS_BAD_GRAD:
        raise NonFiniteGradient(f"chain {chain_id}: gradient became non-finite at a finite-density point")
    if status == _STATUS_BAD_STEP:
        raise InitFailure(f"chain {chain_id}: step-size initialisation failed (eps={eps})")
    return ChainOutput(chain_id, draws, depth, leap, energy, div, bnd, acc, float(eps),
                       inv_metric, int(warm_div), max(cfg.max_treedepth, 1))


@dataclass
class PosteriorDraws:
    """Cut-point log-OR draws, shape (chains, draws, n_cutpoints).

    ``raw`` maps a fit key (the cut-point for separate logistic fits, else
    ``"joint"``) to the unconstrained draws of that fit.
    """

    theta: np.ndarray
    cutpoints: np.ndarray
    chain_ids: np.ndarray
    raw: dict = field(default_factory=dict)

    @property
    def n_total(self) -> int:
        return self.theta.shape[0] * self.theta.shape[1]

    def flat(self) -> np.ndarray:
        return self.theta.reshape(-1, self.theta.shape[2])


class FitResult(NamedTuple):
    draws: PosteriorDraws
    diagnostics: "DiagnosticsBundle"  # noqa: F821


def _run_chains(spec: ModelSpec, data: OrdinalCounts, cfg: SamplerConfig, attempt: int,
                jobs: int) -> list:
    args = density_args(spec, data)

    def one(chain_id):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & 0xFFFFFFFFFFFFFFFF,
                                                            chain_id, attempt, 1]))
        try:
            init = initial_point(spec, data, rng, jitter=cfg.init_jitter)
        except InitFailure as exc:
            raise InitFailure(f"chain {chain_id}: {exc}") from None
        return nuts_chain(ordinal_logp_grad, init, cfg, chain_id, args, attempt)

    ids = range(cfg.chains)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(one, ids))
    return [one(c) for c in ids]


def _fit_single(spec: ModelSpec, data: OrdinalCounts, cfg: SamplerConfig, jobs: int):
    """Fit one density, escalating once if divergences appear."""
    attempts = []
    chains = _run_chains(spec, data, cfg, 0, jobs)
    n_div = sum(c.n_divergent for c in chains)
    attempts.append((cfg.target_accept, cfg.max_treedepth, n_div))
    escalated = False
    if n_div > 0 and cfg.escalate:
        cfg2 = cfg.escalated()
        chains = _run_chains(spec, data, cfg2, 1, jobs)
        n_div = sum(c.n_divergent for c in chains)
        attempts.append((cfg2.target_accept, cfg2.max_treedepth, n_div))
        escalated = True
    return chains, escalated, attempts


def run_model(spec: ModelSpec, data: OrdinalCounts, cfg: SamplerConfig,
              jobs: int = 1) -> FitResult:
    """Fit ``spec`` to ``data`` and return cut-point log-OR draws with diagnostics.

    A separate-logistic spec without a pinned cut-point runs one binary fit
    per cut-point, each on dichotomized counts with its own seed stream.
    """
    from .diagnostics import diagnose

    if spec.kind == "sep-logistic":
        cuts = [spec.cutpoint] if spec.cutpoint is not None else list(cutpoint_labels(spec.j))
        if data.j != spec.j and not (data.j == 2 and spec.cutpoint is not None):
            raise ValueError(f"data has {data.j} categories, model expects {spec.j}")
        thetas, raw, chain_sets, escalated, attempts = [], {}, [], False, []
        for k in cuts:
            sub = data if data.j == 2 else dichotomize(data, k)
            sub_cfg = replace(cfg, seed=chain_seed(cfg.seed, 0x5E9, k))
            chains, esc, att = _fit_single(spec.for_cutpoint(k), sub, sub_cfg, jobs)
            block = np.stack([c.draws for c in chains])
            raw[int(k)] = block
            thetas.append(block[:, :, 1])
            chain_sets.append(chains)
            escalated |= esc
            attempts.extend((int(k),) + a for a in att)
        theta = np.stack(thetas, axis=-1)
        draws = PosteriorDraws(theta, np.asarray(cuts), np.arange(cfg.chains), raw)
        diag = diagnose(theta, [c for cs in chain_sets for c in cs], cfg,
                        escalated=escalated, attempts=tuple(attempts))
        return FitResult(draws, diag)

    if data.j != spec.j:
        raise ValueError(f"data has {data.j} categories, model expects {spec.j}")
    if spec.kind == "po" and spec.j < 3:
        raise ValueError("the proportional-odds model needs j >= 3; use sep-logistic")
    chains, escalated, attempts = _fit_single(spec, data, cfg, jobs)
    block = np.stack([c.draws for c in chains])
    lay = spec.layout()
    theta = block[:, :, lay.effects] @ spec.design_matrix().T
    draws = PosteriorDraws(theta, cutpoint_labels(spec.j), np.arange(cfg.chains),
                           {"joint": block})
    diag = diagnose(theta, chains, cfg, escalated=escalated, attempts=tuple(attempts))
    return FitResult(draws, diag)


def chains_to_theta(spec: ModelSpec, chains) -> np.ndarray:
    block = np.stack([c.draws for c in chains])
    return block[:, :, spec.layout().effects] @ spec.design_matrix().T
