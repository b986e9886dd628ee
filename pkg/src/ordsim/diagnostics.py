"""Convergence diagnostics and posterior summaries.

All chain-based functions take a ``(chains, draws)`` array for one scalar
quantity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import special, stats

__all__ = [
    "DiagnosticsBundle",
    "PosteriorSummary",
    "split_rhat",
    "ess_bulk",
    "ess_tail",
    "summarize",
    "diagnose",
    "mcse_median",
]


def _as_chains(draws) -> np.ndarray:
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ValueError("expected a (chains, draws) array")
    return x


def _split(x: np.ndarray) -> np.ndarray:
    half = x.shape[1] // 2
    return np.vstack([x[:, :half], x[:, -half:]])


def _rank_normalize(x: np.ndarray) -> np.ndarray:
    """Normal scores of pooled average ranks, offset (r - 3/8) / (S + 1/4)."""
    r = stats.rankdata(x, method="average").reshape(x.shape)
    return special.ndtri((r - 0.375) / (x.size + 0.25))


def _is_constant(x: np.ndarray) -> bool:
    return bool(np.all(x == x.flat[0]))


def _rhat_raw(x: np.ndarray) -> float:
    m, n = x.shape
    means = x.mean(axis=1)
    within = x.var(axis=1, ddof=1).mean()
    between = n * means.var(ddof=1)
    var_plus = (n - 1) / n * within + between / n
    return float(np.sqrt(var_plus / within))


def split_rhat(draws) -> float:
    """Rank-normalized split R-hat; exactly 1 for a constant quantity.

    The sample ratio can dip below 1 when the splits agree closely; the
    reported value is floored at 1.
    """
    x = _as_chains(draws)
    if x.shape[0] < 2 or x.shape[1] < 4:
        raise ValueError("split R-hat needs >= 2 chains with >= 4 draws each")
    if _is_constant(x):
        return 1.0
    return max(1.0, _rhat_raw(_rank_normalize(_split(x))))


def _autocov(x: np.ndarray) -> np.ndarray:
    """Biased autocovariance of each row via FFT."""
    n = x.shape[-1]
    size = 1 << int(np.ceil(np.log2(2 * n)))
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, n=size, axis=-1)
    ac = np.fft.irfft(f * np.conjugate(f), n=size, axis=-1)[..., :n]
    return ac / n


def _ess_raw(x: np.ndarray) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence truncation."""
    m, n = x.shape
    if _is_constant(x):
        return float(m * n)
    acov = _autocov(x)
    chain_mean = x.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1.0)
    var_plus = mean_var * (n - 1.0) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    if var_plus <= 0:
        return float(m * n)
    rho = np.zeros(n)
    mean_acov = acov.mean(axis=0)
    rho_even = 1.0
    rho[0] = rho_even
    rho_odd = 1.0 - (mean_var - mean_acov[1]) / var_plus
    rho[1] = rho_odd
    # initial positive sequence; the last pair is left as a bias term that
    # tames antithetic chains
    s = 1
    while s < n - 4 and rho_even + rho_odd > 0.0:
        rho_even = 1.0 - (mean_var - mean_acov[s + 1]) / var_plus
        rho_odd = 1.0 - (mean_var - mean_acov[s + 2]) / var_plus
        if rho_even + rho_odd >= 0.0:
            rho[s + 1] = rho_even
            rho[s + 2] = rho_odd
        s += 2
    max_s = s
    if rho_even > 0:
        rho[max_s + 1] = rho_even
    # initial monotone sequence
    for s in range(1, max_s - 2, 2):
        if rho[s + 1] + rho[s + 2] > rho[s - 1] + rho[s]:
            rho[s + 1] = (rho[s - 1] + rho[s]) / 2.0
            rho[s + 2] = rho[s + 1]
    total = m * n
    tau = -1.0 + 2.0 * rho[:max_s].sum() + rho[max_s + 1]
    return float(min(total / tau, total * np.log10(total)))


def ess_bulk(draws) -> float:
    x = _as_chains(draws)
    if _is_constant(x):
        return float(x.size)
    return _ess_raw(_rank_normalize(_split(x)))


def _ess_quantile(x: np.ndarray, prob: float) -> float:
    q = np.quantile(x, prob)
    ind = (x <= q).astype(float)
    split = _split(ind)
    if _is_constant(split):
        return float(x.size)
    return _ess_raw(split)


def ess_tail(draws) -> float:
    """Minimum ESS of the 5% and 95% quantile indicators."""
    x = _as_chains(draws)
    if _is_constant(x):
        return float(x.size)
    return min(_ess_quantile(x, 0.05), _ess_quantile(x, 0.95))


class PosteriorSummary(NamedTuple):
    median: float
    ci_low: float
    ci_high: float


def summarize(draws) -> PosteriorSummary:
    """Median and equal-tailed 95% interval (linear interpolation quantiles)."""
    x = np.asarray(draws, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("need at least 2 draws")
    lo, med, hi = np.quantile(x, [0.025, 0.5, 0.975], method="linear")
    return PosteriorSummary(float(med), float(lo), float(hi))


def mcse_median(draws) -> float:
    """Approximate MCSE of the median from the bulk ESS (normal approximation)."""
    x = _as_chains(draws)
    sd = x.std(ddof=1)
    return float(1.2533 * sd / np.sqrt(ess_bulk(x)))


@dataclass
class DiagnosticsBundle:
    """Per-quantity convergence statistics for one fit.

    ``rhat``, ``ess_bulk`` and ``ess_tail`` are arrays over cut-points.
    """

    rhat: np.ndarray
    ess_bulk: np.ndarray
    ess_tail: np.ndarray
    n_divergent: int
    max_treedepth_hits: int
    n_chains: int
    n_boundary: int = 0
    escalated: bool = False
    attempts: tuple = field(default_factory=tuple)

    @property
    def ess_threshold(self) -> float:
        return 100.0 * self.n_chains

    @property
    def converged(self) -> bool:
        return bool(
            np.all(self.rhat < 1.01)
            and np.all(self.ess_bulk >= self.ess_threshold)
            and np.all(self.ess_tail >= self.ess_threshold)
            and self.n_divergent == 0
        )

    @property
    def degraded(self) -> bool:
        """Divergences or an ESS below the per-chain recommendation."""
        return bool(
            self.n_divergent > 0
            or np.any(self.ess_bulk < self.ess_threshold)
            or np.any(self.ess_tail < self.ess_threshold)
        )

    def summary(self) -> dict:
        return {
            "rhat": float(np.max(self.rhat)),
            "ess_bulk": float(np.min(self.ess_bulk)),
            "ess_tail": float(np.min(self.ess_tail)),
            "n_divergent": int(self.n_divergent),
            "max_treedepth_hits": int(self.max_treedepth_hits),
            "converged": self.converged,
        }


def diagnose(theta: np.ndarray, chains, cfg, escalated=False, attempts=()) -> DiagnosticsBundle:
    """Diagnostics for ``theta`` of shape (chains, draws, quantities).

    ``chains`` is every ChainOutput that contributed (several per fit for
    separate logistic models).
    """
    n_q = theta.shape[2]
    rhat = np.empty(n_q)
    bulk = np.empty(n_q)
    tail = np.empty(n_q)
    seen = {}
    for q in range(n_q):
        x = theta[:, :, q]
        key = x.tobytes()
        if key in seen:
            rhat[q], bulk[q], tail[q] = seen[key]
            continue
        vals = (split_rhat(x), ess_bulk(x), ess_tail(x))
        seen[key] = vals
        rhat[q], bulk[q], tail[q] = vals
    return DiagnosticsBundle(
        rhat=rhat,
        ess_bulk=bulk,
        ess_tail=tail,
        n_divergent=int(sum(c.n_divergent for c in chains)),
        max_treedepth_hits=int(sum(int((c.treedepth >= c.max_treedepth).sum()) for c in chains)),
        n_chains=theta.shape[0],
        n_boundary=int(sum(int(c.boundary.sum()) for c in chains)),
        escalated=escalated,
        attempts=attempts,
    )
