"""Control/treatment outcome distributions and simulated two-arm trials."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import special

from .errors import BoundsViolation, InvalidScenario, RejectionExhausted
from .ordcore import OrdinalCounts, cumlogits_from_probs, probs_from_cumlogits

__all__ = [
    "ControlShape",
    "SYMMETRIC",
    "SKEWED",
    "S1",
    "S2",
    "S3",
    "PropScenario",
    "TruePair",
    "discretize_beta",
    "gen_scenario1",
    "gen_scenario2",
    "gen_scenario3",
    "generate_truth",
    "sample_trial",
    "truncnorm_sample",
    "standard_scenarios",
]

REJECTION_CAP = 1_000_000


@dataclass(frozen=True)
class ControlShape:
    name: str
    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("Beta shape parameters must be positive")


SYMMETRIC = ControlShape("symmetric", 1.8, 1.8)
SKEWED = ControlShape("skewed", 1.3, 0.9)
SHAPES = {s.name: s for s in (SYMMETRIC, SKEWED)}


@dataclass(frozen=True)
class S1:
    """Random perturbation of every cut-point log-OR around a common mean."""

    mean_logOR: float
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    kind = "s1"


@dataclass(frozen=True)
class S2:
    """Log-OR linear in the cut-point index: zeta + gamma * (k - 2)."""

    zeta: float = math.log(0.8)
    gamma: float = 0.06

    kind = "s2"


@dataclass(frozen=True)
class S3:
    """Null effect everywhere except the highest cut-point."""

    top_logOR: float

    kind = "s3"


PropScenario = Union[S1, S2, S3]


def standard_scenarios() -> list:
    """The twelve proportionality settings crossed in the full grid."""
    out: list = []
    for odds in (1.0, 1.10, 1.50):
        for sigma in (0.0, 0.05, 0.10):
            out.append(S1(math.log(odds), sigma))
    out.append(S2())
    out.extend(S3(math.log(odds)) for odds in (1.10, 1.50))
    return out


@dataclass(frozen=True)
class TruePair:
    pi0: np.ndarray
    pi1: np.ndarray
    theta_true: np.ndarray

    def check(self, tol: float = 1e-10) -> bool:
        """Re-derive theta from the two simplices."""
        d = cumlogits_from_probs(self.pi1) - cumlogits_from_probs(self.pi0)
        return bool(np.allclose(d, self.theta_true, rtol=0.0, atol=tol))


def discretize_beta(shape: ControlShape, j: int) -> np.ndarray:
    """Bin a Beta(a, b) density into j equal-width categories on [0, 1]."""
    if j < 2:
        raise ValueError("j must be at least 2")
    edges = np.arange(j + 1) / j
    cdf = special.betainc(shape.a, shape.b, edges)
    cdf[0], cdf[-1] = 0.0, 1.0
    return np.diff(cdf)


def _pair_from_theta(pi0: np.ndarray, theta: np.ndarray) -> TruePair:
    alpha = cumlogits_from_probs(pi0)
    if not np.any(theta):
        return TruePair(np.asarray(pi0, float), np.array(pi0, float), np.asarray(theta, float))
    pi1 = probs_from_cumlogits(alpha + theta)
    if not (np.all(pi1 > 0.0) and np.all(np.diff(alpha + theta) < 0.0)):
        raise InvalidScenario("treatment cumulative logits are not strictly decreasing")
    return TruePair(np.asarray(pi0, float), pi1, np.asarray(theta, float))


def gen_scenario1(pi0, s: S1, rng: np.random.Generator) -> TruePair:
    """Draw one log-OR per cut-point around ``s.mean_logOR``.

    The whole vector is redrawn until the treatment cumulative logits stay
    strictly decreasing.
    """
    pi0 = np.asarray(pi0, dtype=float)
    alpha = cumlogits_from_probs(pi0)
    m = alpha.size
    if s.sigma == 0.0:
        return _pair_from_theta(pi0, np.full(m, float(s.mean_logOR)))
    for _ in range(REJECTION_CAP):
        theta = rng.normal(s.mean_logOR, s.sigma, size=m)
        if np.all(np.diff(alpha + theta) < 0.0):
            return _pair_from_theta(pi0, theta)
    raise RejectionExhausted(
        f"no valid theta vector after {REJECTION_CAP} draws (sigma={s.sigma})"
    )


def gen_scenario2(pi0, s: S2) -> TruePair:
    pi0 = np.asarray(pi0, dtype=float)
    m = pi0.size - 1
    theta = s.zeta + s.gamma * np.arange(m, dtype=float)
    return _pair_from_theta(pi0, theta)


def gen_scenario3(pi0, s: S3) -> TruePair:
    pi0 = np.asarray(pi0, dtype=float)
    theta = np.zeros(pi0.size - 1)
    theta[-1] = s.top_logOR
    return _pair_from_theta(pi0, theta)


def generate_truth(pi0, prop: PropScenario, rng: np.random.Generator) -> TruePair:
    if isinstance(prop, S1):
        return gen_scenario1(pi0, prop, rng)
    if isinstance(prop, S2):
        return gen_scenario2(pi0, prop)
    if isinstance(prop, S3):
        return gen_scenario3(pi0, prop)
    raise TypeError(f"unknown scenario type {type(prop).__name__}")


def sample_trial(tp: TruePair, n_obs: int, rng: np.random.Generator) -> OrdinalCounts:
    """Bernoulli(0.5) allocation, then a multinomial draw per arm."""
    if n_obs < 2:
        raise ValueError("n_obs must be at least 2")
    n1 = int(rng.binomial(n_obs, 0.5))
    n0 = n_obs - n1
    # clip rounding noise so the multinomial sees a proper distribution
    p0 = np.clip(tp.pi0, 0.0, None)
    p1 = np.clip(tp.pi1, 0.0, None)
    c0 = rng.multinomial(n0, p0 / p0.sum())
    c1 = rng.multinomial(n1, p1 / p1.sum())
    return OrdinalCounts.from_arms(c0, c1)


def truncnorm_sample(mean, sd, lower, upper, rng: np.random.Generator) -> float:
    """One draw from N(mean, sd^2) restricted to (lower, upper) by inverse CDF."""
    if not lower < upper:
        raise ValueError("lower must be below upper")
    if sd < 0:
        raise ValueError("sd must be non-negative")
    if sd == 0:
        if not lower <= mean <= upper:
            raise BoundsViolation(f"mean {mean} outside ({lower}, {upper})")
        return float(mean)
    a = (lower - mean) / sd
    b = (upper - mean) / sd
    # work in the lower tail for accuracy; reflect when the interval is upper
    flip = a > 0
    if flip:
        a, b = -b, -a
    pa, pb = special.ndtr(a), special.ndtr(b)
    u = rng.uniform(pa, pb)
    z = float(special.ndtri(u))
    z = min(max(z, a), b)
    if flip:
        z = -z
    return float(mean + sd * z)
