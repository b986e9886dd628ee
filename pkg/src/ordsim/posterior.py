"""Bayesian cumulative-logit models for a two-arm ordinal outcome.

Every model shares one structure: the control arm has cumulative logits
``alpha`` and the treatment arm adds ``design @ effects``, where the design
matrix encodes the model (a column of ones for proportional odds, ones plus an
identity block for the unconstrained partial-PO model, ones plus a fixed
``Gamma`` column for the constrained forms).  ``alpha`` is carried by a
stick-breaking simplex whose Jacobian supplies a flat Dirichlet prior on the
control-arm category probabilities.

Flat parameter layout: ``[u_1 .. u_{j-1} | effects]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numba
import numpy as np

from .errors import InitFailure, ShapeMismatch
from .ordcore import (
    OrdinalCounts,
    _stick_breaking,
    log_sigmoid,
    sigmoid,
    unconstrained_from_simplex,
)

__all__ = [
    "MODEL_LABELS",
    "ModelSpec",
    "Layout",
    "LogDensityResult",
    "ordinal_logp_grad",
    "density_args",
    "log_posterior",
    "cumlogits_for_arm",
    "cutpoint_logORs",
    "baseline_cumlogits",
    "initial_point",
    "default_models",
]

MODEL_LABELS = ("sep-logistic", "po", "ppo-u", "cppo-linear", "cppo-last")
_KINDS = ("sep-logistic", "po", "ppo-u", "cppo")
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class Layout(NamedTuple):
    baseline: slice
    effects: slice
    effect_names: tuple


class LogDensityResult(NamedTuple):
    logp: float
    grad: np.ndarray


@dataclass(frozen=True)
class ModelSpec:
    """One analysis model for an outcome with ``j`` categories.

    ``kind`` is one of ``sep-logistic``, ``po``, ``ppo-u`` or ``cppo``.  For
    ``cppo`` the fixed scalars live in ``gamma`` (length ``j - 1``, first entry
    zero).  A ``sep-logistic`` spec describes the per-cut-point binary models;
    ``cutpoint`` pins a single one, ``None`` means all of them.
    """

    kind: str
    j: int
    gamma: Optional[tuple] = None
    cutpoint: Optional[int] = None
    prior_sd_effect: float = 100.0
    prior_sd_increment: float = 100.0
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.j < 2:
            raise ValueError("j must be at least 2")
        if not (self.prior_sd_effect > 0 and self.prior_sd_increment > 0):
            raise ValueError("prior SDs must be positive")
        if self.kind == "cppo":
            if self.gamma is None or len(self.gamma) != self.j - 1:
                raise ValueError("cppo needs a Gamma vector of length j - 1")
            if self.gamma[0] != 0:
                raise ValueError("Gamma for the first cut-point must be 0")
            object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))
        if self.kind == "sep-logistic" and self.cutpoint is not None:
            if not 2 <= self.cutpoint <= self.j:
                raise ValueError(f"cut-point must lie in 2..{self.j}")

    # -- constructors -----------------------------------------------------
    @classmethod
    def sep_logistic(cls, j, cutpoint=None, **priors):
        return cls("sep-logistic", j, cutpoint=cutpoint, **priors)

    @classmethod
    def po(cls, j, **priors):
        return cls("po", j, **priors)

    @classmethod
    def ppo_u(cls, j, **priors):
        return cls("ppo-u", j, **priors)

    @classmethod
    def cppo(cls, j, gamma, name="cppo", **priors):
        return cls("cppo", j, gamma=tuple(gamma), name=name, **priors)

    @classmethod
    def cppo_linear(cls, j, **priors):
        return cls.cppo(j, np.arange(j - 1, dtype=float), name="cppo-linear", **priors)

    @classmethod
    def cppo_last(cls, j, **priors):
        g = np.zeros(j - 1)
        g[-1] = 1.0
        return cls.cppo(j, g, name="cppo-last", **priors)

    @classmethod
    def from_label(cls, label: str, j: int, **priors) -> "ModelSpec":
        makers = {
            "sep-logistic": cls.sep_logistic,
            "po": cls.po,
            "ppo-u": cls.ppo_u,
            "cppo-linear": cls.cppo_linear,
            "cppo-last": cls.cppo_last,
        }
        if label not in makers:
            raise ValueError(f"unknown model {label!r}; choose from {', '.join(MODEL_LABELS)}")
        return makers[label](j, **priors)

    # -- structure --------------------------------------------------------
    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def fit_j(self) -> int:
        """Category count of the data the density is evaluated on."""
        return 2 if self.kind == "sep-logistic" else self.j

    @property
    def n_effect(self) -> int:
        return {"sep-logistic": 1, "po": 1, "ppo-u": self.j - 1, "cppo": 2}[self.kind]

    @property
    def dim(self) -> int:
        return self.fit_j - 1 + self.n_effect

    def layout(self) -> Layout:
        nb = self.fit_j - 1
        names = {
            "sep-logistic": ("theta",),
            "po": ("beta",),
            "ppo-u": ("zeta",) + tuple(f"gamma_{k}" for k in range(3, self.j + 1)),
            "cppo": ("zeta", "gamma"),
        }[self.kind]
        return Layout(slice(0, nb), slice(nb, nb + self.n_effect), names)

    def design_matrix(self) -> np.ndarray:
        """Map from effects to treatment-arm logit offsets, (fit_j - 1) x n_effect."""
        m = self.fit_j - 1
        if self.kind in ("sep-logistic", "po"):
            return np.ones((m, 1))
        if self.kind == "ppo-u":
            d = np.zeros((m, m))
            d[:, 0] = 1.0
            d[1:, 1:] = np.eye(m - 1)
            return d
        return np.column_stack([np.ones(m), np.asarray(self.gamma)])

    def effect_sds(self) -> np.ndarray:
        sds = np.full(self.n_effect, float(self.prior_sd_increment))
        sds[0] = self.prior_sd_effect
        return sds

    def for_cutpoint(self, k: int) -> "ModelSpec":
        if self.kind != "sep-logistic":
            raise ValueError("only separate-logistic specs split by cut-point")
        return ModelSpec("sep-logistic", self.j, cutpoint=k,
                         prior_sd_effect=self.prior_sd_effect,
                         prior_sd_increment=self.prior_sd_increment)


def default_models(j: int, **priors) -> list:
    return [ModelSpec.from_label(lab, j, **priors) for lab in MODEL_LABELS]


@numba.njit(cache=True, nogil=True, error_model="numpy")
def ordinal_logp_grad(x, args):
    """Log posterior and gradient; ``args = (counts, design, effect_sds)``.

    ``counts`` is a float 2 x J array.  Returns ``(-inf, zeros)`` when any
    implied category probability is non-positive.
    """
    counts, design, eff_sd = args
    J = counts.shape[1]
    km1 = J - 1
    m_eff = design.shape[1]
    dim = x.shape[0]
    grad = np.zeros(dim)

    log_tail = np.empty(km1)
    probs, log_jac = _stick_breaking(x[:km1], log_tail)
    alpha = np.empty(km1)
    inv_1mr = np.empty(km1)
    for i in range(km1):
        one_minus_r = -np.expm1(log_tail[i])
        inv_1mr[i] = 1.0 / one_minus_r
        alpha[i] = log_tail[i] - np.log(one_minus_r)
        if not np.isfinite(alpha[i]):
            return -np.inf, np.zeros(dim)

    off = np.zeros(km1)
    for i in range(km1):
        s = 0.0
        for l in range(m_eff):
            s += design[i, l] * x[km1 + l]
        off[i] = s

    loglik = 0.0
    g_eta = np.zeros((2, km1))
    eta = np.empty(km1)
    for arm in range(2):
        for i in range(km1):
            eta[i] = alpha[i] + off[i] if arm == 1 else alpha[i]
        for i in range(km1 - 1):
            if not eta[i] > eta[i + 1]:
                return -np.inf, np.zeros(dim)
        # lowest category: 1 - sigmoid(eta_0)
        n = counts[arm, 0]
        if n > 0.0:
            loglik += n * log_sigmoid(-eta[0])
            g_eta[arm, 0] -= n * sigmoid(eta[0])
        # interior categories: sigmoid(a) - sigmoid(b) with a > b
        for c in range(1, km1):
            n = counts[arm, c]
            if n > 0.0:
                a = eta[c - 1]
                b = eta[c]
                loglik += n * (log_sigmoid(a) + log_sigmoid(-b) + np.log(-np.expm1(b - a)))
                w = 1.0 / np.expm1(a - b)
                g_eta[arm, c - 1] += n * (sigmoid(-a) + w)
                g_eta[arm, c] -= n * (sigmoid(b) + w)
        # top category: sigmoid(eta_last)
        n = counts[arm, km1]
        if n > 0.0:
            loglik += n * log_sigmoid(eta[km1 - 1])
            g_eta[arm, km1 - 1] += n * sigmoid(-eta[km1 - 1])

    # chain rule into the stick-breaking coordinates:
    # alpha_i depends on u_m (m <= i) through log_tail_i = sum_{m<=i} log(1 - z_m)
    suffix = 0.0
    for m in range(km1 - 1, -1, -1):
        suffix += (g_eta[0, m] + g_eta[1, m]) * inv_1mr[m]
        y = x[m] - np.log(km1 - m)
        z = sigmoid(y)
        grad[m] = -z * suffix + 1.0 - 2.0 * z - z * (km1 - 1 - m)

    logprior = 0.0
    for l in range(m_eff):
        e = x[km1 + l]
        sd = eff_sd[l]
        logprior += -0.5 * (e / sd) ** 2 - np.log(sd) - _HALF_LOG_2PI
        s = 0.0
        for i in range(km1):
            s += design[i, l] * g_eta[1, i]
        grad[km1 + l] = s - e / (sd * sd)

    return loglik + log_jac + logprior, grad


def _check(spec: ModelSpec, p, data: Optional[OrdinalCounts] = None) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size != spec.dim:
        raise ShapeMismatch(f"{spec.label} expects {spec.dim} parameters, got {p.shape}")
    if data is not None and data.j != spec.fit_j:
        raise ShapeMismatch(
            f"{spec.label} expects data with {spec.fit_j} categories, got {data.j}"
        )
    return p


def density_args(spec: ModelSpec, data: OrdinalCounts) -> tuple:
    """Argument tuple for :func:`ordinal_logp_grad`."""
    if data.j != spec.fit_j:
        raise ShapeMismatch(
            f"{spec.label} expects data with {spec.fit_j} categories, got {data.j}"
        )
    return (
        np.ascontiguousarray(data.counts, dtype=np.float64),
        np.ascontiguousarray(spec.design_matrix()),
        np.ascontiguousarray(spec.effect_sds()),
    )


def log_posterior(spec: ModelSpec, p, data: OrdinalCounts) -> LogDensityResult:
    p = _check(spec, p, data)
    logp, grad = ordinal_logp_grad(p, density_args(spec, data))
    return LogDensityResult(float(logp), grad)


def baseline_cumlogits(spec: ModelSpec, p) -> np.ndarray:
    """Control-arm cumulative logits alpha_k, k = 2..fit_j."""
    p = _check(spec, p)
    u = p[spec.layout().baseline]
    log_tail = np.empty(u.size)
    _stick_breaking(u, log_tail)
    return log_tail - np.log(-np.expm1(log_tail))


def cumlogits_for_arm(spec: ModelSpec, p, arm: int) -> np.ndarray:
    if arm not in (0, 1):
        raise ValueError("arm must be 0 or 1")
    alpha = baseline_cumlogits(spec, p)
    if arm == 0:
        return alpha
    return alpha + cutpoint_logORs(spec, p)


def cutpoint_logORs(spec: ModelSpec, p) -> np.ndarray:
    p = _check(spec, p)
    return spec.design_matrix() @ p[spec.layout().effects]


def initial_point(spec: ModelSpec, data: OrdinalCounts, rng: np.random.Generator,
                  jitter: float = 1.0, max_tries: int = 100) -> np.ndarray:
    """Smoothed pooled frequencies for the baseline, zero effects, plus jitter.

    Jitter is halved after every ten rejected attempts so that narrow feasible
    regions (many sparse categories under the unconstrained model) are still
    reachable within ``max_tries``.
    """
    pooled = data.counts.sum(axis=0) + 0.5
    base = np.zeros(spec.dim)
    base[spec.layout().baseline] = unconstrained_from_simplex(pooled / pooled.sum())
    args = density_args(spec, data)
    for attempt in range(max_tries):
        scale = jitter * 0.5 ** (attempt // 10)
        x = base + rng.uniform(-scale, scale, size=spec.dim) if scale > 0 else base.copy()
        logp, grad = ordinal_logp_grad(x, args)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return x
    raise InitFailure(f"{spec.label}: no finite starting point after {max_tries} tries")
