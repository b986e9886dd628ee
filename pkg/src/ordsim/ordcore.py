"""Ordinal-outcome building blocks.

Cumulative logits are oriented as ``eta[k-2] = logit P(Y >= k)`` for
cut-points ``k = 2..j``, so valid vectors are strictly decreasing.  Simplices
and cumulative-logit vectors are plain 1-d float arrays; ``OrdinalCounts`` is
the only container type.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .errors import DegenerateTail, ShapeMismatch

__all__ = [
    "OrdinalCounts",
    "sigmoid",
    "log_sigmoid",
    "probs_from_cumlogits",
    "cumlogits_from_probs",
    "simplex_from_unconstrained",
    "unconstrained_from_simplex",
    "dichotomize",
    "cutpoint_labels",
]


@dataclass(frozen=True)
class OrdinalCounts:
    """Per-arm category counts; row 0 is control, row 1 treatment."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.array(self.counts, dtype=np.int64, copy=True)
        if c.ndim != 2 or c.shape[0] != 2:
            raise ShapeMismatch(f"counts must be 2 x j, got shape {c.shape}")
        if c.shape[1] < 2:
            raise ShapeMismatch("need at least 2 categories")
        if (c < 0).any():
            raise ValueError("counts must be non-negative")
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @classmethod
    def from_arms(cls, control, treatment) -> "OrdinalCounts":
        return cls(np.vstack([np.asarray(control), np.asarray(treatment)]))

    @classmethod
    def empty(cls, j: int) -> "OrdinalCounts":
        return cls(np.zeros((2, j), dtype=np.int64))

    @property
    def j(self) -> int:
        return self.counts.shape[1]

    @property
    def arm_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    def validate_nonempty_arms(self):
        """Raise if either arm has no observations."""
        if (self.arm_totals == 0).any():
            raise ValueError("each arm needs at least one observation")

    def __eq__(self, other):
        if not isinstance(other, OrdinalCounts):
            return NotImplemented
        return np.array_equal(self.counts, other.counts)

    def __hash__(self):
        return hash(self.counts.tobytes())


def cutpoint_labels(j: int) -> np.ndarray:
    """Cut-point labels ``2..j`` matching 0-based storage positions."""
    return np.arange(2, j + 1)


# Scalar kernels, shared with the jitted density in ``posterior``.

@numba.njit(cache=True, nogil=True, error_model="numpy")
def sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@numba.njit(cache=True, nogil=True, error_model="numpy")
def log_sigmoid(x):
    # log(1 / (1 + exp(-x))) without overflow for |x| up to ~700 and beyond
    if x >= 0.0:
        return -np.log1p(np.exp(-x))
    return x - np.log1p(np.exp(x))


@numba.njit(cache=True, nogil=True, error_model="numpy")
def _stick_breaking(u, out_log_tail):
    """Centered stick-breaking; fills log P(Y >= k) for k = 2..K.

    Returns (probs, log_jacobian).  ``out_log_tail[m]`` holds the log of the
    stick remaining after ``m + 1`` breaks.
    """
    km1 = u.shape[0]
    K = km1 + 1
    probs = np.empty(K)
    log_rem = 0.0
    log_jac = 0.0
    for m in range(km1):
        y = u[m] - np.log(K - 1.0 - m)
        log_z = log_sigmoid(y)
        log_1mz = log_sigmoid(-y)
        probs[m] = np.exp(log_rem + log_z)
        log_jac += log_z + log_1mz + log_rem
        log_rem += log_1mz
        out_log_tail[m] = log_rem
    probs[km1] = np.exp(log_rem)
    return probs, log_jac


def sigmoid_array(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def probs_from_cumlogits(eta) -> np.ndarray:
    """Category probabilities from decreasing cumulative logits.

    Non-monotone input yields negative entries; callers decide whether that
    is an error.
    """
    eta = np.atleast_1d(np.asarray(eta, dtype=float))
    c = np.concatenate([[1.0], sigmoid_array(eta), [0.0]])
    return c[:-1] - c[1:]


def cumlogits_from_probs(p) -> np.ndarray:
    p = np.atleast_1d(np.asarray(p, dtype=float))
    if p.ndim != 1 or p.size < 2:
        raise ShapeMismatch("need a 1-d probability vector with j >= 2")
    # tail sums P(Y >= k), k = 2..j, accumulated from the top for accuracy
    tail = np.cumsum(p[::-1])[::-1][1:]
    head = np.cumsum(p)[:-1]
    bad = (tail <= 0.0) | (head <= 0.0)
    if bad.any():
        k = int(np.flatnonzero(bad)[0]) + 2
        raise DegenerateTail(f"P(Y >= {k}) is 0 or 1; logit undefined")
    return np.log(tail) - np.log(head)


def simplex_from_unconstrained(u) -> tuple[np.ndarray, float]:
    """Map ``u`` in R^(j-1) to the open simplex; returns (probs, log|J|).

    Under a Dirichlet(1, ..., 1) target the whole log prior contribution of
    the baseline block is ``log|J|``.
    """
    u = np.atleast_1d(np.asarray(u, dtype=float))
    probs, log_jac = _stick_breaking(u, np.empty(u.size))
    return probs, float(log_jac)


def unconstrained_from_simplex(p) -> np.ndarray:
    """Inverse of :func:`simplex_from_unconstrained` for interior points."""
    p = np.asarray(p, dtype=float)
    K = p.size
    u = np.empty(K - 1)
    rem = 1.0
    for m in range(K - 1):
        z = p[m] / rem
        if not 0.0 < z < 1.0:
            raise DegenerateTail("simplex point is on the boundary")
        u[m] = np.log(z) - np.log1p(-z) + np.log(K - 1.0 - m)
        rem -= p[m]
    return u


def dichotomize(counts: OrdinalCounts, k: int) -> OrdinalCounts:
    """Collapse to {< k, >= k}; the second column is the event."""
    j = counts.j
    if not 2 <= k <= j:
        raise ValueError(f"cut-point must lie in 2..{j}, got {k}")
    c = counts.counts
    below = c[:, : k - 1].sum(axis=1)
    above = c[:, k - 1 :].sum(axis=1)
    return OrdinalCounts(np.column_stack([below, above]))
