"""Data model for stratified bilateral count tables under Dallal's model.

Each patient contributes 0, 1 or 2 responding sites. Within stratum j both
groups share the conditional probability ``gamma_j`` that the second site
responds given the first did; group 1 has per-site response rate ``pi1_j``
and group 2 has ``delta_j * pi1_j``.

Counts are held as arrays of shape ``(..., J, 2, 3)`` indexed by
(stratum, group, number of responding sites). All likelihoods omit the
multinomial coefficient, which cancels in every statistic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import xlogy

__all__ = [
    "ParameterError",
    "DegenerateTableError",
    "StratumCounts",
    "StratifiedTable",
    "ProbTriple",
    "StratumParams",
    "dallal_probs",
    "cell_probs",
    "loglik_stratum",
    "loglik_table",
    "loglik_array",
    "score_stratum",
]

# slack allowed on the feasibility constraints (2 - gamma) * pi <= 1
FEAS_TOL = 1e-12


class ParameterError(ValueError):
    """Parameters outside the Dallal model's feasible region."""


class DegenerateTableError(ValueError):
    """A table that cannot support the requested estimate (no responders, J too small...)."""


@dataclass(frozen=True)
class StratumCounts:
    """Patients with 0/1/2 responding sites in each group of one stratum.

    Group 1 is the reference (denominator of the ratio), group 2 the comparison.
    """

    m0_g1: int
    m1_g1: int
    m2_g1: int
    m0_g2: int
    m1_g2: int
    m2_g2: int

    def __post_init__(self):
        vals = (self.m0_g1, self.m1_g1, self.m2_g1, self.m0_g2, self.m1_g2, self.m2_g2)
        for v in vals:
            if int(v) != v or v < 0:
                raise ValueError(f"counts must be nonnegative integers, got {vals}")
        if self.m0_g1 + self.m1_g1 + self.m2_g1 < 1 or self.m0_g2 + self.m1_g2 + self.m2_g2 < 1:
            raise ValueError(f"each group needs at least one patient, got {vals}")

    @classmethod
    def from_groups(cls, group1: Sequence[int], group2: Sequence[int]) -> "StratumCounts":
        return cls(*(int(v) for v in group1), *(int(v) for v in group2))

    @property
    def group1(self) -> tuple[int, int, int]:
        return (self.m0_g1, self.m1_g1, self.m2_g1)

    @property
    def group2(self) -> tuple[int, int, int]:
        return (self.m0_g2, self.m1_g2, self.m2_g2)

    def as_array(self) -> np.ndarray:
        return np.array([self.group1, self.group2], dtype=float)


@dataclass(frozen=True)
class StratifiedTable:
    """Ordered strata of bilateral counts, with optional stratum labels."""

    strata: tuple[StratumCounts, ...]
    labels: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "strata", tuple(self.strata))
        if len(self.strata) < 1:
            raise ValueError("a table needs at least one stratum")
        if self.labels is not None:
            object.__setattr__(self, "labels", tuple(str(lab) for lab in self.labels))
            if len(self.labels) != len(self.strata):
                raise ValueError("one label per stratum required")

    @classmethod
    def from_array(cls, counts, labels=None) -> "StratifiedTable":
        arr = np.asarray(counts)
        if arr.ndim != 3 or arr.shape[1:] != (2, 3):
            raise ValueError(f"expected counts of shape (J, 2, 3), got {arr.shape}")
        strata = tuple(StratumCounts.from_groups(s[0], s[1]) for s in arr.tolist())
        return cls(strata, labels)

    @property
    def J(self) -> int:
        return len(self.strata)

    def stratum_labels(self) -> tuple[str, ...]:
        if self.labels is not None:
            return self.labels
        return tuple(str(j + 1) for j in range(self.J))

    def counts(self) -> np.ndarray:
        """Counts as a float array of shape (J, 2, 3)."""
        return np.stack([s.as_array() for s in self.strata])

    def permuted(self, order: Sequence[int]) -> "StratifiedTable":
        labels = None if self.labels is None else tuple(self.labels[k] for k in order)
        return StratifiedTable(tuple(self.strata[k] for k in order), labels)


@dataclass(frozen=True)
class ProbTriple:
    p0: float
    p1: float
    p2: float

    def __iter__(self):
        return iter((self.p0, self.p1, self.p2))


@dataclass(frozen=True)
class StratumParams:
    """Per-stratum parameters: group-1 rate, conditional probability, rate ratio."""

    pi1: float
    gamma: float
    delta: float

    def __post_init__(self):
        if not (0.0 < self.pi1 <= 1.0):
            raise ParameterError(f"pi1 must lie in (0, 1], got {self.pi1}")
        if not (0.0 <= self.gamma <= 1.0):
            raise ParameterError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.delta > 0.0:
            raise ParameterError(f"delta must be positive, got {self.delta}")
        s = 2.0 - self.gamma
        if s * self.pi1 > 1.0 + FEAS_TOL or s * self.delta * self.pi1 > 1.0 + FEAS_TOL:
            raise ParameterError(
                f"infeasible parameters: (2-gamma)*pi must not exceed 1 in either group "
                f"(pi1={self.pi1}, gamma={self.gamma}, delta={self.delta})"
            )

    @property
    def pi2(self) -> float:
        return self.delta * self.pi1


def dallal_probs(pi: float, gamma: float) -> ProbTriple:
    """Probabilities of 0, 1 and 2 responding sites for rate ``pi``."""
    if not (0.0 <= pi <= 1.0) or not (0.0 <= gamma <= 1.0):
        raise ParameterError(f"pi and gamma must lie in [0, 1], got pi={pi}, gamma={gamma}")
    p0 = 1.0 - (2.0 - gamma) * pi
    if p0 < -FEAS_TOL:
        raise ParameterError(f"(2-gamma)*pi = {(2.0 - gamma) * pi} exceeds 1")
    return ProbTriple(max(p0, 0.0), 2.0 * pi * (1.0 - gamma), pi * gamma)


def cell_probs(pi, gamma) -> np.ndarray:
    """Vectorized :func:`dallal_probs`; returns shape ``broadcast(pi, gamma) + (3,)``.

    No range checks; p0 is clipped at zero to absorb rounding at the boundary.
    """
    pi = np.asarray(pi, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    p0 = np.maximum(1.0 - (2.0 - gamma) * pi, 0.0)
    return np.stack(np.broadcast_arrays(p0, 2.0 * pi * (1.0 - gamma), pi * gamma), axis=-1)


def loglik_array(counts, pi1, gamma, delta) -> np.ndarray:
    """Log-likelihood kernel per stratum.

    ``counts`` has shape (..., 2, 3); the parameters broadcast against
    ``counts.shape[:-2]``. Zero counts on zero-probability cells contribute 0,
    positive counts on zero-probability cells give -inf.
    """
    counts = np.asarray(counts, dtype=float)
    pi1 = np.asarray(pi1, dtype=float)
    delta = np.asarray(delta, dtype=float)
    p = np.stack([cell_probs(pi1, gamma), cell_probs(delta * pi1, gamma)], axis=-2)
    with np.errstate(divide="ignore"):
        return xlogy(counts, p).sum(axis=(-1, -2))


def loglik_stratum(counts: StratumCounts, params: StratumParams) -> float:
    """Log-likelihood kernel of one stratum; ``-inf`` if a positive count sits on a
    zero-probability cell."""
    return float(loglik_array(counts.as_array(), params.pi1, params.gamma, params.delta))


def loglik_table(table: StratifiedTable, params: Sequence[StratumParams]) -> float:
    """Sum of stratum log-likelihoods; one parameter set per stratum."""
    if len(params) != table.J:
        raise ValueError(f"need {table.J} parameter sets, got {len(params)}")
    total = 0.0
    for counts, par in zip(table.strata, params):
        total += loglik_stratum(counts, par)
    return total


def _safe_ratio(num, den):
    # num / den with 0/0 := 0 (empty cell at a zero-probability boundary)
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den
    return np.where(num == 0.0, 0.0, out)


def score_stratum(counts, delta, pi1, gamma) -> np.ndarray:
    """Analytic gradient of the stratum log-likelihood in (delta, pi1, gamma).

    ``counts`` has shape (..., 2, 3); returns shape (..., 3).
    """
    c = np.asarray(counts, dtype=float)
    d = np.asarray(delta, dtype=float)
    p = np.asarray(pi1, dtype=float)
    g = np.asarray(gamma, dtype=float)
    m01, m11, m21 = c[..., 0, 0], c[..., 0, 1], c[..., 0, 2]
    m02, m12, m22 = c[..., 1, 0], c[..., 1, 1], c[..., 1, 2]
    a = p * (g - 2.0) + 1.0
    b = d * p * (g - 2.0) + 1.0

    d_delta = (m12 + m22) / d + _safe_ratio(m02 * p * (g - 2.0), b)
    d_pi = (
        (m11 + m12 + m21 + m22) / p
        + _safe_ratio(m01 * (g - 2.0), a)
        + _safe_ratio(d * m02 * (g - 2.0), b)
    )
    d_gamma = (
        _safe_ratio(m21 + m22, g)
        + _safe_ratio(m11 + m12, g - 1.0)
        + _safe_ratio(m01 * p, a)
        + _safe_ratio(d * m02 * p, b)
    )
    return np.stack(np.broadcast_arrays(d_delta, d_pi, d_gamma), axis=-1)
