"""Homogeneity tests of the rate ratio across strata.

Three statistics, each referred to a chi-square with J - 1 degrees of freedom:

* likelihood ratio ``T_L = 2 * (l_global - l_constrained)``;
* score ``T_SC = sum_j U_j**2 * [I_j^-1]_11`` with the delta-score ``U_j`` and
  the 3x3 expected information ``I_j`` of (delta, pi1_j, gamma_j), all at the
  constrained fit;
* Wald ``T_W = (C b)' (C I_W^-1 C')^-1 (C b)`` at the global fit, where ``C``
  contrasts delta_1 with every other delta_j over the interleaved parameter
  vector ``b = (delta_1, pi1_1, gamma_1, ..., delta_J, pi1_J, gamma_J)``.

Information entries have denominators that vanish when a cell probability
does; those are clamped to ``clamp_eps`` in magnitude so boundary fits give
finite statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import NamedTuple

import numpy as np
from scipy.optimize import brentq

from .estimation import (
    ConstrainedFit,
    GlobalFit,
    fisher_scoring_delta,
    fit_constrained_arrays,
    global_fit,
    global_fit_arrays,
)
from .model import DegenerateTableError, StratifiedTable, StratumCounts, loglik_array, score_stratum
from .numeric import regularized_gamma_q

__all__ = [
    "SingularInformationError",
    "InfoMatrix3",
    "TestResult",
    "HomogeneityReport",
    "info_matrix",
    "info_matrix_array",
    "observed_hessian",
    "invert3",
    "invert3_array",
    "contrast_matrix",
    "lrt_test",
    "score_test",
    "wald_test",
    "homogeneity_tests",
    "statistics_batch",
    "chisq_sf",
    "chisq_quantile",
    "METHODS",
]

METHODS = ("LRT", "Score", "Wald")
CLAMP_EPS = 1e-12
# |D| below this fraction of I11*I22*I33 means the float determinant is mostly
# cancellation (a clamped cell contributes a near rank-one term of size n/eps)
CANCELLATION_RTOL = 1e-6


class SingularInformationError(ArithmeticError):
    pass


# ------------------------------------------------------------------ #
# information matrices
# ------------------------------------------------------------------ #


def _clamp_pos(x, eps):
    # denominators that are nonnegative on the feasible region
    return np.maximum(x, eps)


def info_matrix_array(n1, n2, delta, pi1, gamma, clamp_eps: float = CLAMP_EPS) -> np.ndarray:
    """Expected information of (delta, pi1, gamma) for one stratum, shape (..., 3, 3).

    ``n1``, ``n2`` are the group sizes. The cell-probability factors
    ``pi1*(gamma-2) + 1``, ``delta*pi1*(gamma-2) + 1``, ``gamma`` and
    ``1 - gamma`` are kept at least ``clamp_eps`` away from zero.
    """
    n1 = np.asarray(n1, dtype=float)
    n2 = np.asarray(n2, dtype=float)
    d = np.asarray(delta, dtype=float)
    p = np.asarray(pi1, dtype=float)
    g = np.asarray(gamma, dtype=float)
    A = _clamp_pos(p * (g - 2.0) + 1.0, clamp_eps)
    B = _clamp_pos(d * p * (g - 2.0) + 1.0, clamp_eps)
    Bm = -B  # pi1*(2*delta - delta*gamma) - 1
    gd = _clamp_pos(g, clamp_eps)
    g1 = -_clamp_pos(1.0 - g, clamp_eps)  # gamma - 1

    i11 = n2 / (d**2 * B) - n2 / d**2
    i12 = -n2 * (g - 2.0) / B
    i13 = -n2 * p / B
    i22 = n1 * (g - 2.0) ** 2 / A - (g - 2.0) * (n1 + d * n2) / p - d**2 * n2 * (g - 2.0) ** 2 / Bm
    i23 = d * n2 / Bm - n1 / A
    i33 = (
        n1 * p / gd
        - 2.0 * n1 * p / g1
        + n1 * p**2 / A
        + d**2 * n2 * p**2 / B
        + d * n2 * p / gd
        - 2.0 * d * n2 * p / g1
    )
    i11, i12, i13, i22, i23, i33 = np.broadcast_arrays(i11, i12, i13, i22, i23, i33)
    return np.stack(
        [
            np.stack([i11, i12, i13], axis=-1),
            np.stack([i12, i22, i23], axis=-1),
            np.stack([i13, i23, i33], axis=-1),
        ],
        axis=-2,
    )


@dataclass(frozen=True)
class InfoMatrix3:
    """Symmetric expected information for (delta, pi1_j, gamma_j)."""

    I11: float
    I12: float
    I13: float
    I22: float
    I23: float
    I33: float

    @classmethod
    def from_array(cls, m) -> "InfoMatrix3":
        m = np.asarray(m, dtype=float)
        return cls(m[0, 0], m[0, 1], m[0, 2], m[1, 1], m[1, 2], m[2, 2])

    def as_array(self) -> np.ndarray:
        return np.array(
            [
                [self.I11, self.I12, self.I13],
                [self.I12, self.I22, self.I23],
                [self.I13, self.I23, self.I33],
            ]
        )


def info_matrix(counts: StratumCounts, delta: float, pi1: float, gamma: float,
                clamp_eps: float = CLAMP_EPS) -> InfoMatrix3:
    if not delta > 0 or not 0 < pi1 <= 1 or not 0 <= gamma <= 1:
        raise ValueError(f"invalid parameters delta={delta}, pi1={pi1}, gamma={gamma}")
    if (2.0 - gamma) * pi1 * max(1.0, delta) > 1.0 + 1e-12:
        raise ValueError(f"infeasible parameters delta={delta}, pi1={pi1}, gamma={gamma}")
    if not clamp_eps > 0:
        raise ValueError("clamp_eps must be positive")
    n1 = sum(counts.group1)
    n2 = sum(counts.group2)
    return InfoMatrix3.from_array(info_matrix_array(n1, n2, delta, pi1, gamma, clamp_eps))


def observed_hessian(counts, delta, pi1, gamma) -> np.ndarray:
    """Second derivatives of the stratum log-likelihood in (delta, pi1, gamma).

    ``counts`` (..., 2, 3); returns (..., 3, 3). Terms with a zero count on a
    zero denominator are dropped.
    """
    c = np.asarray(counts, dtype=float)
    d = np.asarray(delta, dtype=float)
    p = np.asarray(pi1, dtype=float)
    g = np.asarray(gamma, dtype=float)
    m01, m11, m21 = c[..., 0, 0], c[..., 0, 1], c[..., 0, 2]
    m02, m12, m22 = c[..., 1, 0], c[..., 1, 1], c[..., 1, 2]
    A = p * (g - 2.0) + 1.0
    B = d * p * (g - 2.0) + 1.0
    with np.errstate(divide="ignore", invalid="ignore"):
        def z(num, den):
            return np.where(num == 0.0, 0.0, num / den)

        h11 = -(m12 + m22) / d**2 - z(m02 * p**2 * (g - 2.0) ** 2, B**2)
        h12 = z(m02 * (g - 2.0), B) - z(d * m02 * p * (g - 2.0) ** 2, B**2)
        h13 = z(m02 * p, B) - z(d * m02 * p**2 * (g - 2.0), B**2)
        h22 = (
            -(m11 + m12 + m21 + m22) / p**2
            - z(m01 * (g - 2.0) ** 2, A**2)
            - z(d**2 * m02 * (g - 2.0) ** 2, B**2)
        )
        h23 = z(m01, A**2) + z(d * m02, B**2)
        h33 = (
            -z(m21 + m22, g**2)
            - z(m11 + m12, (g - 1.0) ** 2)
            - z(m01 * p**2, A**2)
            - z(d**2 * m02 * p**2, B**2)
        )
    h11, h12, h13, h22, h23, h33 = np.broadcast_arrays(h11, h12, h13, h22, h23, h33)
    return np.stack(
        [
            np.stack([h11, h12, h13], axis=-1),
            np.stack([h12, h22, h23], axis=-1),
            np.stack([h13, h23, h33], axis=-1),
        ],
        axis=-2,
    )


def _det3(I):
    return (
        I[..., 0, 0] * I[..., 1, 1] * I[..., 2, 2]
        - I[..., 0, 0] * I[..., 1, 2] * I[..., 2, 1]
        - I[..., 0, 1] * I[..., 1, 0] * I[..., 2, 2]
        + I[..., 0, 1] * I[..., 1, 2] * I[..., 2, 0]
        + I[..., 0, 2] * I[..., 1, 0] * I[..., 2, 1]
        - I[..., 0, 2] * I[..., 1, 1] * I[..., 2, 0]
    )


def _adjugate3(I):
    a11 = I[..., 1, 1] * I[..., 2, 2] - I[..., 1, 2] * I[..., 2, 1]
    a12 = -(I[..., 0, 1] * I[..., 2, 2] - I[..., 0, 2] * I[..., 2, 1])
    a13 = I[..., 0, 1] * I[..., 1, 2] - I[..., 0, 2] * I[..., 1, 1]
    a21 = -(I[..., 1, 0] * I[..., 2, 2] - I[..., 1, 2] * I[..., 2, 0])
    a22 = I[..., 0, 0] * I[..., 2, 2] - I[..., 0, 2] * I[..., 2, 0]
    a23 = -(I[..., 0, 0] * I[..., 1, 2] - I[..., 0, 2] * I[..., 1, 0])
    a31 = I[..., 1, 0] * I[..., 2, 1] - I[..., 1, 1] * I[..., 2, 0]
    a32 = -(I[..., 0, 0] * I[..., 2, 1] - I[..., 0, 1] * I[..., 2, 0])
    a33 = I[..., 0, 0] * I[..., 1, 1] - I[..., 0, 1] * I[..., 1, 0]
    return np.stack(
        [
            np.stack([a11, a12, a13], axis=-1),
            np.stack([a21, a22, a23], axis=-1),
            np.stack([a31, a32, a33], axis=-1),
        ],
        axis=-2,
    )


def _exact_adjugate(m: np.ndarray) -> tuple[np.ndarray, float]:
    # same formulas on the exact rational values of the float entries
    q = np.array([[Fraction(float(x)) for x in row] for row in m], dtype=object)
    D = _det3(q)
    if D == 0:
        return np.full((3, 3), np.nan), 0.0
    return np.array((_adjugate3(q) / D).tolist(), dtype=float), float(D)


def invert3_array(I) -> tuple[np.ndarray, np.ndarray]:
    """Adjugate-over-determinant inverse of a stack of 3x3 matrices; returns (inverse, D).

    Matrices whose determinant cancels badly in floating point are redone in
    exact rational arithmetic on the same entries.
    """
    I = np.asarray(I, dtype=float)
    D = _det3(I)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = _adjugate3(I) / D[..., None, None]
        scale = np.abs(I[..., 0, 0] * I[..., 1, 1] * I[..., 2, 2])
        redo = ~(np.abs(D) > CANCELLATION_RTOL * scale) & np.all(np.isfinite(I), axis=(-1, -2))
    if np.any(redo):
        inv = inv.copy()
        D = np.array(D, dtype=float, copy=True)
        for idx in zip(*np.nonzero(redo)) if redo.ndim else [()]:
            inv[idx], D[idx] = _exact_adjugate(I[idx])
    return inv, D


def invert3(info: InfoMatrix3 | np.ndarray) -> tuple[np.ndarray, float]:
    """Inverse of one 3x3 information matrix and its determinant ``D``."""
    m = info.as_array() if isinstance(info, InfoMatrix3) else np.asarray(info, dtype=float)
    inv, D = invert3_array(m)
    D = float(D)
    if not abs(D) > 1e-300:
        raise SingularInformationError(f"information matrix is singular (D = {D})")
    return inv, D


def _inverse11(I):
    # [I^-1]_11 = (I22*I33 - I23*I32) / D
    return invert3_array(I)[0][..., 0, 0]


# ------------------------------------------------------------------ #
# chi-square reference distribution
# ------------------------------------------------------------------ #


def chisq_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution, ``Q(df/2, x/2)``."""
    if df < 1 or int(df) != df:
        raise ValueError(f"df must be a positive integer, got {df}")
    if not x >= 0:
        raise ValueError(f"x must be nonnegative, got {x}")
    return regularized_gamma_q(df / 2.0, x / 2.0)


@lru_cache(maxsize=256)
def chisq_quantile(q: float, df: int) -> float:
    """``x`` with ``P(X <= x) = q`` for X ~ chi-square(df), by bracketed root finding."""
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    if df < 1 or int(df) != df:
        raise ValueError(f"df must be a positive integer, got {df}")
    target = 1.0 - q
    hi = max(1.0, 2.0 * df)
    while chisq_sf(hi, df) > target:
        hi *= 2.0
    return brentq(lambda x: chisq_sf(x, df) - target, 0.0, hi, xtol=1e-12, rtol=4 * np.finfo(float).eps)


# ------------------------------------------------------------------ #
# test statistics
# ------------------------------------------------------------------ #


@dataclass(frozen=True)
class TestResult:
    method: str
    statistic: float
    df: int
    p_value: float
    fit: dict = field(default_factory=dict, compare=False)


def _result(method, stat, df, fit):
    stat = float(stat)
    if stat < 0.0:
        stat = 0.0
    return TestResult(method, stat, df, chisq_sf(stat, df), fit)


def _require_strata(table: StratifiedTable) -> int:
    if table.J < 2:
        raise DegenerateTableError(f"df = 0: homogeneity test undefined for J = {table.J}")
    return table.J - 1


def lrt_test(table: StratifiedTable, gfit: GlobalFit | None = None,
             cfit: ConstrainedFit | None = None) -> TestResult:
    df = _require_strata(table)
    gfit = gfit or global_fit(table)
    cfit = cfit or fisher_scoring_delta(table)
    stat = 2.0 * (gfit.loglik - cfit.loglik)
    return _result("LRT", stat, df, {"delta_hat": cfit.delta_hat})


def score_test(table: StratifiedTable, cfit: ConstrainedFit | None = None,
               clamp_eps: float = CLAMP_EPS) -> TestResult:
    df = _require_strata(table)
    cfit = cfit or fisher_scoring_delta(table)
    stat = 0.0
    for counts, pi1, gamma in zip(table.strata, cfit.pi1_hat, cfit.gamma_hat):
        u = score_stratum(counts.as_array(), cfit.delta_hat, pi1, gamma)[0]
        info = info_matrix(counts, cfit.delta_hat, pi1, gamma, clamp_eps)
        inv, _ = invert3(info)
        stat += u * u * inv[0, 0]
    return _result("Score", stat, df, {"delta_hat": cfit.delta_hat})


def contrast_matrix(J: int) -> np.ndarray:
    """(J-1) x 3J contrasts delta_1 - delta_k over the interleaved parameter vector."""
    C = np.zeros((J - 1, 3 * J))
    C[:, 0] = 1.0
    for k in range(1, J):
        C[k - 1, 3 * k] = -1.0
    return C


def wald_test(table: StratifiedTable, gfit: GlobalFit | None = None,
              clamp_eps: float = CLAMP_EPS) -> TestResult:
    df = _require_strata(table)
    gfit = gfit or global_fit(table)
    J = table.J
    beta = np.empty(3 * J)
    inv_blocks = np.zeros((3 * J, 3 * J))
    for j, counts in enumerate(table.strata):
        d, p, g = gfit.delta_tilde[j], gfit.pi1_tilde[j], gfit.gamma_tilde[j]
        beta[3 * j: 3 * j + 3] = (d, p, g)
        inv, _ = invert3(info_matrix(counts, d, p, g, clamp_eps))
        inv_blocks[3 * j: 3 * j + 3, 3 * j: 3 * j + 3] = inv
    C = contrast_matrix(J)
    cb = C @ beta
    cov = C @ inv_blocks @ C.T
    try:
        stat = float(cb @ np.linalg.solve(cov, cb))
    except np.linalg.LinAlgError as exc:
        raise SingularInformationError(f"contrast covariance is singular: {exc}") from exc
    return _result("Wald", stat, df, {"delta_tilde": list(gfit.delta_tilde)})


@dataclass(frozen=True)
class HomogeneityReport:
    global_fit: GlobalFit
    constrained_fit: ConstrainedFit
    results: dict[str, TestResult]


def homogeneity_tests(table: StratifiedTable, methods=METHODS,
                      clamp_eps: float = CLAMP_EPS) -> HomogeneityReport:
    """Fit both models once and run the requested tests."""
    _require_strata(table)
    gfit = global_fit(table)
    cfit = fisher_scoring_delta(table)
    results = {}
    for m in methods:
        if m == "LRT":
            results[m] = lrt_test(table, gfit, cfit)
        elif m == "Score":
            results[m] = score_test(table, cfit, clamp_eps)
        elif m == "Wald":
            results[m] = wald_test(table, gfit, clamp_eps)
        else:
            raise ValueError(f"unknown method {m!r}")
    return HomogeneityReport(gfit, cfit, results)


# ------------------------------------------------------------------ #
# batched statistics for simulation
# ------------------------------------------------------------------ #


class BatchStatistics(NamedTuple):
    stats: np.ndarray  # (R, 3): T_L, T_SC, T_W
    converged: np.ndarray  # (R,)


def _wald_from_variances(delta, v):
    # quadratic form with C I^-1 C' = v_1 * 11' + diag(v_2, ..., v_J)
    cb = delta[:, :1] - delta[:, 1:]
    J1 = cb.shape[1]
    cov = v[:, :1, None] * np.ones((1, J1, J1)) + v[:, 1:, None] * np.eye(J1)
    sol = np.linalg.solve(cov, cb[..., None])[..., 0]
    return np.einsum("rk,rk->r", cb, sol)


def statistics_batch(counts, clamp_eps: float = CLAMP_EPS) -> BatchStatistics:
    """All three statistics for a batch of nondegenerate tables (R, J, 2, 3)."""
    c = np.asarray(counts, dtype=float)
    n1 = c[..., 0, :].sum(axis=-1)
    n2 = c[..., 1, :].sum(axis=-1)

    gp, gg, gd = global_fit_arrays(c)
    ll_global = loglik_array(c, gp, gg, gd).sum(axis=-1)
    con = fit_constrained_arrays(c)

    t_l = 2.0 * (ll_global - con.loglik)

    dh = con.delta[:, None]
    u = score_stratum(c, dh, con.pi1, con.gamma)[..., 0]
    v_con = _inverse11(info_matrix_array(n1, n2, dh, con.pi1, con.gamma, clamp_eps))
    t_sc = (u * u * v_con).sum(axis=-1)

    v_glob = _inverse11(info_matrix_array(n1, n2, gd, gp, gg, clamp_eps))
    t_w = _wald_from_variances(gd, v_glob)

    stats = np.stack([t_l, t_sc, t_w], axis=1)
    stats = np.where(stats < 0.0, 0.0, stats)
    return BatchStatistics(stats, con.converged)
