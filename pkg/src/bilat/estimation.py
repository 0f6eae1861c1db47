"""Maximum-likelihood fits with and without a common rate ratio.

The *global* fit gives every stratum its own ratio ``delta_j`` and has closed
forms. The *constrained* fit imposes one common ``delta``: ``gamma_j`` keeps
its closed form, ``pi1_j`` solves a quadratic for given ``delta``, and
``delta`` itself is found by Fisher scoring on the profile likelihood.

The array functions take counts of shape ``(..., J, 2, 3)`` so the Monte
Carlo engine can fit many tables in one pass; the scalar API wraps them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .model import (
    DegenerateTableError,
    StratifiedTable,
    StratumCounts,
    StratumParams,
    loglik_array,
    loglik_stratum,
)
from .numeric import solve_quadratic

__all__ = [
    "NoFeasibleSolutionError",
    "GlobalFit",
    "ConstrainedFit",
    "gamma_mle",
    "global_mle",
    "global_fit",
    "constrained_pi1",
    "fisher_scoring_delta",
    "degenerate_mask",
    "gamma_hat_array",
    "global_fit_arrays",
    "constrained_pi1_array",
    "initial_delta",
    "profile_loglik",
    "profile_score_info",
    "fit_constrained_arrays",
    "INTERIOR",
    "BOUNDARY_G1",
    "BOUNDARY_G2",
]

INTERIOR, BOUNDARY_G1, BOUNDARY_G2 = 0, 1, 2

DELTA_FLOOR = 1e-3
MAX_HALVINGS = 40
# a stationary root this close to pi_max is the boundary itself: with the
# blocking group's m0 = 0 the cleared quadratic has pi_max as a spurious root
BOUNDARY_RTOL = 1e-10


class NoFeasibleSolutionError(ArithmeticError):
    """No admissible root for pi1 where one must exist (numerical fault)."""


@dataclass(frozen=True)
class GlobalFit:
    pi1_tilde: tuple[float, ...]
    gamma_tilde: tuple[float, ...]
    delta_tilde: tuple[float, ...]
    loglik: float

    def params(self) -> list[StratumParams]:
        return [StratumParams(p, g, d) for p, g, d in zip(self.pi1_tilde, self.gamma_tilde, self.delta_tilde)]


@dataclass(frozen=True)
class ConstrainedFit:
    delta_hat: float
    pi1_hat: tuple[float, ...]
    gamma_hat: tuple[float, ...]
    loglik: float
    iterations: int
    converged: bool
    boundary_strata: frozenset[int]

    def params(self) -> list[StratumParams]:
        return [StratumParams(p, g, self.delta_hat) for p, g in zip(self.pi1_hat, self.gamma_hat)]


# ------------------------------------------------------------------ #
# array core
# ------------------------------------------------------------------ #


def _split(counts):
    c = np.asarray(counts, dtype=float)
    return (c[..., 0, 0], c[..., 0, 1], c[..., 0, 2]), (c[..., 1, 0], c[..., 1, 1], c[..., 1, 2])


def degenerate_mask(counts) -> np.ndarray:
    """True for tables (leading dims of ``(..., J, 2, 3)``) with a responder-free group."""
    c = np.asarray(counts)
    responders = c[..., 1] + c[..., 2]
    return np.any(responders == 0, axis=(-1, -2))


def gamma_hat_array(counts) -> np.ndarray:
    """``2*M2 / (M1 + 2*M2)`` per stratum, with M_l pooled over both groups."""
    c = np.asarray(counts, dtype=float)
    m1 = c[..., 0, 1] + c[..., 1, 1]
    m2 = c[..., 0, 2] + c[..., 1, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        return 2.0 * m2 / (m1 + 2.0 * m2)


def global_fit_arrays(counts):
    """Closed-form per-stratum MLEs ``(pi1, gamma, delta)``; NaN/inf on degenerate strata."""
    (m01, m11, m21), (m02, m12, m22) = _split(counts)
    M1 = m11 + m12
    M2 = m21 + m22
    with np.errstate(divide="ignore", invalid="ignore"):
        pi1 = (m11 + m21) * (m11 + m12 + 2.0 * m21 + 2.0 * m22) / (
            2.0 * (m01 + m11 + m21) * (m11 + m12 + m21 + m22)
        )
        gamma = 2.0 * M2 / (M1 + 2.0 * M2)
        delta = -(m12 + m22) * (m01 - m12 + M1 - m22 + M2) / ((m02 + m12 + m22) * (m12 - M1 + m22 - M2))
    return pi1, gamma, delta


def constrained_pi1_array(counts, delta, gamma):
    """Maximizer of the stratum likelihood over pi1 at fixed (delta, gamma).

    Clearing denominators in the pi1 stationarity equation gives
    ``a*pi**2 + b*pi + c = 0`` with ``a = s**2*delta*N``,
    ``b = -s*(A*(1+delta) + m01 + m02*delta)``, ``c = A`` (``s = 2-gamma``,
    A responders, N patients). The stationarity function is decreasing on the
    feasible interval, so the admissible root is the smaller one; when it lies
    at or beyond ``pi_max`` the likelihood increases up to the boundary and pi1
    is clamped there.

    Returns ``(pi1, code)`` where code is INTERIOR, BOUNDARY_G1 (group-1 p0 = 0)
    or BOUNDARY_G2 (group-2 p0 = 0).
    """
    c = np.asarray(counts, dtype=float)
    delta = np.asarray(delta, dtype=float)
    s = 2.0 - np.asarray(gamma, dtype=float)
    n_tot = c.sum(axis=(-1, -2))
    resp = c[..., :, 1:].sum(axis=(-1, -2))
    m01 = c[..., 0, 0]
    m02 = c[..., 1, 0]
    qa = s * s * delta * n_tot
    qb = -s * (resp * (1.0 + delta) + m01 + m02 * delta)
    disc = qb * qb - 4.0 * qa * resp
    with np.errstate(invalid="ignore", divide="ignore"):
        small = 2.0 * resp / (-qb + np.sqrt(np.maximum(disc, 0.0)))
    g1_blocks = delta <= 1.0
    pi_max = np.where(g1_blocks, 1.0 / s, 1.0 / (s * delta))
    interior = (disc >= 0.0) & (small < pi_max * (1.0 - BOUNDARY_RTOL))
    pi1 = np.where(interior, small, pi_max)
    code = np.where(interior, INTERIOR, np.where(g1_blocks, BOUNDARY_G1, BOUNDARY_G2))
    return pi1, code


def initial_delta(counts) -> np.ndarray:
    """Ratio of pooled site-level response rates, floored at 1e-3."""
    c = np.asarray(counts, dtype=float)
    n = c.sum(axis=-1)
    rate = (c[..., 1] + 2.0 * c[..., 2]) / (2.0 * n)
    num = rate[..., 1].sum(axis=-1)
    den = rate[..., 0].sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        d0 = num / den
    return np.maximum(np.where(np.isfinite(d0), d0, 1.0), DELTA_FLOOR)


def profile_loglik(counts, delta, gamma):
    """Profile log-likelihood of a common ``delta`` (pi1 maximized out).

    ``counts`` (..., J, 2, 3), ``delta`` (...), ``gamma`` (..., J).
    Returns ``(loglik, pi1, code)``.
    """
    d = np.asarray(delta, dtype=float)[..., None]
    pi1, code = constrained_pi1_array(counts, d, gamma)
    ll = loglik_array(counts, pi1, gamma, d).sum(axis=-1)
    return ll, pi1, code


def profile_score_info(counts, delta, pi1, gamma, code):
    """Derivative of the profile log-likelihood in ``delta`` and its expected information.

    Strata with interior or group-1-boundary pi1 use the stratum score
    ``(m12 + m22)/delta + m02*pi1*(gamma-2)/(delta*pi1*(gamma-2) + 1)``. The
    information is the delta entry ``I_dd = n2*s*pi1/(delta*B)`` (``s = 2-gamma``,
    ``A``, ``B`` the two groups' p0), reduced by ``I_dp**2/I_pp`` with
    ``I_dp = n2*s/B`` and ``I_pp = n1*s/(pi1*A) + n2*delta*s/(pi1*B)`` where pi1
    is interior and therefore moves with delta. Without that reduction the
    step undershoots and convergence is only linear.
    When pi1 sits on the group-2 boundary ``pi1 = 1/((2-gamma)*delta)`` it moves
    with ``delta``; there the profile reduces to a group-1 binomial in
    ``1/delta`` and its exact derivative and information are used instead.
    """
    c = np.asarray(counts, dtype=float)
    d = np.asarray(delta, dtype=float)[..., None]
    s = 2.0 - np.asarray(gamma, dtype=float)
    n1 = c[..., 0, :].sum(axis=-1)
    n2 = c[..., 1, :].sum(axis=-1)
    a1 = c[..., 0, 1] + c[..., 0, 2]
    a2 = c[..., 1, 1] + c[..., 1, 2]
    m01 = c[..., 0, 0]
    m02 = c[..., 1, 0]
    on_g2 = code == BOUNDARY_G2
    with np.errstate(divide="ignore", invalid="ignore"):
        b = 1.0 - s * d * pi1
        p02 = b
        p12_p22 = s * d * pi1
        score_std = a2 / d - np.where(m02 == 0.0, 0.0, m02 * s * pi1 / b)
        info_std = n2 * p12_p22 / d**2 + n2 * p02 * (s * pi1) ** 2 / b**2
        a = 1.0 - s * pi1
        i_dp = n2 * s / b
        i_pp = n1 * s / (pi1 * a) + n2 * d * s / (pi1 * b)
        info_std = np.where(code == INTERIOR, info_std - i_dp * i_dp / i_pp, info_std)
        dm1 = d - 1.0
        score_g2 = -a1 / d + np.where(m01 == 0.0, 0.0, m01 / (d * dm1))
        info_g2 = n1 / (d * d * dm1)
    score = np.where(on_g2, score_g2, score_std).sum(axis=-1)
    info = np.where(on_g2, info_g2, info_std).sum(axis=-1)
    return score, info


class ConstrainedArrays(NamedTuple):
    delta: np.ndarray
    pi1: np.ndarray
    gamma: np.ndarray
    loglik: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    boundary: np.ndarray


def fit_constrained_arrays(counts, init_delta=None, tol: float = 1e-8, max_iter: int = 200,
                           score_tol: float = 1e-6) -> ConstrainedArrays:
    """Common-ratio MLE for a batch of tables of shape (R, J, 2, 3).

    Fisher scoring ``delta <- delta + score/info`` on the profile likelihood,
    halving the step (at most 40 times) while it leaves ``delta > 0`` or lowers
    the profile. A table counts as converged once ``|step| <= tol`` and
    ``|score| <= score_tol * (1 + delta)``. Each table iterates independently,
    so results do not depend on how tables are batched.
    """
    c = np.asarray(counts, dtype=float)
    if c.ndim != 4:
        raise ValueError(f"expected counts of shape (R, J, 2, 3), got {c.shape}")
    R = c.shape[0]
    gamma = gamma_hat_array(c)
    delta = initial_delta(c) if init_delta is None else np.broadcast_to(
        np.asarray(init_delta, dtype=float), (R,)).copy()
    ll, pi1, code = profile_loglik(c, delta, gamma)
    score, info = profile_score_info(c, delta, pi1, gamma, code)
    iterations = np.zeros(R, dtype=int)
    converged = np.zeros(R, dtype=bool)
    active = np.ones(R, dtype=bool)
    last_step = np.full(R, np.inf)

    for _ in range(max_iter):
        done = (last_step <= tol) & (np.abs(score) <= score_tol * (1.0 + np.abs(delta)))
        converged |= active & done
        active &= ~done
        if not active.any():
            break
        idx = np.flatnonzero(active)
        ci, di, gi = c[idx], delta[idx], gamma[idx]
        step = score[idx] / info[idx]
        ll_old = ll[idx]
        slack = 1e-12 * (1.0 + np.abs(ll_old))
        accepted = np.zeros(idx.size, dtype=bool)
        new_d = di.copy()
        new_ll = ll_old.copy()
        new_pi = pi1[idx].copy()
        new_code = code[idx].copy()
        pending = np.ones(idx.size, dtype=bool)
        for _h in range(MAX_HALVINGS + 1):
            pj = np.flatnonzero(pending)
            if pj.size == 0:
                break
            cand = di[pj] + step[pj]
            ok = cand > 0.0
            cand_safe = np.where(ok, cand, di[pj])
            cll, cpi, ccode = profile_loglik(ci[pj], cand_safe, gi[pj])
            ok &= cll >= ll_old[pj] - slack[pj]
            good = pj[ok]
            new_d[good] = cand[ok]
            new_ll[good] = cll[ok]
            new_pi[good] = cpi[ok]
            new_code[good] = ccode[ok]
            accepted[good] = True
            pending[good] = False
            step[pj[~ok]] *= 0.5
        iterations[idx] += 1
        stalled = ~accepted
        last_step[idx] = np.where(accepted, np.abs(new_d - di), 0.0)
        delta[idx] = new_d
        ll[idx] = new_ll
        pi1[idx] = new_pi
        code[idx] = new_code
        s_new, i_new = profile_score_info(ci, new_d, new_pi, gi, new_code)
        score[idx] = s_new
        info[idx] = i_new
        if stalled.any():
            # no admissible step left: stop, judge by the score alone
            st = idx[stalled]
            converged[st] = np.abs(score[st]) <= score_tol * (1.0 + np.abs(delta[st]))
            active[st] = False
    else:
        done = (last_step <= tol) & (np.abs(score) <= score_tol * (1.0 + np.abs(delta)))
        converged |= active & done

    return ConstrainedArrays(delta, pi1, gamma, ll, iterations, converged, code != INTERIOR)


# ------------------------------------------------------------------ #
# scalar API
# ------------------------------------------------------------------ #


def gamma_mle(counts: StratumCounts) -> float:
    """Closed-form conditional probability for one stratum (both groups pooled)."""
    m1 = counts.m1_g1 + counts.m1_g2
    m2 = counts.m2_g1 + counts.m2_g2
    if m1 + m2 == 0:
        raise DegenerateTableError("no responders in stratum: gamma is undefined")
    return 2.0 * m2 / (m1 + 2.0 * m2)


def global_mle(counts: StratumCounts) -> tuple[float, float, float]:
    """Per-stratum MLEs ``(pi1, gamma, delta)`` with a free ratio."""
    if counts.m1_g1 + counts.m2_g1 == 0 or counts.m1_g2 + counts.m2_g2 == 0:
        raise DegenerateTableError(
            f"a group without responders cannot support a per-stratum ratio: {counts}"
        )
    pi1, gamma, delta = global_fit_arrays(counts.as_array())
    return float(pi1), float(gamma), float(delta)


def global_fit(table: StratifiedTable) -> GlobalFit:
    est = [global_mle(s) for s in table.strata]
    pis, gams, dels = (tuple(v) for v in zip(*est))
    fit_params = [StratumParams(*e) for e in est]
    ll = sum(loglik_stratum(s, p) for s, p in zip(table.strata, fit_params))
    return GlobalFit(pis, gams, dels, ll)


def constrained_pi1(counts: StratumCounts, delta: float, gamma: float) -> tuple[float, bool]:
    """Stratum MLE of pi1 for fixed ``delta`` and ``gamma``.

    Returns ``(pi1, on_boundary)``. Feasible roots of the cleared stationarity
    quadratic are kept; with two, the one with the larger likelihood wins.
    Without a feasible root, pi1 goes to the boundary ``pi_max`` provided the
    blocking group has no zero-response patients.
    """
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    (m01, m11, m21), (m02, m12, m22) = counts.group1, counts.group2
    resp = m11 + m21 + m12 + m22
    if resp == 0:
        raise DegenerateTableError("no responders in stratum")
    s = 2.0 - gamma
    n_tot = resp + m01 + m02
    pi_max = min(1.0 / s, 1.0 / (s * delta))
    roots = solve_quadratic(s * s * delta * n_tot, -s * (resp * (1.0 + delta) + m01 + m02 * delta), resp)
    feasible = [r for r in roots if 0.0 < r < pi_max * (1.0 - BOUNDARY_RTOL)]
    if feasible:
        best = max(feasible, key=lambda r: loglik_stratum(counts, StratumParams(r, gamma, delta)))
        return best, False
    if delta < 1.0:
        blocking = m01
    elif delta > 1.0:
        blocking = m02
    else:
        blocking = m01 + m02
    if blocking > 0:
        raise NoFeasibleSolutionError(
            f"no interior root for pi1 although the boundary likelihood diverges "
            f"(counts={counts}, delta={delta}, gamma={gamma})"
        )
    return pi_max, True


def fisher_scoring_delta(table: StratifiedTable, init_delta: float | None = None,
                         tol: float = 1e-8, max_iter: int = 200) -> ConstrainedFit:
    """Common-ratio MLE of ``table`` by Fisher scoring; see :func:`fit_constrained_arrays`."""
    c = table.counts()
    if degenerate_mask(c):
        raise DegenerateTableError("every group in every stratum needs at least one responder")
    if init_delta is not None and not init_delta > 0:
        raise ValueError(f"init_delta must be positive, got {init_delta}")
    res = fit_constrained_arrays(c[None], init_delta=init_delta, tol=tol, max_iter=max_iter)
    delta = float(res.delta[0])
    if not math.isfinite(delta) or delta <= 0:
        raise ArithmeticError(f"Fisher scoring produced an invalid ratio {delta}")
    return ConstrainedFit(
        delta_hat=delta,
        pi1_hat=tuple(float(v) for v in res.pi1[0]),
        gamma_hat=tuple(float(v) for v in res.gamma[0]),
        loglik=float(res.loglik[0]),
        iterations=int(res.iterations[0]),
        converged=bool(res.converged[0]),
        boundary_strata=frozenset(int(j) for j in np.flatnonzero(res.boundary[0])),
    )
