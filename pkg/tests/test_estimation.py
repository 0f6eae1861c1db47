import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize, minimize_scalar

from bilat.estimation import (
    BOUNDARY_G1,
    BOUNDARY_G2,
    INTERIOR,
    constrained_pi1,
    constrained_pi1_array,
    fisher_scoring_delta,
    fit_constrained_arrays,
    gamma_mle,
    global_fit,
    global_mle,
    profile_loglik,
    profile_score_info,
)
from bilat.model import DegenerateTableError, StratifiedTable, StratumCounts, StratumParams, loglik_array, loglik_stratum

from conftest import OME_COUNTS, random_tables

OME = StratifiedTable.from_array(OME_COUNTS)


def test_gamma_mle_examples():
    assert gamma_mle(OME.strata[2]) == pytest.approx(18 / 19)
    assert gamma_mle(OME.strata[0]) == pytest.approx(20 / 24)
    assert gamma_mle(StratumCounts(1, 3, 0, 4, 2, 0)) == 0.0
    with pytest.raises(DegenerateTableError):
        gamma_mle(StratumCounts(3, 0, 0, 2, 0, 0))


counts6 = st.lists(st.integers(0, 40), min_size=6, max_size=6)


@settings(max_examples=200)
@given(counts6)
def test_gamma_mle_solves_reduced_stationarity(v):
    s = StratumCounts.from_groups(v[:3], v[3:]) if sum(v[:3]) and sum(v[3:]) else None
    if s is None:
        return
    m1, m2 = v[1] + v[4], v[2] + v[5]
    if m1 == 0 or m2 == 0:
        return
    g = gamma_mle(s)
    resid = m2 / g + m1 / (g - 1) - (m1 + m2) / (g - 2)
    assert abs(resid) <= 1e-10 * (m1 + m2) / min(g, 1 - g)


@pytest.mark.parametrize(
    "j,expected",
    [(0, (0.4762, 0.8333, 0.4800)), (1, (0.6116, 0.8108, 0.9167)), (2, (0.9500, 0.9474, 0.8572))],
)
def test_global_mle_ome(j, expected):
    est = global_mle(OME.strata[j])
    # last stratum's ratio is 6/7 = 0.857143; the published 0.8572 is rounded up
    tol = 1.5e-4 if j == 2 else 5e-5
    assert est == pytest.approx(expected, abs=tol)


def test_global_mle_degenerate():
    with pytest.raises(DegenerateTableError):
        global_mle(StratumCounts(4, 0, 0, 2, 1, 1))
    with pytest.raises(DegenerateTableError):
        global_mle(StratumCounts(4, 1, 0, 2, 0, 0))


def _numerical_global(counts):
    # feasible reparametrization: pi_i = u_i / (2 - gamma), u_i in (0, 1]
    def nll(x):
        u1, u2, g = x
        s = 2 - g
        v = -float(loglik_array(counts, u1 / s, g, u2 / u1))
        return v if math.isfinite(v) else 1e12

    best = None
    for start in [(0.5, 0.5, 0.5), (0.3, 0.7, 0.2), (0.8, 0.4, 0.8)]:
        r = minimize(nll, start, method="L-BFGS-B", bounds=[(1e-9, 1.0), (1e-9, 1.0), (1e-9, 1 - 1e-9)],
                     options={"ftol": 1e-15, "gtol": 1e-11, "maxiter": 2000})
        if best is None or r.fun < best.fun:
            best = r
    u1, u2, g = best.x
    return (u1 / (2 - g), g, u2 / u1), -best.fun


def test_global_mle_matches_numerical_maximizer():
    rng = np.random.default_rng(11)
    for table in random_tables(30, rng, max_j=1):
        counts = table[0]
        est = global_mle(StratumCounts.from_groups(counts[0], counts[1]))
        num, ll_num = _numerical_global(counts)
        ll = float(loglik_array(counts, est[0], est[1], est[2]))
        assert ll >= ll_num - 1e-6
        assert est == pytest.approx(num, abs=1e-4)


@pytest.mark.parametrize("j,gamma,expected,boundary", [(0, 0.8333, 0.4036, False), (2, 18 / 19, 0.95, True)])
def test_constrained_pi1_ome(j, gamma, expected, boundary):
    pi1, flag = constrained_pi1(OME.strata[j], 0.8174, gamma)
    assert pi1 == pytest.approx(expected, abs=5e-5)
    assert flag is boundary


def test_ome_boundary_is_a_likelihood_maximum():
    s, g, d = OME.strata[2], 18 / 19, 0.8174
    pi_max = 1 / (2 - g)
    pi1, _ = constrained_pi1(s, d, g)
    grid = np.linspace(0.5 * pi_max, pi_max, 2001)
    values = [loglik_stratum(s, StratumParams(p, g, d)) for p in grid]
    assert np.all(np.diff(values) > 0)
    assert pi1 == pytest.approx(pi_max, rel=1e-12)


def test_constrained_pi1_common_ratio_closed_form():
    s = StratumCounts(4, 5, 3, 4, 5, 3)
    g = 0.35
    pi1, flag = constrained_pi1(s, 1.0, g)
    assert not flag
    responders, total = 16, 24
    assert pi1 == pytest.approx(responders / ((2 - g) * total), rel=1e-12)
    oracle = minimize_scalar(lambda p: -loglik_stratum(s, StratumParams(p, g, 1.0)),
                             bounds=(1e-6, 1 / (2 - g) - 1e-9), method="bounded", options={"xatol": 1e-12})
    assert pi1 == pytest.approx(oracle.x, abs=1e-7)
    h = 1e-7
    deriv = (loglik_stratum(s, StratumParams(pi1 + h, g, 1.0)) - loglik_stratum(s, StratumParams(pi1 - h, g, 1.0))) / (2 * h)
    assert abs(deriv) < 1e-6


@settings(max_examples=200, deadline=None)
@given(counts6, st.floats(0.05, 5.0), st.floats(0.0, 0.99))
def test_scalar_and_array_pi1_agree(v, delta, gamma):
    if v[1] + v[2] + v[4] + v[5] == 0 or sum(v[:3]) == 0 or sum(v[3:]) == 0:
        return
    s = StratumCounts.from_groups(v[:3], v[3:])
    arr, code = constrained_pi1_array(s.as_array(), delta, gamma)
    scalar, flag = constrained_pi1(s, delta, gamma)
    assert float(arr) == pytest.approx(scalar, rel=1e-9)
    assert (int(code) != INTERIOR) == flag


def test_array_boundary_codes():
    _, code = constrained_pi1_array(np.array([[0, 1, 3], [1, 0, 6]]), 0.9, 18 / 19)
    assert code == BOUNDARY_G1
    _, code = constrained_pi1_array(np.array([[1, 0, 6], [0, 1, 3]]), 1.25, 18 / 19)
    assert code == BOUNDARY_G2


def test_fisher_scoring_ome():
    fit = fisher_scoring_delta(OME)
    assert fit.converged
    assert fit.delta_hat == pytest.approx(0.8174, abs=5e-5)
    assert fit.pi1_hat == pytest.approx((0.4036, 0.6249, 0.9500), abs=5e-5)
    assert fit.gamma_hat == pytest.approx(global_fit(OME).gamma_tilde, abs=1e-15)
    assert fit.boundary_strata == frozenset({2})


def test_fisher_scoring_single_stratum_equals_global():
    t = StratifiedTable.from_array(OME_COUNTS[:1])
    fit, g = fisher_scoring_delta(t), global_fit(t)
    assert fit.delta_hat == pytest.approx(g.delta_tilde[0], rel=1e-8)
    assert fit.pi1_hat[0] == pytest.approx(g.pi1_tilde[0], rel=1e-8)
    assert fit.loglik == pytest.approx(g.loglik, abs=1e-9)


def test_identical_strata_reach_global_maximum():
    t = StratifiedTable.from_array(np.stack([OME_COUNTS[1]] * 3))
    fit, g = fisher_scoring_delta(t), global_fit(t)
    assert fit.delta_hat == pytest.approx(g.delta_tilde[0], rel=1e-8)
    assert g.loglik - fit.loglik <= 1e-9


def test_degenerate_and_invalid_inputs():
    t = StratifiedTable.from_array(np.array([[[3, 1, 0], [4, 0, 0]], [[2, 2, 2], [2, 2, 2]]]))
    with pytest.raises(DegenerateTableError):
        fisher_scoring_delta(t)
    with pytest.raises(ValueError):
        fisher_scoring_delta(OME, init_delta=0.0)


def _profile_oracle(counts):
    g = (2 * (counts[:, 0, 2] + counts[:, 1, 2])) / (counts[:, 0, 1] + counts[:, 1, 1] + 2 * (counts[:, 0, 2] + counts[:, 1, 2]))

    def neg(logd):
        ll, _, _ = profile_loglik(counts, np.exp(logd), g)
        return -float(ll)

    r = minimize_scalar(neg, bounds=(math.log(1e-3), math.log(1e3)), method="bounded", options={"xatol": 1e-11})
    return math.exp(r.x), -r.fun


def _joint_oracle(counts):
    # maximize over (log delta, u_j, gamma_j) jointly with no profiling
    J = counts.shape[0]

    def nll(x):
        d = math.exp(x[0])
        u, g = x[1:J + 1], x[J + 1:]
        pi = u / ((2 - g) * max(1.0, d))
        v = -float(loglik_array(counts, pi, g, d).sum())
        return v if math.isfinite(v) else 1e12

    x0 = np.concatenate([[0.0], np.full(J, 0.5), np.full(J, 0.5)])
    bounds = [(-5, 5)] + [(1e-9, 1.0)] * J + [(1e-9, 1 - 1e-9)] * J
    r = minimize(nll, x0, method="L-BFGS-B", bounds=bounds, options={"ftol": 1e-15, "gtol": 1e-10, "maxiter": 5000})
    return math.exp(r.x[0]), -r.fun


def test_constrained_fit_matches_profile_and_joint_oracles():
    rng = np.random.default_rng(5)
    for counts in random_tables(25, rng):
        fit = fisher_scoring_delta(StratifiedTable.from_array(counts))
        assert fit.converged
        d_prof, ll_prof = _profile_oracle(counts)
        assert fit.delta_hat == pytest.approx(d_prof, rel=1e-6)
        assert fit.loglik >= ll_prof - 1e-9
        _, ll_joint = _joint_oracle(counts)
        assert fit.loglik >= ll_joint - 1e-6


def test_group2_boundary_table_converges_to_profile_maximum():
    # group 2 has no zero-response patients in a stratum with ratio above 1
    counts = np.array([[[6, 3, 2], [0, 2, 6]], [[5, 4, 3], [3, 4, 5]]], dtype=float)
    fit = fisher_scoring_delta(StratifiedTable.from_array(counts))
    assert fit.converged
    d_prof, _ = _profile_oracle(counts)
    assert fit.delta_hat == pytest.approx(d_prof, rel=1e-6)


def test_profile_score_matches_finite_difference():
    rng = np.random.default_rng(3)
    for counts in random_tables(20, rng, max_j=3):
        g = 2 * counts[..., 2].sum(-1) / (counts[..., 1].sum(-1) + 2 * counts[..., 2].sum(-1))
        d = 0.9
        _, pi, code = profile_loglik(counts, d, g)
        score, info = profile_score_info(counts, d, pi, g, code)
        h = 1e-6
        fd = (profile_loglik(counts, d + h, g)[0] - profile_loglik(counts, d - h, g)[0]) / (2 * h)
        assert float(score) == pytest.approx(float(fd), rel=1e-5, abs=1e-5)
        assert info > 0


def test_profile_nondecreasing_across_iterations():
    t = StratifiedTable.from_array(OME_COUNTS)
    lls = [fisher_scoring_delta(t, max_iter=k).loglik for k in range(1, 15)]
    assert all(b >= a - 1e-12 * (1 + abs(a)) for a, b in zip(lls, lls[1:]))


def test_permutation_invariance_of_delta_hat():
    rng = np.random.default_rng(8)
    for counts in random_tables(10, rng):
        perm = rng.permutation(counts.shape[0])
        a = fisher_scoring_delta(StratifiedTable.from_array(counts)).delta_hat
        b = fisher_scoring_delta(StratifiedTable.from_array(counts[perm])).delta_hat
        assert a == pytest.approx(b, rel=1e-9)


def test_batch_fit_equals_individual_fits():
    rng = np.random.default_rng(21)
    tables = [t for t in random_tables(40, rng) if t.shape[0] == 3][:10]
    batch = fit_constrained_arrays(np.stack(tables))
    for k, counts in enumerate(tables):
        single = fit_constrained_arrays(counts[None])
        assert batch.delta[k] == single.delta[0]
        np.testing.assert_array_equal(batch.pi1[k], single.pi1[0])


def test_constrained_never_exceeds_global():
    rng = np.random.default_rng(2)
    for counts in random_tables(60, rng):
        t = StratifiedTable.from_array(counts)
        assert fisher_scoring_delta(t).loglik <= global_fit(t).loglik + 1e-9
