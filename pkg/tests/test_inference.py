import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilat.estimation import fisher_scoring_delta, global_fit
from bilat.inference import (
    InfoMatrix3,
    SingularInformationError,
    chisq_quantile,
    chisq_sf,
    contrast_matrix,
    homogeneity_tests,
    info_matrix,
    info_matrix_array,
    invert3,
    lrt_test,
    observed_hessian,
    score_test,
    statistics_batch,
    wald_test,
)
from bilat.model import DegenerateTableError, StratifiedTable, StratumCounts, cell_probs, score_stratum

from conftest import OME_COUNTS, random_tables

OME = StratifiedTable.from_array(OME_COUNTS)


def _cell_jacobian(delta, pi1, gamma):
    # d p_{l,i} / d (delta, pi1, gamma) for both groups, by hand
    s = 2 - gamma
    g1 = np.array([[0, -s, pi1], [0, 2 * (1 - gamma), -2 * pi1], [0, gamma, pi1]])
    q = delta * pi1
    g2 = np.array([
        [-s * pi1, -s * delta, q],
        [2 * pi1 * (1 - gamma), 2 * delta * (1 - gamma), -2 * q],
        [pi1 * gamma, delta * gamma, q],
    ])
    return g1, g2


def multinomial_information(n1, n2, delta, pi1, gamma):
    """Sum over cells of n * grad(p) grad(p)' / p: an independent route to the expected information."""
    g1, g2 = _cell_jacobian(delta, pi1, gamma)
    p1, p2 = cell_probs(pi1, gamma), cell_probs(delta * pi1, gamma)
    out = np.zeros((3, 3))
    for n, jac, p in ((n1, g1, p1), (n2, g2, p2)):
        for k in range(3):
            out += n * np.outer(jac[k], jac[k]) / p[k]
    return out


def _point(g, d, frac):
    return d, frac / ((2 - g) * max(1, d)), g


def _min_cell(point):
    d, p, g = point
    return np.concatenate([cell_probs(p, g), cell_probs(d * p, g)]).min()


def interior(floor=0.01):
    return st.builds(_point, st.floats(0.05, 0.95), st.floats(0.3, 3.0), st.floats(0.02, 0.98)).filter(
        lambda pt: _min_cell(pt) >= floor)


def test_info_entry_spot_value():
    info = info_matrix(StratumCounts(3, 4, 3, 4, 3, 3), 1.0, 0.3, 0.5)
    assert info.I12 == pytest.approx(27.2727, abs=1e-4)
    m = info.as_array()
    np.testing.assert_array_equal(m, m.T)
    assert InfoMatrix3.from_array(m) == info


@settings(max_examples=100, deadline=None)
@given(interior(), st.integers(1, 80), st.integers(1, 80))
def test_info_matches_multinomial_oracle_and_is_pd(point, n1, n2):
    m = info_matrix_array(n1, n2, *point)
    oracle = multinomial_information(n1, n2, *point)
    np.testing.assert_allclose(m, oracle, rtol=1e-9, atol=1e-9 * np.abs(oracle).max())
    minors = [m[0, 0], np.linalg.det(m[:2, :2]), np.linalg.det(m)]
    assert all(x > 0 for x in minors)
    inv, _ = invert3(m)
    np.testing.assert_allclose(inv @ m, np.eye(3), atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(interior(), st.lists(st.integers(0, 30), min_size=6, max_size=6))
def test_observed_hessian_matches_score_differences(point, v):
    counts = np.array(v, dtype=float).reshape(2, 3)
    h_an = observed_hessian(counts, *point)
    h = 1e-6
    for k in range(3):
        up, dn = list(point), list(point)
        up[k] += h
        dn[k] -= h
        col = (score_stratum(counts, *up) - score_stratum(counts, *dn)) / (2 * h)
        scale = np.maximum(np.abs(col), 1.0)
        assert np.all(np.abs(h_an[:, k] - col) <= 1e-5 * scale)


def test_info_matrix_validation():
    s = StratumCounts(1, 1, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        info_matrix(s, 1.0, 0.8, 0.5)
    with pytest.raises(ValueError):
        info_matrix(s, 1.0, 0.3, 0.5, clamp_eps=0.0)


def test_invert3_diagonal_and_singular():
    inv, D = invert3(np.diag([2.0, 4.0, 5.0]))
    np.testing.assert_allclose(inv, np.diag([0.5, 0.25, 0.2]))
    assert D == 40.0
    with pytest.raises(SingularInformationError):
        invert3(np.ones((3, 3)))


def test_invert3_matches_linear_solver():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = rng.normal(size=(3, 3))
        spd = a @ a.T + 0.1 * np.eye(3)
        inv, D = invert3(spd)
        np.testing.assert_allclose(inv, np.linalg.solve(spd, np.eye(3)), rtol=1e-10, atol=1e-10)
        assert inv[0, 0] == pytest.approx((spd[1, 1] * spd[2, 2] - spd[1, 2] * spd[2, 1]) / D, rel=1e-12)


def test_chisq_examples():
    assert chisq_sf(1.6918, 2) == pytest.approx(math.exp(-0.8459), rel=1e-12)
    assert chisq_quantile(0.95, 2) == pytest.approx(-2 * math.log(0.05), abs=1e-9)
    assert chisq_sf(chisq_quantile(0.95, 7), 7) == pytest.approx(0.05, abs=1e-9)
    assert chisq_sf(0.0, 3) == 1.0
    for bad in [(-1.0, 2), (1.0, 0), (1.0, 1.5)]:
        with pytest.raises(ValueError):
            chisq_sf(*bad)
    with pytest.raises(ValueError):
        chisq_quantile(1.0, 2)


def _simpson_sf(x, df, n=400_000):
    hi = x + 80.0 * df
    t = np.linspace(x, hi, n + 1)
    k = df / 2.0
    logpdf = (k - 1) * np.log(t) - t / 2 - k * math.log(2) - math.lgamma(k)
    f = np.exp(logpdf)
    h = (hi - x) / n
    return h / 3 * (f[0] + f[-1] + 4 * f[1:-1:2].sum() + 2 * f[2:-1:2].sum())


@pytest.mark.parametrize("df", range(1, 8))
@pytest.mark.parametrize("x", [0.1, 1.0, 5.0, 20.0])
def test_chisq_sf_matches_simpson_integration(df, x):
    assert chisq_sf(x, df) == pytest.approx(_simpson_sf(x, df), abs=1e-8)


def test_ome_statistics():
    rep = homogeneity_tests(OME)
    stats = {k: (r.statistic, r.p_value, r.df) for k, r in rep.results.items()}
    assert stats["LRT"][0] == pytest.approx(1.6918, abs=1e-3)
    assert stats["Score"][0] == pytest.approx(1.6392, abs=1e-3)
    assert stats["Wald"][0] == pytest.approx(2.3520, abs=1e-3)
    assert stats["LRT"][1] == pytest.approx(0.4292, abs=5e-4)
    assert stats["Score"][1] == pytest.approx(0.4406, abs=5e-4)
    assert stats["Wald"][1] == pytest.approx(0.3085, abs=5e-4)
    assert all(v[2] == 2 for v in stats.values())


@pytest.mark.parametrize("eps", [1e-6, 1e-8, 1e-10, 1e-12])
def test_ome_statistics_insensitive_to_clamp(eps):
    base = homogeneity_tests(OME)
    moved = homogeneity_tests(OME, clamp_eps=eps)
    for k in base.results:
        assert abs(moved.results[k].statistic - base.results[k].statistic) < 1e-4


def test_identical_strata_give_zero_statistics():
    t = StratifiedTable.from_array(np.stack([OME_COUNTS[0], OME_COUNTS[0]]))
    rep = homogeneity_tests(t)
    assert rep.results["LRT"].statistic <= 1e-8
    assert rep.results["LRT"].p_value == pytest.approx(1.0, abs=1e-6)
    assert rep.results["Score"].statistic <= 1e-8
    assert rep.results["Wald"].statistic == 0.0


def test_single_stratum_is_rejected():
    t = StratifiedTable.from_array(OME_COUNTS[:1])
    for fn in (lrt_test, score_test, wald_test):
        with pytest.raises(DegenerateTableError, match="df = 0: homogeneity test undefined for J = 1"):
            fn(t)


def test_contrast_matrix_layout():
    C = contrast_matrix(3)
    assert C.shape == (2, 9)
    np.testing.assert_array_equal(np.flatnonzero(C[0]), [0, 3])
    np.testing.assert_array_equal(np.flatnonzero(C[1]), [0, 6])


def test_wald_two_strata_reduction():
    rng = np.random.default_rng(4)
    for counts in [c for c in random_tables(40, rng, max_j=2) if c.shape[0] == 2][:10]:
        t = StratifiedTable.from_array(counts)
        g = global_fit(t)
        v = [invert3(info_matrix(s, d, p, gm))[0][0, 0]
             for s, p, gm, d in zip(t.strata, g.pi1_tilde, g.gamma_tilde, g.delta_tilde)]
        expected = (g.delta_tilde[0] - g.delta_tilde[1]) ** 2 / (v[0] + v[1])
        assert wald_test(t).statistic == pytest.approx(expected, rel=1e-10)


def test_batched_statistics_match_scalar_tests():
    rng = np.random.default_rng(9)
    tables = [c for c in random_tables(80, rng) if c.shape[0] == 3][:15]
    batch = statistics_batch(np.stack(tables))
    for k, counts in enumerate(tables):
        t = StratifiedTable.from_array(counts)
        rep = homogeneity_tests(t)
        got = batch.stats[k]
        for i, meth in enumerate(("LRT", "Score", "Wald")):
            assert got[i] == pytest.approx(rep.results[meth].statistic, rel=1e-9, abs=1e-10)


def test_statistics_nonnegative_and_permutation_invariant():
    rng = np.random.default_rng(17)
    for counts in [c for c in random_tables(60, rng) if c.shape[0] >= 2][:25]:
        a = homogeneity_tests(StratifiedTable.from_array(counts))
        perm = rng.permutation(counts.shape[0])
        b = homogeneity_tests(StratifiedTable.from_array(counts[perm]))
        for k in a.results:
            assert a.results[k].statistic >= 0.0
            assert 0.0 <= a.results[k].p_value <= 1.0
            assert b.results[k].statistic == pytest.approx(a.results[k].statistic, abs=1e-9)
            assert b.results[k].p_value == pytest.approx(a.results[k].p_value, abs=1e-9)


def test_raw_likelihood_ratio_never_below_floor():
    rng = np.random.default_rng(23)
    for counts in [c for c in random_tables(100, rng) if c.shape[0] >= 2]:
        t = StratifiedTable.from_array(counts)
        assert 2 * (global_fit(t).loglik - fisher_scoring_delta(t).loglik) >= -1e-9


def test_equal_global_ratios_give_null_statistics():
    # both strata have ratio exactly 1.5 but different rates and gammas
    counts = np.array([[[14, 4, 2], [11, 6, 3]], [[10, 6, 4], [5, 6, 9]]], dtype=float)
    t = StratifiedTable.from_array(counts)
    g = global_fit(t)
    assert g.delta_tilde[0] == pytest.approx(g.delta_tilde[1], rel=1e-12)
    rep = homogeneity_tests(t)
    assert global_fit(t).loglik - rep.constrained_fit.loglik <= 1e-9
    assert rep.results["LRT"].statistic <= 1e-8
    assert rep.results["Wald"].statistic <= 1e-20
    assert rep.results["Score"].statistic <= 1e-6
