import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from rcmlab.env import ConductanceField, LatticeRegion, ball_sites, big_edge_set, homogeneous_field, make_tail_law
from rcmlab.experiments import (
    Check,
    ExperimentReport,
    Stat,
    a1_integral,
    ball_volume,
    classical_sums,
    classical_trend,
    clock_expectation_kernel,
    clock_expectation_mc,
    clock_second_moment_bound,
    cluster_tail_fit,
    ergodic_average,
    ergodic_pair_average,
    estimate_sigma_v,
    gamma_moment_check,
    hk_bound_stats,
    homogenization_stat,
    ks_band,
    ks_distance,
    law_ks,
    llt_ratio,
    mismatch_probabilities,
    pareto_draws,
    qfclt_marginal_test,
    riemann_ball_integral,
    sigma_v_from_displacements,
    sup_error_u,
    truncated_clock_samples,
    truncated_pareto_mean,
    truncation_levels,
    truncation_probs,
)


# -- reports ---------------------------------------------------------------


def test_report_requires_stats():
    with pytest.raises(ValueError):
        ExperimentReport("x", {}, [])


def test_report_pass_logic_and_json_safety():
    rep = ExperimentReport("x", {}, [Stat("s", math.inf, math.nan, 3)], [Check("a", 1.0, hi=2.0), Check("b", 5.0, hi=2.0)])
    assert not rep.passed and rep.failing() == ["b"]
    s = rep.summary()
    assert s["stats"][0]["value"] == "inf" and s["stats"][0]["stderr"] == "nan"
    assert s["checks"][1]["pass"] is False


# -- distribution distances ------------------------------------------------


def test_ks_distance_by_hand():
    assert ks_distance([0.5], stats.uniform.cdf) == pytest.approx(0.5)
    assert ks_distance([0.25, 0.75], stats.uniform.cdf) == pytest.approx(0.25)
    # a sample from a point mass has distance 0 once atoms are handled
    atom = lambda u: np.where(np.asarray(u) >= 1.0, 1.0, 0.0)
    left = lambda u: np.where(np.asarray(u) > 1.0, 1.0, 0.0)
    assert ks_distance(np.ones(10), atom, left) == 0.0


def test_ks_band_value():
    assert ks_band(10**4) == pytest.approx(1.6276 / 100, rel=1e-3)


def test_law_ks_on_law_samples():
    law = make_tail_law(2)
    f = ConductanceField(law, 0)
    xs = np.arange(20000, dtype=np.int64)
    x = np.stack([xs, np.zeros_like(xs)], axis=1)
    s = f.edges(x, np.zeros(len(x), dtype=np.int64))
    assert law_ks(law, s) < ks_band(len(s))


# -- classical sums --------------------------------------------------------


def test_truncated_pareto_mean_quadrature():
    for a in (1.0, 3.5, 1e4):
        val = float(mp.quad(lambda x: x * x**-2, [1, a]))
        assert truncated_pareto_mean(a) == pytest.approx(val, abs=1e-12)
    assert truncated_pareto_mean(0.5) == 0.0


def test_pareto_draws_law():
    x = pareto_draws(3, 50000)
    assert x.min() >= 1.0
    assert stats.kstest(1.0 / x, "uniform").pvalue > 1e-3


def test_classical_sums_by_loop():
    n, beta = 50, 1.5
    xi = pareto_draws(1, n)
    t = np.array([0.0, 0.3, 1.0])
    cs = classical_sums(n, beta, xi, t)
    norm = n * math.log(n)
    for k, tt in enumerate(t):
        m = int(math.floor(n * tt + 1e-9))
        U = V = M = 0.0
        for i in range(1, m + 1):
            a = i * math.log(i) ** beta
            x = xi[i - 1]
            U += x
            tr = x if x <= a else 0.0
            V += tr
            M += tr - (math.log(a) if a >= 1 else 0.0)
        assert cs.U[k] == pytest.approx(U / norm, abs=1e-12)
        assert cs.V[k] == pytest.approx(V / norm, abs=1e-12)
        assert cs.M[k] == pytest.approx(M / norm, abs=1e-12)
    with pytest.raises(ValueError):
        classical_sums(n, 2.0, xi)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.integers(0, 1000))
def test_sup_error_u_dominates_grid(n, seed):
    xi = pareto_draws(seed, n)
    exact = sup_error_u(n, xi)
    t = np.linspace(0, 1, 20 * n + 1)
    c = np.concatenate([[0.0], np.cumsum(xi)]) / (n * math.log(n))
    k = np.minimum(np.floor(n * t + 1e-9).astype(int), n)
    grid = np.max(np.abs(c[k] - t))
    assert grid <= exact + 1e-12
    # the sup is attained as t approaches a jump from the left
    assert exact <= grid + 1.0 / (20 * n) + 1e-12


def test_classical_trend_mismatch_moments():
    tr = classical_trend(1.5, [0, 1], ns=(100, 1000))
    p = mismatch_probabilities(truncation_levels(1000, 1.5))
    assert tr.mismatch_mean == pytest.approx(p.sum())
    assert tr.errors.shape == (2, 2)


# -- sigma_V ---------------------------------------------------------------


def test_sigma_v_from_gaussian_displacements():
    rng = np.random.default_rng(0)
    n, t, s2 = 10, 2.0, 1.7
    disp = rng.normal(scale=math.sqrt(s2 * t) * n, size=(40000, 3))
    est = sigma_v_from_displacements(disp, n, t)
    assert abs(est.value - s2) < 4 * est.stderr
    np.testing.assert_allclose(np.diag(est.covariance), s2, rtol=0.03)


def test_sigma_v_homogeneous_is_two():
    est = estimate_sigma_v(homogeneous_field(2), 8, 20000, seed=1)
    assert abs(est.value - 2.0) < 4 * est.stderr


# -- local limit ratios ----------------------------------------------------


def test_llt_homogeneous_control():
    f = homogeneous_field(2)
    res = llt_ratio(f, 8, [1.0], 0.5, 20000, 2, ball_radius=1.0, spacing=0.5, sigma_v2=2.0)
    ok = np.isfinite(res.ratio)
    assert ok.sum() > 0
    z = np.abs(res.ratio[ok] - 1.0) / res.stderr[ok]
    assert z.max() < 4.0
    assert res.sigma.value == pytest.approx(2.0, rel=0.05)


def test_llt_rejects_bad_spacing():
    with pytest.raises(ValueError):
        llt_ratio(homogeneous_field(2), 5, [1.0], 1.0, 10, 0, spacing=0.3)


# -- clock identity --------------------------------------------------------


def test_clock_kernel_homogeneous_closed_form():
    # mu~ = 2d everywhere and the walk never leaves a ball of radius 6n by t = 0.05
    n, t = 6, 0.05
    ce = clock_expectation_kernel(homogeneous_field(2), n, t, a=10.0, K=6.0)
    assert ce.value == pytest.approx(4 * t / math.log(n), rel=1e-6)


def test_clock_kernel_matches_mc():
    law = make_tail_law(2)
    f = ConductanceField(law, 4)
    n, t, a, K = 6, 0.5, 1.0, 1.0
    ce = clock_expectation_kernel(f, n, t, a, K)
    m, se = clock_expectation_mc(f, n, t, a, K, 20000, 5)
    assert abs(m - ce.value) < 4 * se


def test_truncated_clock_dynamics_flag():
    f = ConductanceField(make_tail_law(2), 4)
    with pytest.raises(ValueError):
        truncated_clock_samples(f, 4, [1.0], 1.0, 1.0, 10, 0, dynamics="bogus")


def test_a1_closed_form_in_two_dimensions():
    K, t, delta, s2 = 1.3, 1.0, 0.1, 2.2
    exact = integrate.quad(lambda s: 1.0 - math.exp(-K * K / (2 * s2 * s)), delta, t, epsabs=0, epsrel=1e-12)[0]
    assert a1_integral(K, t, delta, s2, 2) == pytest.approx(exact, rel=1e-6)


def test_second_moment_bound_large_ball_limit():
    # with a ball much larger than the diffusion both probabilities are ~1
    eps, t, delta = 0.5, 1.0, 0.2
    val = clock_second_moment_bound(8.0, t, delta, 0.5, 2, eps, nodes=60)
    assert val == pytest.approx(eps + 8 * (1 + eps) * (t - delta) ** 2 / 2, rel=1e-3)


# -- truncation probabilities ----------------------------------------------


def test_truncation_probs_limits():
    f = ConductanceField(make_tail_law(2), 1)
    r = truncation_probs(f, 8, 100.0, 1e12, 0.5, 500, 0)
    assert r.p_exit == 0.0 and r.p_big == 0.0
    r = truncation_probs(f, 8, 0.1, 1e-6, 0.5, 500, 0)
    assert r.p_exit == 1.0 and r.p_big == 1.0


# -- ergodic averages ------------------------------------------------------


def test_ergodic_average_brute_force():
    law = make_tail_law(2)
    f = ConductanceField(law, 9)
    n, K, a = 12, 1.0, 1.0
    fx = lambda x: 1.0 + x[:, 0] ** 2
    ea = ergodic_average(f, n, K, a, fx)
    sites = ball_sites(2, K * n)
    mu = f.truncate(a, n).site_values(sites)
    brute = np.sum(mu * fx(sites / n)) / (n**2 * math.log(n))
    assert ea.value == pytest.approx(brute, rel=1e-12)
    assert ea.site_mean == pytest.approx(law.site_truncated_mean(a * n * n), rel=1e-12)


def test_ergodic_average_homogeneous_is_exact():
    ea = ergodic_average(homogeneous_field(3), 5, 1.0, 1.0)
    assert ea.value == pytest.approx(ea.mean, rel=1e-12)
    assert ea.target == pytest.approx(2 * ball_volume(3, 1.0))


def test_riemann_ball_volume():
    assert riemann_ball_integral(lambda x: np.ones(len(x)), 2, 1.0, m=200) == pytest.approx(math.pi, rel=1e-3)


def test_pair_average_homogeneous():
    g = lambda x, y: np.exp(-np.sum((x - y) ** 2, axis=-1))
    pa = ergodic_pair_average(homogeneous_field(2, 0.5), 4, 1.0, 1.0, g)
    assert pa.value == pytest.approx(pa.mean, rel=1e-12)


# -- tiles, clusters, gamma moments ----------------------------------------


def test_homogenization_counts_big_edges():
    law = make_tail_law(2)
    f = ConductanceField(law, 2)
    n, a = 16, 0.05
    ts = homogenization_stat(f, n, a, 1.2, 9, tiles=3, gamma_samples=5)
    span = 3 * ts.m
    edges = big_edge_set(f, a, math.inf, n, LatticeRegion(2, span, (0, 0)))
    inside = np.all((edges[:, :2] >= 0) & (edges[:, :2] < span), axis=1)
    assert ts.counts.sum() == inside.sum()
    with pytest.raises(ValueError):
        homogenization_stat(f, n, a, 0.9, 2)
    with pytest.raises(ValueError):
        homogenization_stat(f, n, a, 1.2, 20)


def test_cluster_tail_is_monotone():
    law = make_tail_law(2)
    fields = [ConductanceField(law, s) for s in range(3)]
    ct = cluster_tail_fit(fields, 1.0, 20, 10, s_range=(1, 4))
    assert np.all(np.diff(ct.survival) <= 0) and ct.slope < 0


def test_gamma_cut_bound_holds():
    law = make_tail_law(2)
    fields = [ConductanceField(law, s) for s in range(2)]
    gm = gamma_moment_check(fields, 1.0, (4, 6), (0.0, 0.1), edges_per_field=4)
    assert gm.bound_ok
    np.testing.assert_allclose(gm.moments[:, 0], 1.0)
    assert np.all(gm.moments[:, 1] >= 1.0)


# -- heat kernel bounds ----------------------------------------------------


def test_hk_bounds_homogeneous():
    f = homogeneous_field(2)
    region = LatticeRegion(2, 20)
    hb = hk_bound_stats(f, region, [2.0, 4.0, 8.0, 16.0], max_dist=6, green_half_side=10, green_range=(2, 5))
    # t p_t(0,0) -> 1/(2 pi sigma^2 / ...) stays bounded and positive
    assert 0 < hb.c6 <= hb.c4 and hb.c3 > 0 and hb.c12 > 0


# -- marginals -------------------------------------------------------------


def test_qfclt_homogeneous_control():
    # unit conductances: the CSRW at level s sits at Y_{s/4}, variance s/2 per coordinate
    n, t = 8, 1.0
    mt = qfclt_marginal_test(homogeneous_field(2), n, t, 5000, 3, variance=math.log(n) * t / 2)
    assert np.all(mt.ks < ks_band(5000))
    assert qfclt_marginal_test(homogeneous_field(2), n, 0.0, 10, 0, sigma_v2=2.0).skipped


def test_llt_shift_invariant_matches_per_start():
    f = homogeneous_field(2)
    kw = dict(ball_radius=1.0, spacing=0.5, sigma_v2=2.0, min_expected=20.0)
    a = llt_ratio(f, 8, [1.0], 0.5, 20000, 2, **kw)
    b = llt_ratio(f, 8, [1.0], 0.5, 4000, 3, shift_invariant=True, **kw)
    assert b.walkers == a.walkers
    ok = np.isfinite(a.ratio) & np.isfinite(b.ratio)
    z = (a.ratio[ok] - b.ratio[ok]) / np.hypot(a.stderr[ok], b.stderr[ok])
    assert np.abs(z).max() < 4.0
