import itertools
import math

import numpy as np
import pytest
from scipy import linalg, sparse
from scipy.special import ive

from rcmlab.env import ConductanceField, LatticeRegion, ball_sites, homogeneous_field, make_tail_law
from rcmlab.solver import (
    BudgetError,
    box_operator,
    effective_conductance,
    effective_conductance_graph,
    gamma_site,
    gaussian_density,
    green,
    green_extrapolated,
    heat_kernel,
    heat_kernel_integral,
    kernel_interpolate,
    lattice_power_sum,
    lattice_shell_counts,
    load_grid,
    mc_heat_kernel,
)

# G(0,0) of the simple random walk on Z^3 (Watson); the VSRW with unit
# conductances jumps at rate 6, so its Green function is G / 6.
WATSON_G = 1.516386059151978
BOX = LatticeRegion(2, 3)


@pytest.fixture(scope="module")
def small_random():
    law = make_tail_law(2, tail_c=0.5)
    # the table reaches one site past the box so Dirichlet problems see exit edges
    table = LatticeRegion(2, 4)
    return ConductanceField(law, 11, table).eager(table)


def _dense_generator(field_, region):
    op = box_operator(field_, region)
    return op.W.toarray() - np.diag(op.mu)


def test_bessel_kernel_homogeneous():
    f = homogeneous_field(2, 1.0, LatticeRegion(2, 30))
    t = 3.0
    kf = heat_kernel(f, [0, 0], [t], tol=1e-12)
    for x in [(0, 0), (1, 0), (2, -3), (5, 5)]:
        exact = np.prod([ive(abs(c), 2 * t) for c in x])
        assert kf.value(x) == pytest.approx(exact, abs=1e-11)


@pytest.mark.parametrize("boundary", ["free", "dirichlet"])
def test_kernel_matches_expm(small_random, boundary):
    region = BOX.with_boundary(boundary)
    L = _dense_generator(small_random, region)
    x0 = np.array([1, -1])
    kf = heat_kernel(small_random, x0, [0.0, 0.3, 1.7], region=region, tol=1e-12)
    e = np.zeros(region.n_sites)
    e[region.index(x0)] = 1
    for k, t in enumerate(kf.times):
        np.testing.assert_allclose(kf.values[k], linalg.expm(L * t) @ e, atol=1e-11)


def test_kernel_symmetry_and_mass(small_random):
    a, b = np.array([0, 0]), np.array([2, -1])
    ka = heat_kernel(small_random, a, [1.0], BOX, tol=1e-12)
    kb = heat_kernel(small_random, b, [1.0], BOX, tol=1e-12)
    assert ka.value(b) == pytest.approx(kb.value(a), abs=1e-12)
    assert ka.mass()[0] == pytest.approx(1.0, abs=1e-12)


def test_kernel_integral_matches_resolvent(small_random):
    region = BOX.with_boundary("dirichlet")
    L = _dense_generator(small_random, region)
    x0 = np.array([0, 1])
    e = np.zeros(region.n_sites)
    e[region.index(x0)] = 1
    T = [0.5, 2.0]
    ki = heat_kernel_integral(small_random, x0, T, region=region, tol=1e-13)
    for k, t in enumerate(T):
        exact = np.linalg.solve(-L, e - linalg.expm(L * t) @ e)
        np.testing.assert_allclose(ki.values[k], exact, atol=1e-11)


def test_budget_error():
    f = homogeneous_field(2, 1e6, LatticeRegion(2, 5))
    with pytest.raises(BudgetError):
        heat_kernel(f, [0, 0], [100.0], budget=1e6)


def test_green_needs_exit_edges():
    region = LatticeRegion(2, 2)
    f = ConductanceField(make_tail_law(2), 1, region).eager(region)
    with pytest.raises(ValueError, match="infinite"):
        green(f, [0, 0], region)


def test_bad_tolerance():
    f = homogeneous_field(2, 1.0, LatticeRegion(2, 2))
    with pytest.raises(ValueError):
        heat_kernel(f, [0, 0], [1.0], tol=1e-3)


def test_green_matches_dense_solve(small_random):
    region = BOX.with_boundary("dirichlet")
    L = _dense_generator(small_random, region)
    g = green(small_random, [1, 2], region, tol=1e-13)
    e = np.zeros(region.n_sites)
    e[region.index([1, 2])] = 1
    np.testing.assert_allclose(g.values, np.linalg.solve(-L, e), rtol=1e-9, atol=1e-12)
    assert g.residual < 1e-12


def test_green_watson():
    gx = green_extrapolated(homogeneous_field(3), half_sides=(10, 20), tol=1e-11)
    assert gx.values[0] < gx.values[1] < WATSON_G / 6
    assert gx.extrapolated == pytest.approx(WATSON_G / 6, rel=5e-3)


def test_grid_roundtrip(tmp_path, small_random):
    kf = heat_kernel(small_random, [0, 0], [0.5, 1.0], BOX, tol=1e-10)
    kf.save_binary(tmp_path / "k.bin")
    kind, region, src, times, tol, values = load_grid(tmp_path / "k.bin")
    assert kind == "kernel" and region.n_sites == kf.region.n_sites
    np.testing.assert_array_equal(values, kf.values)
    np.testing.assert_array_equal(times, kf.times)
    g = green(small_random, [0, 0], BOX)
    g.save_binary(tmp_path / "g.bin")
    kind, _, _, _, _, values = load_grid(tmp_path / "g.bin")
    assert kind == "green"
    np.testing.assert_array_equal(values[0], g.values)


def test_interpolation_at_sites(small_random):
    kf = heat_kernel(small_random, [0, 0], [1.0], BOX, tol=1e-10)
    for y in [(0, 0), (3, -3), (-2, 1)]:
        assert kernel_interpolate(kf, y) == pytest.approx(kf.value(y))
    mid = kernel_interpolate(kf, (0.5, 0.0))
    assert mid == pytest.approx(0.5 * (kf.value((0, 0)) + kf.value((1, 0))))


def test_series_and_parallel_conductance():
    # path 0 - 1 - 2 with weights 2 and 3, plus a direct 0 - 2 edge of weight 1
    W = sparse.csr_matrix(np.array([[0, 2, 1], [2, 0, 3], [1, 3, 0]], dtype=float))
    res = effective_conductance_graph(W, [0], [2])
    assert res.value == pytest.approx(1 / (1 / 2 + 1 / 3) + 1, rel=1e-10)
    assert res.flux == pytest.approx(res.energy, rel=1e-8)


def test_ceff_thomson_bounds(small_random):
    # Rayleigh monotonicity: C_eff lies between the series and direct-edge bounds
    region = BOX
    A = [[0, 0]]
    res = effective_conductance(small_random, A, None, region)
    mu0 = sum(small_random.edges(np.array([[0, 0]]), np.array([i]))[0] for i in range(2))
    mu0 += sum(small_random.edges(np.array([[0, 0]]) - np.eye(2, dtype=np.int64)[i], np.array([i]))[0] for i in range(2))
    assert 0 < res.value <= mu0 + 1e-12
    assert res.flux == pytest.approx(res.energy, rel=1e-7)


def test_gamma_site_homogeneous_decreases():
    f = homogeneous_field(3)
    vals = [gamma_site(f, [0, 0, 0], b) for b in (2, 4, 8)]
    assert vals[0] > vals[1] > vals[2]
    # capacity of a point in Z^3 for the rate-6 walk is 1 / g(0,0)
    assert vals[2] == pytest.approx(6 / WATSON_G, rel=0.15)


def test_shell_counts_brute_force():
    for d in (2, 3):
        counts = lattice_shell_counts(d, 30)
        brute = np.zeros(31, dtype=np.int64)
        for x in itertools.product(range(-6, 7), repeat=d):
            m = sum(c * c for c in x)
            if m <= 30:
                brute[m] += 1
        np.testing.assert_array_equal(counts, brute)


def test_power_sum_brute_force():
    pts = ball_sites(2, 7.5)
    r = np.sqrt(np.sum(pts.astype(float) ** 2, axis=1))
    r = r[r >= 1]
    assert lattice_power_sum(2, 2.5, 3, -2.0) == pytest.approx(np.sum(r**-2.0), rel=1e-12)


def test_gaussian_density_normalised():
    h = 0.05
    g = np.arange(-8, 8, h)
    X, Y = np.meshgrid(g, g, indexing="ij")
    pts = np.stack([X, Y], axis=-1)
    total = gaussian_density(1.3, 2, 0.7, pts).sum() * h * h
    assert total == pytest.approx(1.0, rel=1e-6)
    with pytest.raises(ValueError):
        gaussian_density(1.0, 2, 0.0, pts)


def test_mc_kernel_agrees_with_exact(small_random):
    t = 1.0
    kf = heat_kernel(small_random, [0, 0], [t], tol=1e-12)
    centers = np.array([[0, 0], [1, 1]])
    mc = mc_heat_kernel(small_random, [0, 0], t, 20000, 1.0, centers, walk_seed=3)
    for c, est, se in zip(centers, mc.estimate, mc.stderr):
        ball = ball_sites(2, 1.0, c)
        exact = np.mean([kf.value(y) for y in ball])
        assert abs(est - exact) < 4 * se + 1e-12
