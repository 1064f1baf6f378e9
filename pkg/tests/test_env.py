import math
from collections import deque

import mpmath
import numpy as np
import pytest

from rcmlab.env import (
    ConductanceField,
    LatticeRegion,
    ball_sites,
    big_edge_set,
    homogeneous_field,
    iid_conductances,
    load_binary,
    make_tail_law,
    neighbour_offsets,
    percolation_clusters,
    save_binary,
    save_csv,
)
from rcmlab.experiments import law_ks


def test_law_survival_is_c_over_u():
    law = make_tail_law(3)
    for u in [1.0, 2.0, 10.0, 1e6]:
        assert law.sf(u) == pytest.approx(1 / (6 * u), rel=1e-14)
    assert law.cdf(0.999) == 0.0
    assert law.cdf(1.0) == pytest.approx(1 - 1 / 6)
    assert law.prob_ge(1.0) == 1.0


def test_law_rejects_bad_parameters():
    with pytest.raises(ValueError):
        make_tail_law(1)
    with pytest.raises(ValueError):
        make_tail_law(3, alpha=1.5)
    with pytest.raises(ValueError):
        make_tail_law(3, tail_c=0.0)


def test_samples_follow_law():
    law = make_tail_law(3)
    x = iid_conductances(law, 5, 200000)
    assert law_ks(law, x) < 1.63 / math.sqrt(len(x))
    assert abs(np.mean(x == 1.0) - 5 / 6) < 4 * math.sqrt(5 / 36 / len(x))


def test_rho_law_samples_follow_law():
    law = make_tail_law(2, rho=0.5)
    x = iid_conductances(law, 2, 100000)
    assert law_ks(law, x) < 1.63 / math.sqrt(len(x))


@pytest.mark.parametrize("c", [1.0, 3.0, 64.0, 1e4])
def test_truncated_moments_against_quadrature(c):
    law = make_tail_law(3)
    tail = law.tail_c
    # atom at 1 plus the Pareto density tail / u^2 on (1, c]
    m1 = (1 - tail) + tail * mpmath.quad(lambda u: u / u**2, [1, c])
    m2 = (1 - tail) + tail * mpmath.quad(lambda u: u**2 / u**2, [1, c])
    assert law.truncated_mean(c) == pytest.approx(float(m1), rel=1e-12)
    assert law.truncated_second_moment(c) == pytest.approx(float(m2), rel=1e-12)
    assert law.site_truncated_mean(c) == pytest.approx(2 * 3 - 1 + math.log(c), rel=1e-12)


def test_rho_truncated_mean_against_quadrature():
    law = make_tail_law(3, rho=1.0)
    c = 500.0
    # branch survival G(u) = exp(logc) ln(u)^rho / u^alpha on [u0, inf), continuous at u0
    G = lambda u: mpmath.e ** law.log_c * mpmath.log(u) ** law.rho / u**law.alpha
    dens = lambda u: -G(u) * (law.rho / (u * mpmath.log(u)) - law.alpha / u)
    assert float(G(law.u0)) == pytest.approx(1.0, rel=1e-12)
    m = (1 - law.tail_c) + law.tail_c * mpmath.quad(lambda u: u * dens(u), [law.u0, c])
    assert law.truncated_mean(c) == pytest.approx(float(m), rel=1e-7)


def test_edges_symmetric_and_consistent():
    law = make_tail_law(3)
    f = ConductanceField(law, 9)
    x = np.array([2, -1, 5])
    y = x + np.array([0, 1, 0])
    assert f.edge(x, y) == f.edge(y, x) == f.edge_dir(x, 1)
    with pytest.raises(ValueError):
        f.edge(x, x + np.array([1, 1, 0]))
    # site conductance is the sum of the six incident edges
    total = sum(f.edge(x, x + o) for o in neighbour_offsets(3))
    assert f.site_conductance(x) == pytest.approx(total)


def test_eager_equals_lazy():
    law = make_tail_law(2)
    region = LatticeRegion(2, 6)
    lazy = ConductanceField(law, 4)
    eager = lazy.eager(region)
    np.testing.assert_array_equal(lazy.box_edges(region), eager.box_edges(region))
    pts = np.array([[0, 0], [6, 6], [7, 0], [-9, 3]])
    for i in range(2):
        np.testing.assert_array_equal(lazy.raw_edges(pts, np.full(4, i)), eager.raw_edges(pts, np.full(4, i)))


def test_truncation_and_free_region():
    law = make_tail_law(2)
    region = LatticeRegion(2, 5)
    f = ConductanceField(law, 1, region)
    tv = f.truncate(1.0, 3)
    raw = f.box_edges(region)
    np.testing.assert_array_equal(tv.box_edges(region), np.where(raw <= 9.0, raw, 0.0))
    # an edge leaving the free box has zero conductance
    assert f.edge_dir([5, 0], 0) == 0.0
    assert f.edge_dir([4, 0], 0) == raw[region.index(np.array([4, 0])), 0]


def test_homogeneous_field():
    f = homogeneous_field(3, 2.5)
    assert f.site_conductance([1, 2, 3]) == pytest.approx(15.0)


def test_binary_and_csv_roundtrip(tmp_path):
    law = make_tail_law(3)
    region = LatticeRegion(3, 2, (1, 0, -1))
    f = ConductanceField(law, 12)
    save_binary(f, tmp_path / "e.bin", region)
    header, table = load_binary(tmp_path / "e.bin")
    assert header["d"] == 3 and header["half_side"] == 2 and tuple(header["center"]) == (1, 0, -1)
    np.testing.assert_array_equal(table, f.box_edges(region))
    save_csv(f, tmp_path / "e.csv", region)
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "x1,x2,x3,y1,y2,y3,mu"
    assert len(lines) - 1 == 3 * 5 * 5 * 4
    x1, x2, x3, y1, y2, y3, mu = lines[1].split(",")
    assert float(mu) == f.edge([int(x1), int(x2), int(x3)], [int(y1), int(y2), int(y3)])


def test_ball_sites_counts():
    assert len(ball_sites(2, 1)) == 5
    assert len(ball_sites(3, 1)) == 7
    assert len(ball_sites(2, 2)) == 13


def _bfs_clusters(f, region, a_p):
    coords = [tuple(c) for c in region.coords()]
    inside = set(coords)
    seen, size = {}, {}
    for c in coords:
        if c in seen:
            continue
        comp, queue = [c], deque([c])
        seen[c] = c
        while queue:
            x = queue.popleft()
            for o in neighbour_offsets(region.d):
                y = tuple(np.add(x, o))
                if y in inside and y not in seen and f.edge(x, y) > a_p:
                    seen[y] = c
                    comp.append(y)
                    queue.append(y)
        for y in comp:
            size[y] = len(comp)
    return size


def test_clusters_match_bfs():
    law = make_tail_law(2)
    region = LatticeRegion(2, 6)
    f = ConductanceField(law, 21)
    cm = percolation_clusters(f, 1.0, region)
    ref = _bfs_clusters(f, region, 1.0)
    for c in region.coords():
        assert cm.cluster_size(c) == ref[tuple(c)]


def test_clusters_reject_supercritical():
    law = make_tail_law(2, tail_c=0.9)
    with pytest.raises(ValueError, match="supercritical"):
        percolation_clusters(ConductanceField(law, 0), 1.0, LatticeRegion(2, 3))


def test_big_edge_set():
    law = make_tail_law(2)
    region = LatticeRegion(2, 8)
    f = ConductanceField(law, 3)
    n = 2
    e = big_edge_set(f, 1.0, 5.0, n, region)
    for row in e:
        v = f.edge_dir(row[:2], row[2])
        assert 4.0 <= v < 20.0
    table = f.box_edges(region)
    # count independently over interior edges
    count = 0
    for s, c in enumerate(region.coords()):
        for i in range(2):
            if c[i] < region.hi[i] and 4.0 <= table[s, i] < 20.0:
                count += 1
    assert count == len(e)
