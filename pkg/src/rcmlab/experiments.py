"""Statistical harnesses for the random conductance model.

Each function here turns a limit statement or a quantitative estimate into a
finite-size statistic with an uncertainty: i.i.d. heavy-tailed sums, ergodic
averages of truncated conductances, the diffusion constant sigma_V^2, the
truncated clock and its first two moments, heat-kernel ratios against the
Gaussian limit, truncation probabilities, tile sums of effective
conductances, and cluster statistics.

Results are plain dataclasses. ``ExperimentReport`` packages estimates and
threshold checks for the command line.
"""

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np
from scipy import integrate, special, stats

from .env import (
    ConductanceField,
    LatticeRegion,
    TruncatedView,
    ball_sites,
    big_edge_set,
    percolation_clusters,
    raw_edge,
)
from .rng import numpy_generator
from .solver import BudgetError, gamma_n, gaussian_density, green, heat_kernel, heat_kernel_integral
from .walk import run_batch, run_positions

# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class Stat:
    key: str
    value: float
    stderr: float
    n: int

    def as_dict(self):
        return {"key": self.key, "value": _num(self.value), "stderr": _num(self.stderr), "n": int(self.n)}


@dataclass
class Check:
    """Threshold comparison lo <= value <= hi."""

    key: str
    value: float
    lo: float = -math.inf
    hi: float = math.inf

    @property
    def passed(self):
        return bool(self.lo <= self.value <= self.hi)

    def as_dict(self):
        return {"key": self.key, "value": _num(self.value), "lo": _num(self.lo), "hi": _num(self.hi), "pass": self.passed}


@dataclass
class ExperimentReport:
    """Estimates with uncertainties plus threshold checks for one experiment.

    ``passed`` depends only on the checks. ``tables`` maps a file stem to
    ``(header, rows)`` for CSV output; ``wall_time`` is kept out of files so
    reruns stay byte-identical.
    """

    name: str
    params: dict
    stats: list
    checks: list = field(default_factory=list)
    seeds: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    wall_time: float = 0.0

    def __post_init__(self):
        if not self.stats:
            raise ValueError(f"report {self.name!r} has no statistics")

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def failing(self):
        return [c.key for c in self.checks if not c.passed]

    def summary(self):
        return {
            "name": self.name,
            "params": self.params,
            "seeds": self.seeds,
            "stats": [s.as_dict() for s in self.stats],
            "checks": [c.as_dict() for c in self.checks],
            "notes": list(self.notes),
            "pass": self.passed,
        }


def _num(v):
    """JSON-safe float (infinities and NaN become strings)."""
    v = float(v)
    if math.isfinite(v):
        return v
    return "nan" if math.isnan(v) else ("inf" if v > 0 else "-inf")


# --------------------------------------------------------------------------
# distribution checks
# --------------------------------------------------------------------------


def ks_distance(sample, cdf, cdf_left=None):
    """Kolmogorov distance sup |F_n - F| allowing atoms in F.

    ``cdf_left(u)`` is F(u-); it defaults to ``cdf`` (continuous F). The sup
    is taken over both one-sided limits at every sample value, which is where
    the empirical function jumps.
    """
    u, counts = np.unique(np.asarray(sample, dtype=np.float64), return_counts=True)
    m = counts.sum()
    right = np.cumsum(counts) / m
    left = right - counts / m
    f_right = np.asarray(cdf(u), dtype=np.float64)
    f_left = f_right if cdf_left is None else np.asarray(cdf_left(u), dtype=np.float64)
    return float(max(np.max(np.abs(right - f_right)), np.max(np.abs(left - f_left))))


def ks_band(size, level=0.99):
    """Asymptotic one-sample KS critical value (1.628/sqrt(n) at 99%)."""
    return float(stats.kstwobign.isf(1.0 - level) / math.sqrt(size))


def law_ks(law, samples):
    """KS distance of conductance samples from the mixture law (atom at 1)."""
    return ks_distance(samples, law.cdf, lambda u: np.where(u <= 1.0, 0.0, law.cdf(u)))


# --------------------------------------------------------------------------
# classical i.i.d. analogue
# --------------------------------------------------------------------------


def pareto_draws(seed, size, salt=0):
    """xi_i with P(xi > t) = 1/t on [1, inf)."""
    u = numpy_generator(seed, 0xC1A5, salt).random(int(size))
    return 1.0 / (1.0 - u)


def truncation_levels(count, beta):
    """a_i = i (log i)^beta for i = 1..count (a_1 = 0)."""
    i = np.arange(1, int(count) + 1, dtype=np.float64)
    return i * np.log(i) ** beta


def truncated_pareto_mean(a):
    """E[xi 1{xi <= a}] = log a for a >= 1 and 0 below."""
    a = np.asarray(a, dtype=np.float64)
    return np.where(a >= 1.0, np.log(np.maximum(a, 1.0)), 0.0)


def mismatch_probabilities(a):
    """P(xi > a) = min(1, 1/a)."""
    a = np.asarray(a, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.where(a <= 1.0, 1.0, 1.0 / a)


@dataclass
class ClassicalSums:
    n: int
    t: np.ndarray
    U: np.ndarray
    V: np.ndarray
    M: np.ndarray
    mismatches: int


def classical_sums(n, beta, xi, t_grid=None):
    """U^(n), V^(n), M^(n) on ``t_grid`` from the first n draws of ``xi``.

    U sums xi_i, V sums the truncations xi_i 1{xi_i <= a_i}, M sums the
    centred truncations; all are divided by n log n.
    """
    if not 1.0 < beta < 2.0:
        raise ValueError(f"beta must lie in (1, 2), got {beta}")
    n = int(n)
    if n < 2 or len(xi) < n:
        raise ValueError("need n >= 2 and at least n draws")
    t_grid = np.linspace(0.0, 1.0, 101) if t_grid is None else np.asarray(t_grid, dtype=np.float64)
    x = np.asarray(xi[:n], dtype=np.float64)
    a = truncation_levels(n, beta)
    xt = np.where(x <= a, x, 0.0)
    norm = n * math.log(n)
    k = np.minimum(np.floor(n * t_grid + 1e-9).astype(np.int64), n)

    def partial(v):
        c = np.concatenate([[0.0], np.cumsum(v)])
        return c[k] / norm

    return ClassicalSums(n, t_grid, partial(x), partial(xt), partial(xt - truncated_pareto_mean(a)), int(np.sum(x > a)))


def sup_error_u(n, xi):
    """Exact sup over t in [0, 1] of |U^(n)_t - t| (U is a step function)."""
    n = int(n)
    c = np.concatenate([[0.0], np.cumsum(np.asarray(xi[:n], dtype=np.float64))]) / (n * math.log(n))
    k = np.arange(n) / n
    inner = np.maximum(np.abs(c[:-1] - k), np.abs(c[:-1] - k - 1.0 / n))
    return float(max(inner.max(), abs(c[-1] - 1.0)))


@dataclass
class ClassicalTrend:
    ns: tuple
    errors: np.ndarray  # (seeds, len(ns)) sup errors
    decreasing: np.ndarray  # per seed
    mismatch_counts: np.ndarray  # per seed, i <= max(ns)
    mismatch_mean: float
    mismatch_var: float

    @property
    def fraction_decreasing(self):
        return float(np.mean(self.decreasing))

    def pooled_z(self):
        s = len(self.mismatch_counts)
        return float((self.mismatch_counts.sum() - s * self.mismatch_mean) / math.sqrt(s * self.mismatch_var))


def classical_trend(beta, seeds, ns=(10**3, 10**4, 10**5, 10**6)):
    """Sup errors of U^(n) along nested prefixes of one i.i.d. sequence per seed."""
    ns = tuple(int(v) for v in ns)
    top = max(ns)
    a = truncation_levels(top, beta)
    p = mismatch_probabilities(a)
    errs = np.empty((len(seeds), len(ns)))
    counts = np.empty(len(seeds), dtype=np.int64)
    for r, s in enumerate(seeds):
        xi = pareto_draws(s, top)
        errs[r] = [sup_error_u(n, xi) for n in ns]
        counts[r] = int(np.sum(xi > a))
    dec = np.all(np.diff(errs, axis=1) < 0, axis=1)
    return ClassicalTrend(ns, errs, dec, counts, float(p.sum()), float(np.sum(p * (1 - p))))


# --------------------------------------------------------------------------
# diffusion constant
# --------------------------------------------------------------------------


@dataclass
class SigmaVEstimate:
    value: float
    ci: float  # 95% half-width
    stderr: float
    n: int
    walkers: int
    covariance: np.ndarray  # per unit time, of Y_{n^2 t}/n
    cov_stderr: np.ndarray


def sigma_v_from_displacements(disp, n, t):
    """sigma_V^2 from displacements Y_{n^2 t} - Y_0 (integer array, walkers x d)."""
    z = np.asarray(disp, dtype=np.float64) / n
    w, d = z.shape
    if w < 2:
        raise ValueError("need at least two walkers")
    zc = z - z.mean(axis=0)
    q = np.sum(zc * zc, axis=1) / (d * t) * (w / (w - 1))
    prod = z[:, :, None] * z[:, None, :] / t
    cov = prod.mean(axis=0)
    cov_se = prod.std(axis=0, ddof=1) / math.sqrt(w)
    se = float(q.std(ddof=1) / math.sqrt(w))
    return SigmaVEstimate(float(q.mean()), 1.96 * se, se, int(n), int(w), cov, cov_se)


def estimate_sigma_v(field_, n, walkers, t=1.0, seed=0, first_index=0):
    """sigma_V^2 as the per-coordinate variance rate of Y_{n^2 t}/n."""
    if n < 2 or walkers < 2 or t <= 0:
        raise ValueError("need n >= 2, walkers >= 2 and t > 0")
    starts = np.zeros((int(walkers), field_.d), dtype=np.int64)
    pos = run_positions(field_, starts, seed, [float(n * n * t)], first_index).positions[:, 0, :]
    return sigma_v_from_displacements(pos, n, t)


# --------------------------------------------------------------------------
# local limit theorem
# --------------------------------------------------------------------------


def llt_grid(d, K, spacing):
    """Points of spacing * Z^d within Euclidean distance K of the origin."""
    return ball_sites(d, K / spacing) * spacing


@dataclass
class LltResult:
    n: int
    times: np.ndarray
    starts: np.ndarray  # macroscopic x
    targets: np.ndarray  # macroscopic y
    ratio: np.ndarray  # (times, starts, targets), NaN where excluded
    stderr: np.ndarray
    hits: np.ndarray
    expected: np.ndarray
    sigma_v2: float
    sigma: SigmaVEstimate
    ball_size: int
    walkers: int
    excluded: int

    def extremes(self):
        r = self.ratio[np.isfinite(self.ratio)]
        if r.size == 0:
            return math.nan, math.nan
        return float(r.max()), float(r.min())

    def worst_stderr(self):
        s = self.stderr[np.isfinite(self.stderr)]
        return float(s.max()) if s.size else math.nan

    def rows(self):
        out = []
        d = self.starts.shape[1]
        for a, t in enumerate(self.times):
            for b, x in enumerate(self.starts):
                for c, y in enumerate(self.targets):
                    out.append([t, *x[:d], *y[:d], self.hits[a, b, c], self.expected[a, b, c], self.ratio[a, b, c], self.stderr[a, b, c]])
        return out


def _ball_occupancy(pos, centers, offsets):
    """Hits of each ball center + offsets by rows of ``pos``."""
    lo = np.minimum(pos.min(axis=0), (centers + offsets.min(axis=0)).min(axis=0))
    span = np.maximum(pos.max(axis=0), (centers + offsets.max(axis=0)).max(axis=0)) - lo + 1
    grid = np.zeros(tuple(int(s) for s in span), dtype=np.int64)
    np.add.at(grid, tuple((pos - lo).T), 1)
    out = np.zeros(len(centers), dtype=np.int64)
    for o in offsets:
        idx = centers + o - lo
        out += grid[tuple(idx.T)]
    return out


def llt_ratio(field_, n, times, K, walkers, seed, ball_radius=2.0, spacing=0.5, sigma_v2=None, min_expected=50.0, shift_invariant=False):
    """Ball-averaged n^d p_{n^2 t}(nx, ny) divided by the ball average of k_t(y - x).

    Starts x and targets y range over ``spacing * Z^d`` within K of the
    origin; ``walkers`` walkers run from each start. With ``sigma_v2=None``
    sigma_V^2 is estimated from the displacements of all walkers at the last
    time. Cells expecting fewer than ``min_expected`` hits are set to NaN
    and counted in ``excluded``.

    ``shift_invariant=True`` is for fields with p_t(x, y) = p_t(0, y - x)
    (constant conductances): the whole budget of ``walkers`` per start runs
    from the origin and every cell reads the ball around y - x.
    """
    times = np.sort(np.atleast_1d(np.asarray(times, dtype=np.float64)))
    if times[0] <= 0:
        raise ValueError("times must be positive")
    d = field_.d
    if d < 2:
        raise ValueError("need d >= 2")
    if abs(n * spacing - round(n * spacing)) > 1e-9:
        raise ValueError("n * spacing must be an integer")
    pts = llt_grid(d, K, spacing)
    lat = np.rint(pts * n).astype(np.int64)
    offsets = ball_sites(d, ball_radius)
    hits = np.zeros((len(times), len(pts), len(pts)), dtype=np.int64)
    disp = []
    if shift_invariant:
        walkers = int(walkers) * len(lat)
        pos = run_positions(field_, np.zeros((walkers, d), dtype=np.int64), seed, n * n * times).positions
        shifts = (lat[None, :, :] - lat[:, None, :]).reshape(-1, d)
        for a in range(len(times)):
            hits[a] = _ball_occupancy(pos[:, a, :], shifts, offsets).reshape(len(lat), len(lat))
        disp.append(pos[:, -1, :])
    else:
        for s, x in enumerate(lat):
            starts = np.tile(x, (int(walkers), 1))
            pos = run_positions(field_, starts, seed, n * n * times, first_index=s * int(walkers)).positions
            for a in range(len(times)):
                hits[a, s] = _ball_occupancy(pos[:, a, :], lat, offsets)
            disp.append(pos[:, -1, :] - x)
    sigma = sigma_v_from_displacements(np.concatenate(disp), n, times[-1])
    s2 = sigma.value if sigma_v2 is None else float(sigma_v2)
    kbar = np.empty_like(hits, dtype=np.float64)
    for a, t in enumerate(times):
        for b, x in enumerate(lat):
            for c, y in enumerate(lat):
                kbar[a, b, c] = gaussian_density(s2, d, t, (y + offsets - x) / n).mean()
    size = len(offsets)
    expected = walkers * size * kbar / n**d
    est = hits * n**d / (walkers * size)
    ratio = est / kbar
    stderr = ratio / np.sqrt(np.maximum(hits, 1))
    bad = expected < min_expected
    ratio[bad] = np.nan
    stderr[bad] = np.nan
    return LltResult(int(n), times, pts, pts, ratio, stderr, hits, expected, s2, sigma, size, int(walkers), int(bad.sum()))


# --------------------------------------------------------------------------
# clock process
# --------------------------------------------------------------------------


def _base(field_):
    return field_.base if isinstance(field_, TruncatedView) else field_


def clock_box(field_, n, K, a, margin=4, eager=True):
    """Truncated dynamics in a free box of half-side ceil(K n) + margin."""
    base = _base(field_)
    region = LatticeRegion(base.d, int(math.ceil(K * n)) + int(margin), None, "free")
    boxed = base.restrict(region, "eager" if eager else "lazy")
    return boxed.truncate(a, n)


@dataclass
class ClockExpectation:
    value: float
    n: int
    t: float
    box_half_side: int
    steps: int
    rate: float


def clock_expectation_kernel(field_, n, t, a, K, margin=4, tol=1e-9, budget=2e10):
    """E of the truncated clock from the kernel identity.

    sum_{|x| <= Kn} mu~_x int_0^{n^2 t} p_s(0, x) ds / (n^2 log n), with p the
    kernel of the truncated dynamics in a free box (see ``clock_box``). The
    time integral is exact up to the Poisson tail ``tol``.
    """
    f = clock_box(field_, n, K, a, margin)
    d = f.d
    kf = heat_kernel_integral(f, np.zeros(d, dtype=np.int64), [n * n * t], tol=tol, budget=budget)
    sites = ball_sites(d, K * n)
    mu = f.site_values(sites)
    occ = kf.values[0, f.region.index(sites)]
    val = float(np.sum(mu * occ) / (n * n * math.log(n)))
    return ClockExpectation(val, int(n), float(t), f.region.half_side, kf.steps, kf.rate)


def truncated_clock_samples(field_, n, times, a, K, walkers, seed, dynamics="truncated", margin=4, first_index=0):
    """S~^(n) at each of ``times`` for ``walkers`` walkers from the origin.

    ``dynamics='truncated'`` runs the walk on the truncated field in the free
    box of ``clock_box``; ``'full'`` runs it on ``field_`` itself and only
    the weights are truncated.
    """
    if dynamics not in ("truncated", "full"):
        raise ValueError(f"unknown dynamics {dynamics!r}")
    f = clock_box(field_, n, K, a, margin) if dynamics == "truncated" else _base(field_)
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    starts = np.zeros((int(walkers), f.d), dtype=np.int64)
    res = run_batch(f, starts, seed, times=n * n * times, first_index=first_index, weight_cutoff=a * n * n, weight_radius=K * n)
    return res.weighted_clock / (n * n * math.log(n))


def clock_expectation_mc(field_, n, t, a, K, walkers, seed, dynamics="truncated", margin=4):
    """(mean, stderr) of S~^(n)_t over ``walkers`` walkers."""
    s = truncated_clock_samples(field_, n, [t], a, K, walkers, seed, dynamics, margin)[:, 0]
    return float(s.mean()), float(s.std(ddof=1) / math.sqrt(len(s)))


def a1_integral(K, t, delta, sigma_v2, d):
    """int_delta^t int_{|x| <= K} k_s(x) dx ds.

    The inner integral is P(|sigma_V W_s| <= K), a chi-square CDF.
    """
    if not 0 <= delta <= t:
        raise ValueError("need 0 <= delta <= t")
    if delta == t:
        return 0.0
    f = lambda s: stats.chi2.cdf(K * K / (sigma_v2 * s), d)
    return float(integrate.quad(f, delta, t, epsabs=0.0, epsrel=1e-6, limit=200)[0])


def clock_second_moment_bound(K, t, delta, sigma_v2, d, eps, nodes=40):
    """eps + 8 (1 + eps) int_delta^t int_{|x|<=K} k_s(x) int_0^{t-s} P(|x + sigma W_r| <= K) dr dx ds.

    The y-integral of k_r(x, y) over |y| <= K is a noncentral chi-square
    CDF; the remaining integrals use Gauss-Legendre rules in s, |x| and r.
    """
    if not 0 < delta < t:
        raise ValueError("need 0 < delta < t")
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    shell = 2.0 * math.pi ** (d / 2.0) / special.gamma(d / 2.0)

    def rule(lo, hi):
        return 0.5 * (hi - lo) * gx + 0.5 * (hi + lo), 0.5 * (hi - lo) * gw

    s_nodes, s_w = rule(delta, t)
    rho, rho_w = rule(0.0, K)
    total = 0.0
    for s, ws in zip(s_nodes, s_w):
        r_nodes, r_w = rule(0.0, t - s)
        ks = gaussian_density(sigma_v2, d, s, np.stack([rho] + [np.zeros_like(rho)] * (d - 1), axis=1))
        nc = rho[:, None] ** 2 / (sigma_v2 * r_nodes[None, :])
        inner = stats.ncx2.cdf(K * K / (sigma_v2 * r_nodes[None, :]), d, nc) @ r_w
        total += ws * np.sum(rho_w * shell * rho ** (d - 1) * ks * inner)
    return float(eps + 8.0 * (1.0 + eps) * total)


@dataclass
class SecondMoment:
    estimate: float
    stderr: float
    first_moment: float
    bound: float
    walkers: int

    @property
    def margin(self):
        return self.bound - self.estimate


def clock_second_moment(field_, n, t, delta, a, K, walkers, seed, sigma_v2, eps=0.5, dynamics="full"):
    """MC E(S~_t - S~_delta)^2 against the asymptotic bound."""
    s = truncated_clock_samples(field_, n, [delta, t], a, K, walkers, seed, dynamics)
    inc = s[:, 1] - s[:, 0]
    sq = inc * inc
    bound = clock_second_moment_bound(K, t, delta, sigma_v2, field_.d, eps)
    return SecondMoment(float(sq.mean()), float(sq.std(ddof=1) / math.sqrt(len(sq))), float(inc.mean()), bound, int(walkers))


@dataclass
class ClockTrend:
    ns: tuple
    means: np.ndarray  # (envs, ns)
    stderrs: np.ndarray
    target: float

    @property
    def gaps(self):
        return np.abs(self.means - self.target)

    @property
    def decreasing(self):
        return np.all(np.diff(self.gaps, axis=1) < 0, axis=1)


def clock_trend(law, env_seeds, ns, walkers, walk_seed, t=1.0, eager_half_side=None):
    """Mean of S^(n)_t = S_{n^2 t} / (n^2 log n) per environment and n."""
    means = np.empty((len(env_seeds), len(ns)))
    ses = np.empty_like(means)
    for r, es in enumerate(env_seeds):
        f = ConductanceField(law, es)
        for c, n in enumerate(ns):
            g = f
            if eager_half_side is not None:
                g = f.cached(eager_half_side(n))
            starts = np.zeros((int(walkers), law.d), dtype=np.int64)
            res = run_batch(g, starts, walk_seed, times=[n * n * t], first_index=c * int(walkers))
            v = res.clock[:, 0] / (n * n * math.log(n))
            means[r, c] = v.mean()
            ses[r, c] = v.std(ddof=1) / math.sqrt(len(v))
    return ClockTrend(tuple(ns), means, ses, 2.0 * t)


# --------------------------------------------------------------------------
# truncation probabilities
# --------------------------------------------------------------------------


@dataclass
class TruncationProbs:
    p_exit: float
    p_exit_se: float
    p_big: float
    p_big_se: float
    walkers: int


def _binom(hits, w):
    p = hits / w
    return float(p), float(math.sqrt(max(p * (1 - p), 1.0 / w) / w))


def truncation_probs(field_, n, K, a, t, walkers, seed, eager_margin=2, first_index=0):
    """Fractions of walkers that leave B(0, Kn), resp. visit a site of
    B(0, Kn) with mu_x >= a n^2, before time n^2 t."""
    d = field_.d
    f = _base(field_)
    if eager_margin is not None and f.region is None:
        f = f.cached(int(math.ceil(K * n)) + int(eager_margin))
    starts = np.zeros((int(walkers), d), dtype=np.int64)
    horizon = n * n * t
    res = run_batch(
        f,
        starts,
        seed,
        times=[horizon],
        first_index=first_index,
        exit_radius=K * n,
        big_threshold=a * n * n,
        big_radius=K * n,
    )
    pe = _binom(np.sum(res.exit_time < horizon), walkers)
    pb = _binom(np.sum(res.hit_time < horizon), walkers)
    return TruncationProbs(pe[0], pe[1], pb[0], pb[1], int(walkers))


def truncation_sweep(law, n, t, Ks, As, walkers, env_seeds, walk_seed):
    """Worst-case (over environments) truncation probabilities on a (K, a) grid.

    Returns arrays (len(Ks), len(As)) of max P_exit and max P_hit_big.
    """
    pe = np.zeros((len(Ks), len(As)))
    pb = np.zeros_like(pe)
    for es in env_seeds:
        f = ConductanceField(law, es)
        for i, K in enumerate(Ks):
            g = f.cached(int(math.ceil(K * n)) + 2)
            for j, a in enumerate(As):
                r = truncation_probs(g, n, K, a, t, walkers, walk_seed)
                pe[i, j] = max(pe[i, j], r.p_exit)
                pb[i, j] = max(pb[i, j], r.p_big)
    return pe, pb


# --------------------------------------------------------------------------
# ergodic averages
# --------------------------------------------------------------------------


@nb.njit(cache=True)
def _weighted_edge_sum(key, fp, lo, side, w, cutoff):
    """sum over box edges e = {x, y} with mu_e <= cutoff of mu_e (w_x + w_y)."""
    d = lo.shape[0]
    stride = np.empty(d, dtype=np.int64)
    s = 1
    for j in range(d - 1, -1, -1):
        stride[j] = s
        s *= side
    x = np.empty(d, dtype=np.int64)
    total = 0.0
    for idx in range(w.shape[0]):
        rem = idx
        for j in range(d - 1, -1, -1):
            x[j] = lo[j] + rem % side
            rem //= side
        wx = w[idx]
        for i in range(d):
            if x[i] - lo[i] + 1 >= side:
                continue
            wy = w[idx + stride[i]]
            if wx == 0.0 and wy == 0.0:
                continue
            v = raw_edge(key, x, i, fp)
            if v <= cutoff:
                total += v * (wx + wy)
    return total


def _ball_weights(d, R, n, f):
    """f(x/n) on the box [-R-1, R+1]^d, zero outside the Euclidean ball of radius R."""
    side = 2 * int(math.floor(R)) + 3
    lo = np.full(d, -(side // 2), dtype=np.int64)
    axis = np.arange(lo[0], lo[0] + side)
    grids = np.meshgrid(*([axis] * d), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=1)
    inside = np.sum(pts.astype(np.float64) ** 2, axis=1) <= R * R + 1e-9
    w = np.zeros(len(pts))
    w[inside] = np.asarray(f(pts[inside] / n), dtype=np.float64)
    return lo, side, w


@dataclass
class ErgodicAverage:
    value: float
    mean: float  # exact E I_n
    site_mean: float  # E mu~_x
    weight_sum: float  # sum_{|x| <= Kn} f(x/n)
    target: float  # 2 int_{|x| <= K} f
    n: int

    @property
    def relative_error(self):
        return self.value / self.mean - 1.0


def ball_volume(d, K):
    return math.pi ** (d / 2.0) / special.gamma(d / 2.0 + 1.0) * K**d


def riemann_ball_integral(f, d, K, m=64):
    """int_{|x| <= K} f by a midpoint lattice sum with spacing 1/m."""
    pts = ball_sites(d, K * m) / m
    return float(np.sum(f(pts)) / m**d)


def ergodic_average(field_, n, K, a, f=None, budget=5 * 10**8):
    """I_n = sum_{|x| <= Kn} mu~_x f(x/n) / (n^d log n) with its exact mean."""
    d = field_.d
    R = K * n
    if (2 * R + 3) ** d > budget:
        raise BudgetError("(K n)^d exceeds the enumeration budget")
    unit = f is None
    f = f or (lambda x: np.ones(len(x)))
    lo, side, w = _ball_weights(d, R, n, f)
    base = _base(field_)
    c = a * n * n
    total = _weighted_edge_sum(base.key, base.params(raw=True), lo, side, w, c)
    norm = n**d * math.log(n)
    site_mean = base.law.site_truncated_mean(c) if base.constant is None else (2 * d * base.constant if base.constant <= c else 0.0)
    wsum = float(w.sum())
    target = 2.0 * ball_volume(d, K) if unit else 2.0 * riemann_ball_integral(f, d, K)
    return ErgodicAverage(total / norm, site_mean * wsum / norm, site_mean, wsum, target, int(n))


def edge_truncated_moments(law, c):
    m1 = law.truncated_mean(c)
    return m1, law.truncated_second_moment(c) - m1 * m1


@dataclass
class PairAverage:
    value: float
    mean: float
    target: float
    n: int


def ergodic_pair_average(field_, n, K, a, g, budget=10**8):
    """J_n = sum_{|x|,|y| <= Kn} mu~_x mu~_y g(x/n, y/n) / (n^{2d} log^2 n).

    The exact mean uses E mu~_x mu~_y = (E mu~)^2 + Cov, where the covariance
    is 2d Var(mu~_e) on the diagonal and Var(mu~_e) for neighbours.
    """
    d = field_.d
    sites = ball_sites(d, K * n)
    N = len(sites)
    if N * N > budget:
        raise BudgetError("pair sum exceeds the budget")
    base = _base(field_)
    tv = base.truncate(a, n)
    mu = tv.site_values(sites)
    X = sites / n
    G = g(X[:, None, :], X[None, :, :])
    norm = (n**d * math.log(n)) ** 2
    value = float(mu @ G @ mu / norm)
    c = a * n * n
    if base.constant is None:
        m1, var_e = edge_truncated_moments(base.law, c)
    else:
        m1, var_e = (base.constant if base.constant <= c else 0.0), 0.0
    em = 2 * d * m1
    dist1 = np.sum(np.abs(sites[:, None, :] - sites[None, :, :]), axis=2)
    cov = np.where(dist1 == 0, 2 * d * var_e, np.where(dist1 == 1, var_e, 0.0))
    mean = float(np.sum((em * em + cov) * G) / norm)
    m = 10
    pts = ball_sites(d, K * m) / m
    gg = g(pts[:, None, :], pts[None, :, :])
    target = 4.0 * float(gg.sum()) / float(m) ** (2 * d)
    return PairAverage(value, mean, target, int(n))


# --------------------------------------------------------------------------
# homogenization tiles
# --------------------------------------------------------------------------


@dataclass
class TileSums:
    m: int
    b_n: int
    sums: np.ndarray  # per tile
    counts: np.ndarray  # big edges per tile
    expected_count: float
    gamma_mean: float
    gamma_se: float
    lam: float  # max sum / (m^d (a n^2)^-1 E gamma)

    @property
    def max_to_mean(self):
        mean = self.sums.mean()
        return float(self.sums.max() / mean) if mean > 0 else 0.0


def homogenization_stat(field_, n, a, theta1, b_n, tiles=2, gamma_samples=40, seed=0):
    """Per-tile sums of gamma_n(e) over edges with mu_e >= a n^2.

    Tiles are cubes of side m = ceil(n^theta1) covering [0, tiles m)^d; an
    edge belongs to the tile of its lower endpoint.
    """
    d = field_.d
    if theta1 <= 2.0 / d:
        raise ValueError("theta1 must exceed 2/d")
    m = int(math.ceil(n**theta1 - 1e-9))
    if m < 3 * b_n:
        raise ValueError(f"tile side {m} is below 3 b_n = {3 * b_n}")
    if tiles**d < 8:
        raise ValueError("need at least 8 tiles")
    base = _base(field_)
    span = tiles * m
    half = (span + 1) // 2
    region = LatticeRegion(d, half, (half,) * d)
    edges = big_edge_set(base, a, math.inf, n, region)
    keep = np.all((edges[:, :d] >= 0) & (edges[:, :d] < span), axis=1)
    edges = edges[keep]
    tile_of = np.ravel_multi_index(tuple((edges[:, :d] // m).T), (tiles,) * d) if len(edges) else np.zeros(0, dtype=np.int64)
    sums = np.zeros(tiles**d)
    counts = np.zeros(tiles**d, dtype=np.int64)
    for e, tk in zip(edges, tile_of):
        sums[tk] += gamma_n(base, e[:d], int(e[d]), b_n)
        counts[tk] += 1
    rng = numpy_generator(seed, 0x7113)
    xs = rng.integers(0, span, size=(gamma_samples, d))
    ds = rng.integers(0, d, size=gamma_samples)
    gam = np.array([gamma_n(base, x, int(i), b_n) for x, i in zip(xs, ds)])
    p_n = float(base.law.prob_ge(a * n * n))
    scale = m**d / (a * n * n) * gam.mean()
    return TileSums(m, int(b_n), sums, counts, d * m**d * p_n, float(gam.mean()), float(gam.std(ddof=1) / math.sqrt(len(gam))), float(sums.max() / scale))


# --------------------------------------------------------------------------
# clusters and exponential moments of gamma
# --------------------------------------------------------------------------


@dataclass
class ClusterTail:
    sizes: np.ndarray
    survival: np.ndarray  # P(|C(x)| >= s)
    slope: float
    intercept: float
    r2: float
    samples: int


def cluster_tail_fit(fields, a_p, half_side, inner, s_range=(4, 20)):
    """Linear fit of log P(|C(x)| >= s) over s in ``s_range``.

    Pools sites within sup-distance ``inner`` of the center over ``fields``.
    """
    sizes = []
    for f in fields:
        region = LatticeRegion(f.d, int(half_side))
        cm = percolation_clusters(_base(f), a_p, region)
        pts = LatticeRegion(f.d, int(inner)).coords()
        labs = cm.labels[region.index(pts)]
        sizes.append(np.array([cm.sizes[int(l)] for l in labs]))
    sizes = np.concatenate(sizes)
    s = np.arange(s_range[0], s_range[1] + 1)
    surv = np.array([np.mean(sizes >= v) for v in s])
    if np.any(surv <= 0):
        raise ValueError("empty tail bins; enlarge the sample")
    fit = stats.linregress(s, np.log(surv))
    return ClusterTail(s, surv, float(fit.slope), float(fit.intercept), float(fit.rvalue**2), int(len(sizes)))


@dataclass
class GammaMoments:
    b_values: tuple
    thetas: tuple
    moments: np.ndarray  # (b, theta) estimates of E exp(theta gamma')
    stderr: np.ndarray
    gamma_prime: np.ndarray  # (b, edges)
    cluster_sizes: np.ndarray  # |C(e)| per sampled edge
    bound_ok: bool  # gamma' <= 2 d a_p |C(e)| for every sampled edge


def gamma_moment_check(fields, a_p, b_values=(6, 10), thetas=(0.0, 0.05, 0.1, 0.2), edges_per_field=50, seed=0):
    """E exp(theta gamma'_n(e)) for edges sampled at the origin's neighbourhood.

    gamma'_n(e) = gamma_n(e) 1{diam C(e) < b_n / 2} with C(e) the cluster of
    {mu > a_p} containing e.
    """
    rng = numpy_generator(seed, 0x6A77)
    bmax = max(b_values)
    gp = [[] for _ in b_values]
    csz = []
    ok = True
    for f in fields:
        base = _base(f)
        d = base.d
        half = 4 * bmax + 4
        cm = percolation_clusters(base, a_p, LatticeRegion(d, half))
        # sampled edges are spaced 2 bmax + 2 apart so their gammas are independent
        step = 2 * bmax + 2
        grid = np.arange(-bmax - 1, bmax + 2, step)
        cand = np.stack(np.meshgrid(*([grid] * d), indexing="ij"), axis=-1).reshape(-1, d)
        pick = rng.permutation(len(cand))[: min(edges_per_field, len(cand))]
        for x in cand[pick]:
            i = int(rng.integers(0, d))
            size, diam = cm.edge_cluster(x[None, :], np.array([i]))
            csz.append(int(size[0]))
            for k, b in enumerate(b_values):
                g = gamma_n(base, x, i, b)
                val = 0.0 if diam[0] >= b / 2 else g
                if val > 2 * d * a_p * size[0] * (1 + 1e-9):
                    ok = False
                gp[k].append(val)
    gp = np.array(gp)
    th = np.asarray(thetas, dtype=np.float64)
    ex = np.exp(th[None, :, None] * gp[:, None, :])
    mom = ex.mean(axis=2)
    se = ex.std(axis=2, ddof=1) / math.sqrt(gp.shape[1])
    return GammaMoments(tuple(b_values), tuple(thetas), mom, se, gp, np.array(csz), ok)


# --------------------------------------------------------------------------
# heat-kernel bounds
# --------------------------------------------------------------------------


@dataclass
class HkBounds:
    c3: float  # sup t^{d/2} p_t(x, x)
    c4: float
    c5: float
    c6: float
    c7: float
    c12: float  # sup g(0, x) |x|^{d-2}
    t_range: tuple
    r_range: tuple
    green_range: tuple


def _fit_gaussian(logp, r2t):
    if len(logp) < 2 or np.ptp(r2t) == 0:
        return 0.0
    return float(-stats.linregress(r2t, logp).slope)


def hk_bound_stats(field_, region, times, x0=None, max_dist=8, eta=0.5, green_half_side=None, green_range=(3, 12), tol=1e-9):
    """Fitted constants of the Gaussian heat-kernel bounds on a box.

    (a) c3 = sup_t t^{d/2} p_t(x0, x0); (b) c5 from a log-linear fit over
    t >= |x - y|, then c4 = sup p t^{d/2} exp(c5 |x-y|^2 / t); (c) the same
    with an infimum over t >= |x - y|^{1 + eta}; (f) sup g(0, x) |x|^{d-2}
    over ``green_range`` when ``green_half_side`` is given.
    """
    d = field_.d
    x0 = np.zeros(d, dtype=np.int64) if x0 is None else np.asarray(x0, dtype=np.int64)
    times = np.sort(np.atleast_1d(np.asarray(times, dtype=np.float64)))
    kf = heat_kernel(field_, x0, times, region, tol)
    sites = ball_sites(d, max_dist, x0)
    sites = sites[region.contains(sites)]
    r = np.sqrt(np.sum((sites - x0) ** 2, axis=1).astype(np.float64))
    P = kf.values[:, region.index(sites)]  # (times, sites)
    T = times[:, None] * np.ones_like(r)[None, :]
    R = np.ones_like(times)[:, None] * r[None, :]
    scaled = P * T ** (d / 2.0)
    c3 = float(scaled[:, r == 0].max())
    ub = (T >= R) & (P > 0)
    c5 = max(_fit_gaussian(np.log(scaled[ub]), (R**2 / T)[ub]), 0.0)
    c4 = float(np.max(scaled[ub] * np.exp(c5 * (R**2 / T)[ub])))
    lb = (T >= np.maximum(R ** (1 + eta), 1.0)) & (P > 0)
    c7 = max(_fit_gaussian(np.log(scaled[lb]), (R**2 / T)[lb]), 0.0)
    c6 = float(np.min(scaled[lb] * np.exp(c7 * (R**2 / T)[lb])))
    c12 = math.nan
    if green_half_side is not None:
        box = LatticeRegion(d, int(green_half_side), tuple(x0), "dirichlet")
        gf = green(field_.restrict(box), x0, box)
        pts = ball_sites(d, green_range[1], x0)
        rr = np.sqrt(np.sum((pts - x0) ** 2, axis=1).astype(np.float64))
        sel = rr >= green_range[0]
        vals = gf.values[box.index(pts[sel])]
        c12 = float(np.max(vals * rr[sel] ** (d - 2)))
    return HkBounds(c3, c4, c5, c6, c7, c12, (float(times[0]), float(times[-1])), (0.0, float(max_dist)), tuple(green_range))


# --------------------------------------------------------------------------
# invariance principle marginals
# --------------------------------------------------------------------------


@dataclass
class MarginalTest:
    ks: np.ndarray  # per coordinate
    variance: float  # reference variance of each coordinate
    sample_var: np.ndarray
    correlations: np.ndarray  # off-diagonal sample correlations
    walkers: int
    skipped: bool = False


def qfclt_marginal_test(field_, n, t, walkers, seed, sigma_v2=None, variance=None, first_index=0):
    """KS distances of X^(n)_t = X_{n^2 log(n) t}/n against N(0, v) per coordinate.

    v = sigma_V^2 t / 2 unless ``variance`` is given. Each coordinate is
    jittered by an independent uniform on [-1/(2n), 1/(2n)] and v is raised by
    1/(12 n^2) to match.
    """
    d = field_.d
    if t == 0:
        return MarginalTest(np.zeros(d), 0.0, np.zeros(d), np.zeros(d * (d - 1) // 2), int(walkers), True)
    if variance is None:
        if sigma_v2 is None:
            raise ValueError("give sigma_v2 or variance")
        variance = sigma_v2 * t / 2.0
    level = n * n * math.log(n) * t
    starts = np.zeros((int(walkers), d), dtype=np.int64)
    res = run_batch(field_, starts, seed, levels=[level], first_index=first_index)
    jit = numpy_generator(seed, 0x717, first_index).random((int(walkers), d)) - 0.5
    z = (res.csrw[:, 0, :] + jit) / n
    v = variance + 1.0 / (12.0 * n * n)
    ks = np.array([stats.kstest(z[:, j], stats.norm(scale=math.sqrt(v)).cdf).statistic for j in range(d)])
    corr = np.corrcoef(z.T)[np.triu_indices(d, 1)]
    return MarginalTest(ks, float(variance), z.var(axis=0, ddof=1), corr, int(walkers))

