"""Deterministic oracles: heat kernels, Green functions, effective conductances.

Everything here works on a finite box. The generator of the VSRW restricted
to a box is ``L = W - diag(mu)``, where ``W`` holds the conductances of the
edges inside the box and ``mu`` the site totals. With a free boundary the
edges leaving the box are dropped (mass is conserved); with a Dirichlet
boundary they stay in ``mu`` and act as killing.
"""

import math
import struct
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.signal import fftconvolve
from scipy.sparse.linalg import LinearOperator, cg
from scipy.stats import poisson

from .env import LatticeRegion, ball_sites
from .walk import run_positions


class BudgetError(ValueError):
    """A deterministic computation would exceed its configured cost budget."""


# --------------------------------------------------------------------------
# box operators
# --------------------------------------------------------------------------


@dataclass
class BoxOperator:
    """``W`` (symmetric, csr), site totals ``mu`` and killing ``kill`` on a box."""

    region: LatticeRegion
    W: sparse.csr_matrix
    mu: np.ndarray
    kill: np.ndarray

    @property
    def rate(self):
        return float(self.mu.max())

    def generator_apply(self, v):
        return self.W @ v - self.mu * v

    def dirichlet_matrix(self):
        """-L as a csr matrix (positive definite when kill is nonzero somewhere)."""
        return (sparse.diags(self.mu) - self.W).tocsr()


def box_operator(field_, region=None):
    """Restrict the field's VSRW generator to ``region`` (default: the field's)."""
    region = region or field_.region
    if region is None:
        raise ValueError("a finite region is required")
    d = region.d
    coords = region.coords()
    n = region.n_sites
    stride = np.array([region.side ** (d - 1 - i) for i in range(d)], dtype=np.int64)
    rows, cols, vals = [], [], []
    kill = np.zeros(n)
    idx = np.arange(n)
    for i in range(d):
        dirs = np.full(n, i, dtype=np.int64)
        up = field_.edges(coords, dirs)
        inner = coords[:, i] < region.hi[i]
        rows.append(idx[inner])
        cols.append(idx[inner] + stride[i])
        vals.append(up[inner])
        if region.boundary == "dirichlet":
            kill[~inner] += up[~inner]
            edge_lo = coords[:, i] == region.lo[i]
            lower = coords[edge_lo].copy()
            lower[:, i] -= 1
            kill[edge_lo] += field_.edges(lower, dirs[edge_lo])
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate(vals)
    W = sparse.coo_matrix((np.concatenate([v, v]), (np.concatenate([r, c]), np.concatenate([c, r]))), shape=(n, n)).tocsr()
    W.eliminate_zeros()
    mu = np.asarray(W.sum(axis=1)).ravel() + kill
    return BoxOperator(region, W, mu, kill)


# --------------------------------------------------------------------------
# heat kernel
# --------------------------------------------------------------------------


@dataclass
class KernelField:
    """p_t(x0, y) on a box for each t in ``times`` (rows of ``values``)."""

    source: np.ndarray
    times: np.ndarray
    region: LatticeRegion
    values: np.ndarray
    tol: float
    rate: float = 0.0
    steps: int = 0

    def value(self, y, k=0):
        return float(self.values[k, self.region.index(y)])

    def mass(self):
        return self.values.sum(axis=1)

    def grid(self, k=0):
        return self.values[k].reshape(self.region.shape)

    def to_csv(self, path, header_extra=""):
        coords = self.region.coords()
        d = self.region.d
        cols = ",".join(f"y{j + 1}" for j in range(d))
        with open(path, "w") as fh:
            if header_extra:
                fh.write(header_extra)
            fh.write(f"t,{cols},p\n")
            for k, t in enumerate(self.times):
                for c, v in zip(coords, self.values[k]):
                    fh.write(f"{t!r}," + ",".join(str(int(a)) for a in c) + f",{v!r}\n")

    def save_binary(self, path):
        _save_grid(path, b"RCMKER01", self.region, self.source, self.times, self.tol, self.values)


@dataclass
class GreenField:
    """g_B(x0, y) on a Dirichlet box, with the CG residual achieved."""

    source: np.ndarray
    region: LatticeRegion
    values: np.ndarray
    residual: float
    iterations: int

    def value(self, y):
        return float(self.values[self.region.index(y)])

    def grid(self):
        return self.values.reshape(self.region.shape)

    def to_csv(self, path, header_extra=""):
        coords = self.region.coords()
        cols = ",".join(f"y{j + 1}" for j in range(self.region.d))
        with open(path, "w") as fh:
            if header_extra:
                fh.write(header_extra)
            fh.write(f"{cols},g\n")
            for c, v in zip(coords, self.values):
                fh.write(",".join(str(int(a)) for a in c) + f",{v!r}\n")

    def save_binary(self, path):
        _save_grid(path, b"RCMGRN01", self.region, self.source, np.zeros(0), self.residual, self.values[None, :])


def _save_grid(path, magic, region, source, times, tol, values):
    d = region.d
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<qq", d, region.half_side))
        fh.write(struct.pack(f"<{d}q", *region.center))
        fh.write(struct.pack(f"<{d}q", *np.asarray(source, dtype=np.int64)))
        fh.write(struct.pack("<dq", float(tol), len(times)))
        fh.write(np.asarray(times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


def load_grid(path):
    """Read a kernel or Green grid file; returns (kind, region, source, times, tol, values)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic not in (b"RCMKER01", b"RCMGRN01"):
            raise ValueError("not a grid file")
        d, half = struct.unpack("<qq", fh.read(16))
        center = struct.unpack(f"<{d}q", fh.read(8 * d))
        source = np.array(struct.unpack(f"<{d}q", fh.read(8 * d)), dtype=np.int64)
        tol, n_t = struct.unpack("<dq", fh.read(16))
        times = np.frombuffer(fh.read(8 * n_t), dtype="<f8").copy()
        values = np.frombuffer(fh.read(), dtype="<f8").copy()
    kind = "kernel" if magic == b"RCMKER01" else "green"
    region = LatticeRegion(d, half, center, "free" if kind == "kernel" else "dirichlet")
    return kind, region, source, times, tol, values.reshape(-1, region.n_sites)


def _poisson_window(m, tol):
    """Smallest index window [lo, hi] holding all but ``tol`` of Poisson(m)."""
    if m == 0.0:
        return 0, 0
    lo = int(poisson.ppf(tol / 2, m))
    hi = int(poisson.isf(tol / 2, m)) + 1
    return max(lo - 1, 0), hi


def _check_budget(steps, nnz, rate, t_max, budget):
    if steps * max(nnz, 1) > budget:
        raise BudgetError(
            f"uniformization needs about {steps} steps (rate {rate:.3g} x time {t_max:.3g}); "
            "truncate the field (TruncatedView), shrink the box, or use the Monte Carlo estimator"
        )


def heat_kernel(field_, x0, times, region=None, tol=1e-9, budget=2e10, initial=None):
    """p_t(x0, .) by uniformization on a box.

    With ``Lambda = max mu_x``, ``p_t = sum_k Pois(Lambda t; k) P^k delta_x0``
    where ``P = I + L / Lambda``. Poisson weights come from ``logpmf`` and the
    series keeps all but ``tol`` of the Poisson mass, so every row is within
    ``tol`` of the exact kernel in total variation. ``initial`` replaces the
    point mass by an arbitrary vector on the box.
    """
    if not 0.0 < tol <= 1e-6:
        raise ValueError("tol must lie in (0, 1e-6]")
    times = np.atleast_1d(np.asarray(times, dtype=np.float64))
    if np.any(times < 0):
        raise ValueError("times must be nonnegative")
    op = box_operator(field_, region)
    region = op.region
    rate = op.rate
    if rate <= 0.0:
        raise ValueError("the box has no edges")
    windows = [_poisson_window(rate * t, tol) for t in times]
    steps = max(hi for _, hi in windows)
    _check_budget(steps, op.W.nnz, rate, times.max(), budget)
    if initial is None:
        v = np.zeros(region.n_sites)
        v[region.index(x0)] = 1.0
    else:
        v = np.asarray(initial, dtype=np.float64).copy()
    out = np.zeros((len(times), region.n_sites))
    # weights for each time on its window
    weights = []
    for t, (lo, hi) in zip(times, windows):
        ks = np.arange(lo, hi + 1)
        weights.append((lo, hi, np.exp(poisson.logpmf(ks, rate * t)) if t > 0 else np.array([1.0])))
    inv = 1.0 / rate
    for k in range(steps + 1):
        for j, (lo, hi, w) in enumerate(weights):
            if lo <= k <= hi:
                out[j] += w[k - lo] * v
        if k < steps:
            v = v + inv * op.generator_apply(v)
    src = np.zeros(region.d, dtype=np.int64) if x0 is None else np.asarray(x0, dtype=np.int64)
    return KernelField(src, times, region, out, tol, rate, steps)


def heat_kernel_integral(field_, x0, horizons, region=None, tol=1e-9, budget=2e10):
    """int_0^T p_s(x0, .) ds for each T in ``horizons``, exactly in time.

    Uses int_0^T Pois(Lambda s; k) ds = P(Pois(Lambda T) > k) / Lambda, so the
    only error is the truncation of the k-sum (tail weights below ``tol``).
    """
    horizons = np.atleast_1d(np.asarray(horizons, dtype=np.float64))
    op = box_operator(field_, region)
    region = op.region
    rate = op.rate
    ms = rate * horizons
    steps = int(max(poisson.isf(tol, m) for m in ms)) + 2 if len(ms) else 0
    _check_budget(steps, op.W.nnz, rate, horizons.max(), budget)
    v = np.zeros(region.n_sites)
    v[region.index(x0)] = 1.0
    out = np.zeros((len(horizons), region.n_sites))
    ks = np.arange(steps + 1)
    w = np.stack([poisson.sf(ks, m) / rate for m in ms])
    inv = 1.0 / rate
    for k in range(steps + 1):
        out += w[:, k : k + 1] * v[None, :]
        if k < steps:
            v = v + inv * op.generator_apply(v)
    return KernelField(np.asarray(x0, dtype=np.int64), horizons, region, out, tol, rate, steps)


def kernel_interpolate(kf, point, k=0):
    """Multilinear interpolation of a kernel (or any box grid) at a real point."""
    region = kf.region
    p = np.asarray(point, dtype=np.float64)
    lo = region.lo.astype(np.float64)
    hi = region.hi.astype(np.float64)
    if p.shape != (region.d,) or np.any(p < lo - 1e-12) or np.any(p > hi + 1e-12):
        raise ValueError("point outside the box hull")
    grid = kf.grid(k) if isinstance(kf, KernelField) else kf.grid()
    base = np.minimum(np.floor(p), hi - 1).astype(np.int64)
    frac = p - base
    total = 0.0
    for corner in np.ndindex(*([2] * region.d)):
        c = np.array(corner)
        w = np.prod(np.where(c == 1, frac, 1.0 - frac))
        if w == 0.0:
            continue
        total += w * grid[tuple(base + c - region.lo)]
    return float(total)


@dataclass
class BallEstimates:
    """Monte Carlo ball averages of p_t(x0, .): hits / (walkers * ball size)."""

    centers: np.ndarray
    estimate: np.ndarray
    stderr: np.ndarray
    hits: np.ndarray
    ball_size: int
    walkers: int


def ball_counts(positions, centers, radius):
    """Number of rows of ``positions`` within ``radius`` (Euclidean) of each center."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.int64))
    offsets = ball_sites(centers.shape[1], radius)
    lookup = {tuple(int(a) for a in c): k for k, c in enumerate(centers)}
    counts = np.zeros(len(centers), dtype=np.int64)
    if len(positions) == 0:
        return counts, len(offsets)
    # count occupancy per site once, then sum over each ball
    sites, mult = np.unique(np.asarray(positions, dtype=np.int64), axis=0, return_counts=True)
    occ = {tuple(int(a) for a in s): int(m) for s, m in zip(sites, mult)}
    for c, k in lookup.items():
        counts[k] = sum(occ.get(tuple(int(a) for a in np.add(c, o)), 0) for o in offsets)
    return counts, len(offsets)


def mc_heat_kernel(field_, x0, t, walkers, ball_radius, centers, walk_seed=0, first_index=0):
    """Ball-averaged MC estimate of p_t(x0, y) for each ball center y."""
    if walkers < 1:
        raise ValueError("walkers must be positive")
    centers = np.atleast_2d(np.asarray(centers, dtype=np.int64))
    if len(centers) == 0:
        raise ValueError("no balls given")
    starts = np.tile(np.asarray(x0, dtype=np.int64), (walkers, 1))
    pos = run_positions(field_, starts, walk_seed, [float(t)], first_index).positions[:, 0, :]
    hits, size = ball_counts(pos, centers, ball_radius)
    frac = hits / walkers
    return BallEstimates(centers, frac / size, np.sqrt(frac * (1 - frac) / walkers) / size, hits, size, walkers)


# --------------------------------------------------------------------------
# Dirichlet problems
# --------------------------------------------------------------------------


def _cg(A, b, tol, maxiter):
    diag = A.diagonal()
    M = LinearOperator(A.shape, matvec=lambda r: r / diag, dtype=np.float64)
    it = [0]

    def count(_):
        it[0] += 1

    x, info = cg(A, b, rtol=tol, atol=0.0, maxiter=maxiter, M=M, callback=count)
    res = float(np.linalg.norm(b - A @ x) / max(np.linalg.norm(b), 1e-300))
    if info > 0 and res > tol:
        raise RuntimeError(f"CG did not converge in {maxiter} iterations (relative residual {res:.3e})")
    return x, res, it[0]


def green(field_, x0, region, tol=1e-10, maxiter=100000):
    """g_B(x0, .) for the box B with absorbing exterior: solves -L g = delta_x0."""
    if region.boundary != "dirichlet":
        region = region.with_boundary("dirichlet")
    op = box_operator(field_, region)
    if not np.any(op.kill > 0):
        raise ValueError("no edge leaves the box, so the Green function is infinite")
    b = np.zeros(region.n_sites)
    b[region.index(x0)] = 1.0
    g, res, its = _cg(op.dirichlet_matrix(), b, tol, maxiter)
    return GreenField(np.asarray(x0, dtype=np.int64), region, g, res, its)


@dataclass
class GreenExtrapolation:
    half_sides: tuple
    values: tuple
    extrapolated: float


def green_extrapolated(field_, x0=None, half_sides=(20, 40), tol=1e-10):
    """g(x0, x0) on two boxes and the Richardson limit assuming g_L = g - c / L.

    ``L`` is the distance from x0 to the absorbing exterior (half_side + 1).
    """
    d = field_.d
    x0 = np.zeros(d, dtype=np.int64) if x0 is None else np.asarray(x0, dtype=np.int64)
    vals = []
    for h in half_sides:
        reg = LatticeRegion(d, int(h), tuple(x0), "dirichlet")
        vals.append(green(field_, x0, reg, tol).value(x0))
    L1, L2 = half_sides[0] + 1, half_sides[1] + 1
    g_inf = (L2 * vals[1] - L1 * vals[0]) / (L2 - L1)
    return GreenExtrapolation(tuple(half_sides), tuple(vals), g_inf)


@dataclass
class CeffResult:
    """Effective conductance with its two estimates (energy and flux out of A)."""

    value: float
    energy: float
    flux: float
    residual: float
    potential: np.ndarray


def effective_conductance_graph(W, A, B, kill=None, tol=1e-10, maxiter=100000):
    """C_eff[A, B] on a weighted graph.

    ``W`` is a symmetric weight matrix; ``kill[i]`` is the total weight of
    edges from node i to an extra grounded node (part of B). Returns the
    energy sum_e w_e (grad h)^2 of the harmonic potential with h = 1 on A and
    0 on B, and the flux out of A.
    """
    W = sparse.csr_matrix(W, dtype=np.float64)
    n = W.shape[0]
    kill = np.zeros(n) if kill is None else np.asarray(kill, dtype=np.float64)
    A = np.unique(np.asarray(A, dtype=np.int64))
    B = np.unique(np.asarray(B, dtype=np.int64))
    if len(A) == 0:
        raise ValueError("A must be nonempty")
    if len(np.intersect1d(A, B)):
        raise ValueError("A and B overlap")
    if len(B) == 0 and not np.any(kill > 0):
        raise ValueError("B must be nonempty (or some edges must lead to ground)")
    mu = np.asarray(W.sum(axis=1)).ravel() + kill
    h = np.zeros(n)
    h[A] = 1.0
    free = np.ones(n, dtype=bool)
    free[A] = False
    free[B] = False
    U = np.flatnonzero(free)
    res = 0.0
    if len(U):
        M = (sparse.diags(mu[U]) - W[U][:, U]).tocsr()
        rhs = np.asarray(W[U][:, A].sum(axis=1)).ravel()
        if np.any(rhs != 0):
            hU, res, _ = _cg(M, rhs, tol, maxiter)
            h[U] = hU
    Wc = W.tocoo()
    upper = Wc.row < Wc.col
    grad = h[Wc.row[upper]] - h[Wc.col[upper]]
    energy = float(np.sum(Wc.data[upper] * grad**2) + np.sum(kill * h**2))
    flux = float(np.sum(mu[A] * h[A]) - np.sum((W[A] @ h)))
    return CeffResult(energy, energy, flux, res, h)


def effective_conductance(field_, A, B=None, region=None, tol=1e-10):
    """C_eff[A, B] for site sets on a box; ``B=None`` means the box exterior."""
    region = region or field_.region
    if region is None:
        raise ValueError("a finite region is required")
    region = region.with_boundary("dirichlet" if B is None else region.boundary)
    op = box_operator(field_, region)
    A = np.atleast_2d(np.asarray(A, dtype=np.int64))
    if not np.all(region.contains(A)):
        raise ValueError("A must lie inside the region")
    ia = region.index(A)
    ib = np.zeros(0, dtype=np.int64)
    if B is not None:
        B = np.atleast_2d(np.asarray(B, dtype=np.int64))
        if not np.all(region.contains(B)):
            raise ValueError("B must lie inside the region")
        ib = region.index(B)
    return effective_conductance_graph(op.W, ia, ib, op.kill, tol)


def _local_graph(field_, sites):
    """Weights among ``sites`` and the weight from each site to the rest of Z^d."""
    sites = np.asarray(sites, dtype=np.int64)
    d = sites.shape[1]
    lookup = {tuple(s): k for k, s in enumerate(sites.tolist())}
    n = len(sites)
    rows, cols, vals = [], [], []
    kill = np.zeros(n)
    for i in range(d):
        dirs = np.full(n, i, dtype=np.int64)
        up = field_.edges(sites, dirs)
        lower = sites.copy()
        lower[:, i] -= 1
        down = field_.edges(lower, dirs)
        nb_up = sites.copy()
        nb_up[:, i] += 1
        j_up = np.array([lookup.get(tuple(s), -1) for s in nb_up.tolist()])
        j_dn = np.array([lookup.get(tuple(s), -1) for s in lower.tolist()])
        inside = j_up >= 0
        rows.append(np.flatnonzero(inside))
        cols.append(j_up[inside])
        vals.append(up[inside])
        kill += np.where(inside, 0.0, up) + np.where(j_dn >= 0, 0.0, down)
    r, c, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    W = sparse.coo_matrix((np.concatenate([v, v]), (np.concatenate([r, c]), np.concatenate([c, r]))), shape=(n, n)).tocsr()
    return W, kill


def _check_margin(field_, center, radius):
    region = field_.region
    if region is None:
        return
    r = int(math.ceil(radius)) + 2
    if np.any(np.asarray(center) - r < region.lo) or np.any(np.asarray(center) + r > region.hi):
        raise ValueError("region too small for the requested ball")


def gamma_n(field_, x, i, b_n, tol=1e-10):
    """gamma_n(e) = C_eff[{x_e, y_e}, B(e, b_n)^c] for e = {x, x + e_i}.

    B(e, r) = B(x_e, r) ∩ B(y_e, r) with Euclidean balls.
    """
    x = np.asarray(x, dtype=np.int64)
    y = x.copy()
    y[i] += 1
    _check_margin(field_, x, b_n + 1)
    cand = ball_sites(field_.d, b_n + 1, x)
    r2 = float(b_n) ** 2 + 1e-9
    keep = (np.sum((cand - x) ** 2, axis=1) <= r2) & (np.sum((cand - y) ** 2, axis=1) <= r2)
    sites = cand[keep]
    W, kill = _local_graph(field_, sites)
    lookup = {tuple(s): k for k, s in enumerate(sites.tolist())}
    A = [lookup[tuple(x.tolist())], lookup[tuple(y.tolist())]]
    return effective_conductance_graph(W, A, [], kill, tol).value


def gamma_site(field_, x, b_n, tol=1e-10):
    """gamma_n(x) = C_eff[{x}, B(x, b_n)^c]."""
    x = np.asarray(x, dtype=np.int64)
    _check_margin(field_, x, b_n)
    sites = ball_sites(field_.d, b_n, x)
    W, kill = _local_graph(field_, sites)
    k = int(np.flatnonzero(np.all(sites == x, axis=1))[0])
    return effective_conductance_graph(W, [k], [], kill, tol).value


# --------------------------------------------------------------------------
# closed forms
# --------------------------------------------------------------------------


def gaussian_density(sigma_v2, d, t, x):
    """k_t(x) = (2 pi sigma_V^2 t)^(-d/2) exp(-|x|^2 / (2 sigma_V^2 t)); x has shape (..., d)."""
    if t <= 0 or sigma_v2 <= 0:
        raise ValueError("t and sigma_v2 must be positive")
    x = np.asarray(x, dtype=np.float64)
    r2 = np.sum(x * x, axis=-1)
    s = sigma_v2 * t
    return (2.0 * math.pi * s) ** (-d / 2.0) * np.exp(-r2 / (2.0 * s))


def lattice_shell_counts(d, r2_max):
    """counts[m] = #{x in Z^d : |x|^2 = m} for m <= r2_max (exact integers)."""
    r2_max = int(r2_max)
    one = np.zeros(r2_max + 1)
    j = np.arange(int(math.isqrt(r2_max)) + 1)
    one[j * j] = 2.0
    one[0] = 1.0
    out = one.copy()
    for _ in range(d - 1):
        out = np.rint(fftconvolve(out, one)[: r2_max + 1])
    return out.astype(np.int64)


def lattice_power_sum(d, K, n, p, budget=10**8):
    """Exact sum of |x|^p over 1 <= |x| <= K n in Z^d."""
    R = float(K) * float(n)
    r2_max = int(math.floor(R * R + 1e-9))
    if r2_max * d > budget:
        raise BudgetError("K n too large for exact enumeration")
    counts = lattice_shell_counts(d, r2_max)
    m = np.arange(1, r2_max + 1, dtype=np.float64)
    return float(np.sum(counts[1:] * m ** (p / 2.0)))
