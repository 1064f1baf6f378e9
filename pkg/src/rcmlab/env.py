"""Random conductance environments on Z^d.

An environment assigns to every nearest-neighbour edge {x, x + e_i} a
conductance that is a pure function of (seed, x, i); ``x`` is always the
lexicographically smaller endpoint, so mu_xy = mu_yx holds by construction.
Fields can be evaluated lazily anywhere on the lattice, or tabulated on a box
(eager storage). Both paths call the same compiled sampler and agree bit for
bit.

The conductance law is an exact mixture: mu = 1 with probability 1 - c and
mu = Pareto otherwise, so that P(mu > u) = c / u for every u >= 1 when
alpha = 1 and rho = 0 (with the default c = 1/(2d)).
"""

import math
import struct
from dataclasses import dataclass, field
from itertools import product

import numba as nb
import numpy as np
from scipy import integrate
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .rng import NS_ENV, mix64, namespace_key, to_unit

# Bond percolation thresholds on Z^d; used only to gate cluster experiments.
PC_BOND = {2: 0.5, 3: 0.2488126, 4: 0.1601314, 5: 0.1181718}

COORD_OFFSET = np.int64(1 << 40)

# layout of the float parameter vector handed to compiled code
FP_TAIL_C, FP_ALPHA, FP_RHO, FP_U0, FP_LOGC, FP_CONST, FP_CUTOFF = range(7)


# --------------------------------------------------------------------------
# compiled core
# --------------------------------------------------------------------------


@nb.njit(cache=True)
def _solve_rho_branch(w, alpha, rho, u0, logc):
    # Find u >= u0 with logc + rho*ln(ln u) - alpha*ln u = ln w (decreasing in u).
    target = math.log(w)
    y_lo = math.log(u0)
    y_hi = y_lo + 1.0
    while logc + rho * math.log(y_hi) - alpha * y_hi > target:
        y_hi = y_lo + 2.0 * (y_hi - y_lo)
    for _ in range(200):
        y_mid = 0.5 * (y_lo + y_hi)
        if logc + rho * math.log(y_mid) - alpha * y_mid > target:
            y_lo = y_mid
        else:
            y_hi = y_mid
        if y_hi - y_lo <= 1e-15 * y_hi:
            break
    return math.exp(0.5 * (y_lo + y_hi))


@nb.njit(inline="always")
def law_value(v, tail_c, alpha, rho, u0, logc):
    """Conductance with P(value > u) = tail for a uniform ``v`` in (0, 1]."""
    if v > tail_c:
        return 1.0
    w = v / tail_c
    if rho == 0.0:
        if alpha == 1.0:
            m = 1.0 / w
        else:
            m = w ** (-1.0 / alpha)
        return m if m > 1.0 else 1.0
    if w >= 1.0:
        return u0
    return _solve_rho_branch(w, alpha, rho, u0, logc)


@nb.njit(inline="always")
def law_from_uniform(v, fp):
    return law_value(v, fp[FP_TAIL_C], fp[FP_ALPHA], fp[FP_RHO], fp[FP_U0], fp[FP_LOGC])


# odd multipliers for the coordinate hash, one per axis plus the direction
AXIS_MULT = np.array(
    [
        0xD6E8FEB86659FD93,
        0xA0761D6478BD642F,
        0xE7037ED1A0B428DB,
        0x8EBC6AF09C88C6E3,
        0x589965CC75374CC3,
        0x1D8E4E27C47D124F,
        0xC2B2AE3D27D4EB4F,
        0x165667B19E3779F9,
    ],
    dtype=np.uint64,
)
DIR_MULT = np.uint64(0x9FB21C651E98DF25)


@nb.njit(inline="always")
def _edge_hash(key, x, i):
    h = key + np.uint64(i + 1) * DIR_MULT
    for j in range(x.shape[0]):
        h += np.uint64(x[j] + COORD_OFFSET) * AXIS_MULT[j]
    return mix64(mix64(h))


@nb.njit(inline="always")
def raw_edge(key, x, i, fp):
    """Untruncated conductance of edge {x, x + e_i} (x is the lower endpoint)."""
    if fp[FP_CONST] > 0.0:
        return fp[FP_CONST]
    return law_from_uniform(to_unit(_edge_hash(key, x, i)), fp)


@nb.njit(cache=True)
def _box_edges(key, fp, lo, side):
    d = lo.shape[0]
    n_sites = side**d
    out = np.empty((n_sites, d))
    x = lo.copy()
    for s in range(n_sites):
        for i in range(d):
            out[s, i] = raw_edge(key, x, i, fp)
        # advance row-major (last coordinate fastest)
        j = d - 1
        while j >= 0:
            x[j] += 1
            if x[j] < lo[j] + side:
                break
            x[j] = lo[j]
            j -= 1
    return out


@nb.njit(cache=True)
def _edge_list(key, fp, xs, dirs):
    out = np.empty(xs.shape[0])
    for k in range(xs.shape[0]):
        out[k] = raw_edge(key, xs[k], dirs[k], fp)
    return out


@nb.njit(cache=True)
def _uniform_list(key, xs, dirs):
    out = np.empty(xs.shape[0])
    for k in range(xs.shape[0]):
        out[k] = to_unit(_edge_hash(key, xs[k], dirs[k]))
    return out


# --------------------------------------------------------------------------
# law
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TailLaw:
    """Conductance law on [1, inf) with an atom at 1 and a power tail.

    ``F(u) = 1 - tail_c * G(u)`` for ``u >= 1`` where ``G(u) = u**-alpha`` when
    ``rho == 0``. For ``rho != 0`` the tail branch has survival
    ``min(1, c * (log u)**rho / u**alpha)``, with ``c`` fixed so the branch
    survival equals 1 at ``u0 = exp(max(rho / alpha, 1))``.
    """

    d: int
    tail_c: float
    rho: float = 0.0
    alpha: float = 1.0

    @property
    def u0(self):
        if self.rho == 0.0:
            return 1.0
        return math.exp(max(self.rho / self.alpha, 1.0))

    @property
    def log_c(self):
        if self.rho == 0.0:
            return 0.0
        u0 = self.u0
        return self.alpha * math.log(u0) - self.rho * math.log(math.log(u0))

    def params(self, constant=0.0, cutoff=math.inf):
        return np.array(
            [self.tail_c, self.alpha, self.rho, self.u0, self.log_c, constant, cutoff],
            dtype=np.float64,
        )

    def _branch_sf(self, u):
        u = np.asarray(u, dtype=np.float64)
        if self.rho == 0.0:
            return np.where(u < 1.0, 1.0, np.power(np.maximum(u, 1.0), -self.alpha))
        u0 = self.u0
        big = np.maximum(u, u0)
        val = np.exp(self.log_c + self.rho * np.log(np.log(big)) - self.alpha * np.log(big))
        return np.where(u < u0, 1.0, val)

    def sf(self, u):
        """P(mu > u)."""
        u = np.asarray(u, dtype=np.float64)
        s = self.tail_c * self._branch_sf(u)
        if self.rho != 0.0:
            # between 1 and u0 only the atom is excluded
            s = np.where((u >= 1.0) & (u < self.u0), self.tail_c, s)
        out = np.where(u < 1.0, 1.0, s)
        return out if out.ndim else float(out)

    def cdf(self, u):
        u = np.asarray(u, dtype=np.float64)
        out = np.where(u < 1.0, 0.0, 1.0 - self.sf(np.maximum(u, 1.0)))
        return out if out.ndim else float(out)

    def prob_ge(self, u):
        """P(mu >= u); differs from ``sf`` only at the atom u = 1."""
        u = np.asarray(u, dtype=np.float64)
        out = np.where(u <= 1.0, 1.0, self.sf(u))
        return out if out.ndim else float(out)

    def isf(self, q):
        """Smallest u with P(mu > u) <= q."""
        q = np.atleast_1d(np.asarray(q, dtype=np.float64))
        fp = self.params()
        out = np.empty_like(q)
        for k, qk in enumerate(q):
            out[k] = 1.0 if qk >= self.tail_c else law_from_uniform(qk, fp)
        return out if out.size > 1 else float(out[0])

    def quantile(self, p):
        p = np.atleast_1d(np.asarray(p, dtype=np.float64))
        out = np.atleast_1d(self.isf(1.0 - p))
        out = np.where(p <= 1.0 - self.tail_c, 1.0, out)
        return out if out.size > 1 else float(out[0])

    def truncated_mean(self, c):
        """E[mu; mu <= c]."""
        if c < 1.0:
            return 0.0
        if self.rho == 0.0:
            a = self.alpha
            if a == 1.0:
                branch = math.log(c)
            else:
                branch = a * (c ** (1.0 - a) - 1.0) / (1.0 - a)
            return (1.0 - self.tail_c) + self.tail_c * branch
        return (1.0 - self.tail_c) + self._branch_moment(c, 1)

    def mean_min(self, c):
        """E[min(mu, c)]."""
        return self.truncated_mean(c) + c * float(self.sf(c))

    def truncated_second_moment(self, c):
        """E[mu^2; mu <= c]."""
        if c < 1.0:
            return 0.0
        if self.rho == 0.0 and self.alpha == 1.0:
            return (1.0 - self.tail_c) + self.tail_c * (c - 1.0)
        return (1.0 - self.tail_c) + self._branch_moment(c, 2)

    def _branch_moment(self, c, k):
        # E[mu^k; branch, mu <= c] = tail_c * int u^k dF_branch on [u0, c]
        u0 = self.u0
        if c < u0:
            return 0.0
        # integrate by parts: int_{u0}^{c} u^k dF = u0^k - c^k G(c) + k int u^{k-1} G(u) du
        g = lambda u: float(self._branch_sf(u))
        tail = integrate.quad(lambda u: k * u ** (k - 1) * g(u), u0, c, limit=200)[0]
        return self.tail_c * (u0**k - c**k * g(c) + tail)

    def site_truncated_mean(self, c):
        """E[mu~_x] = 2d E[mu; mu <= c]."""
        return 2 * self.d * self.truncated_mean(c)


def make_tail_law(d, rho=0.0, alpha=1.0, tail_c=None):
    if int(d) != d or d < 2 or d > 8:
        raise ValueError(f"dimension must be an integer in [2, 8], got {d}")
    if not 0.0 < alpha <= 1.0:
        raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
    if rho < -1.0:
        raise ValueError(f"rho must be >= -1, got {rho}")
    if tail_c is None:
        tail_c = 1.0 / (2 * d)
    if not 0.0 < tail_c <= 1.0:
        raise ValueError(f"tail_c must lie in (0, 1], got {tail_c}")
    return TailLaw(int(d), float(tail_c), float(rho), float(alpha))


# --------------------------------------------------------------------------
# regions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeRegion:
    """Sup-norm box ``center + [-half_side, half_side]^d``.

    ``boundary='free'`` drops every edge leaving the box; ``'dirichlet'``
    keeps them and treats the outside as absorbing; ``'open'`` does not
    restrict anything (the box then only delimits an eager table).
    """

    d: int
    half_side: int
    center: tuple = None
    boundary: str = "free"

    def __post_init__(self):
        if self.half_side < 1:
            raise ValueError("half_side must be >= 1")
        if self.boundary not in ("free", "dirichlet", "open"):
            raise ValueError(f"unknown boundary {self.boundary!r}")
        if self.center is None:
            object.__setattr__(self, "center", (0,) * self.d)
        object.__setattr__(self, "center", tuple(int(c) for c in self.center))
        if len(self.center) != self.d:
            raise ValueError("center has wrong dimension")

    @property
    def side(self):
        return 2 * self.half_side + 1

    @property
    def lo(self):
        return np.array(self.center, dtype=np.int64) - self.half_side

    @property
    def hi(self):
        return np.array(self.center, dtype=np.int64) + self.half_side

    @property
    def n_sites(self):
        return self.side**self.d

    @property
    def shape(self):
        return (self.side,) * self.d

    def coords(self):
        """All sites, row-major, shape (n_sites, d)."""
        axes = [np.arange(l, l + self.side, dtype=np.int64) for l in self.lo]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)

    def index(self, x):
        x = np.asarray(x, dtype=np.int64)
        return np.ravel_multi_index(tuple((x - self.lo).T), self.shape)

    def contains(self, x):
        x = np.asarray(x, dtype=np.int64)
        return np.all((x >= self.lo) & (x <= self.hi), axis=-1)

    def with_boundary(self, boundary):
        return LatticeRegion(self.d, self.half_side, self.center, boundary)


def ball_sites(d, radius, center=None):
    """Lattice points y with |y - center| <= radius (Euclidean), row-major."""
    r = int(math.floor(radius))
    c = np.zeros(d, dtype=np.int64) if center is None else np.asarray(center, dtype=np.int64)
    axis = np.arange(-r, r + 1, dtype=np.int64)
    grid = np.stack([g.ravel() for g in np.meshgrid(*([axis] * d), indexing="ij")], axis=1)
    keep = np.sum(grid.astype(np.float64) ** 2, axis=1) <= radius * radius + 1e-9
    return grid[keep] + c


# --------------------------------------------------------------------------
# fields
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConductanceField:
    """Environment omega as a pure function of (seed, edge).

    ``region`` restricts the dynamics (see LatticeRegion); ``None`` means the
    whole lattice. With ``storage='eager'`` the region's edges are tabulated
    once; lazy evaluation gives identical values. ``constant`` overrides the
    law with mu = constant on every edge.
    """

    law: TailLaw
    seed: int
    region: LatticeRegion = None
    storage: str = "lazy"
    constant: float = None
    cutoff: float = math.inf
    _table: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.storage not in ("lazy", "eager"):
            raise ValueError(f"unknown storage {self.storage!r}")
        if self.storage == "eager":
            if self.region is None:
                raise ValueError("eager storage needs a finite region")
            if self._table is None:
                object.__setattr__(self, "_table", _box_edges(self.key, self.params(raw=True), self.region.lo, self.region.side))
        if self.constant is not None and self.constant <= 0:
            raise ValueError("constant conductance must be positive")

    @property
    def d(self):
        return self.law.d

    @property
    def key(self):
        return namespace_key(self.seed, NS_ENV)

    def params(self, raw=False):
        const = 0.0 if self.constant is None else float(self.constant)
        return self.law.params(const, math.inf if raw else self.cutoff)

    # -- single queries -------------------------------------------------
    def edge_dir(self, x, i):
        """Conductance of {x, x + e_i}, 0 if the edge leaves a free region."""
        x = np.asarray(x, dtype=np.int64)
        return float(self.edges(x[None, :], np.array([i]))[0])

    def edge(self, x, y):
        x = np.asarray(x, dtype=np.int64)
        y = np.asarray(y, dtype=np.int64)
        diff = y - x
        if np.sum(np.abs(diff)) != 1:
            raise ValueError(f"{tuple(x)} and {tuple(y)} are not nearest neighbours")
        i = int(np.flatnonzero(diff)[0])
        lower = x if diff[i] > 0 else y
        return self.edge_dir(lower, i)

    def site_conductance(self, x):
        x = np.asarray(x, dtype=np.int64)
        return float(self.site_values(x[None, :])[0])

    # -- vectorised ------------------------------------------------------
    def raw_edges(self, xs, dirs):
        """Untruncated, unrestricted conductances of edges (xs[k], dirs[k])."""
        xs = np.ascontiguousarray(xs, dtype=np.int64)
        dirs = np.ascontiguousarray(dirs, dtype=np.int64)
        if self._table is not None:
            inside = self.region.contains(xs)
            out = np.empty(len(xs))
            if inside.any():
                idx = self.region.index(xs[inside])
                out[inside] = self._table[idx, dirs[inside]]
            if (~inside).any():
                out[~inside] = _edge_list(self.key, self.params(raw=True), xs[~inside], dirs[~inside])
            return out
        return _edge_list(self.key, self.params(raw=True), xs, dirs)

    def edges(self, xs, dirs):
        """Conductances seen by the walk: truncated, and 0 outside a free region."""
        xs = np.ascontiguousarray(xs, dtype=np.int64)
        dirs = np.ascontiguousarray(dirs, dtype=np.int64)
        vals = self.raw_edges(xs, dirs)
        vals = np.where(vals <= self.cutoff, vals, 0.0)
        if self.region is not None and self.region.boundary == "free":
            ys = xs.copy()
            ys[np.arange(len(xs)), dirs] += 1
            ok = self.region.contains(xs) & self.region.contains(ys)
            vals = np.where(ok, vals, 0.0)
        return vals

    def site_values(self, xs):
        """mu_x (truncated if this is a truncated view) for each row of xs."""
        xs = np.asarray(xs, dtype=np.int64)
        total = np.zeros(len(xs))
        for i in range(self.d):
            dirs = np.full(len(xs), i, dtype=np.int64)
            total += self.edges(xs, dirs)
            lower = xs.copy()
            lower[:, i] -= 1
            total += self.edges(lower, dirs)
        return total

    def box_edges(self, region=None):
        """Table (n_sites, d) of conductances of (x, x + e_i) for x in region.

        Edges leaving the region are reported with their lattice value; the
        operator builders decide whether to keep them.
        """
        region = region or self.region
        if region is None:
            raise ValueError("a finite region is required")
        if self._table is not None and region == self.region:
            table = self._table
        elif self._table is not None and region.d == self.d:
            table = self.raw_edges(np.repeat(region.coords(), self.d, axis=0), np.tile(np.arange(self.d), region.n_sites)).reshape(region.n_sites, self.d)
        else:
            table = _box_edges(self.key, self.params(raw=True), region.lo, region.side)
        return np.where(table <= self.cutoff, table, 0.0)

    # -- derived views ---------------------------------------------------
    def truncate(self, a, n):
        return TruncatedView(self, float(a), int(n))

    def restrict(self, region, storage="lazy"):
        return ConductanceField(self.law, self.seed, region, storage, self.constant, self.cutoff)

    def eager(self, region):
        """Same environment with its values tabulated on ``region``."""
        return ConductanceField(self.law, self.seed, region, "eager", self.constant, self.cutoff)

    def cached(self, half_side, center=None):
        """Unrestricted dynamics with the box around ``center`` tabulated.

        Walks leaving the box fall back to lazy evaluation, so this changes
        speed and memory only.
        """
        return self.eager(LatticeRegion(self.d, int(half_side), center, "open"))

    def kernel_args(self):
        """Arguments consumed by the compiled walkers."""
        if self._table is not None:
            table = self._table.ravel()
            clo, cside = self.region.lo, self.region.side
        else:
            table = np.zeros(1)
            clo, cside = np.zeros(self.d, dtype=np.int64), 0
        if self.region is not None:
            rlo, rhi = self.region.lo, self.region.hi
            mode = {"open": 0, "free": 1, "dirichlet": 2}[self.region.boundary]
        else:
            rlo = np.zeros(self.d, dtype=np.int64)
            rhi = np.zeros(self.d, dtype=np.int64)
            mode = 0
        return (self.key, self.params(), table, clo, cside, rlo, rhi, mode)


class TruncatedView(ConductanceField):
    """mu~_e = mu_e * 1{mu_e <= a n^2} on top of a base field."""

    def __init__(self, base, a, n):
        if a <= 0:
            raise ValueError("truncation level a must be positive")
        super().__init__(base.law, base.seed, base.region, "lazy", base.constant, float(a) * int(n) ** 2, base._table)
        object.__setattr__(self, "storage", base.storage)
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "a", float(a))
        object.__setattr__(self, "n", int(n))

    def restrict(self, region, storage="lazy"):
        return self.base.restrict(region, storage).truncate(self.a, self.n)

    def eager(self, region):
        return self.base.eager(region).truncate(self.a, self.n)


def homogeneous_field(d, value=1.0, region=None, seed=0):
    """Field with mu = value on every edge (the law is carried only for d)."""
    return ConductanceField(make_tail_law(d), seed, region, "lazy", float(value))


def sample_edge(field_, x, y):
    """Conductance of the edge {x, y}; rejects non-neighbours."""
    return field_.edge(x, y)


def site_conductance(field_, x):
    return field_.site_conductance(x)


def iid_conductances(law, seed, count, offset=0):
    """``count`` conductances of distinct edges (k, 0, ..., 0) in direction 0.

    Cheap way to get i.i.d. draws through the same per-edge sampler.
    """
    xs = np.zeros((count, law.d), dtype=np.int64)
    xs[:, 0] = np.arange(offset, offset + count)
    dirs = np.zeros(count, dtype=np.int64)
    return _edge_list(namespace_key(seed, NS_ENV), law.params(), xs, dirs)


# --------------------------------------------------------------------------
# big edges and clusters
# --------------------------------------------------------------------------


def _interior_edges(region):
    """Edges with both endpoints in ``region``: (lower endpoints, dirs, site idx)."""
    coords = region.coords()
    xs, ds, idx = [], [], []
    for i in range(region.d):
        ok = coords[:, i] < region.hi[i]
        sel = np.flatnonzero(ok)
        xs.append(coords[sel])
        ds.append(np.full(len(sel), i, dtype=np.int64))
        idx.append(sel)
    return np.concatenate(xs), np.concatenate(ds), np.concatenate(idx)


def big_edge_set(field_, a, b, n, region=None):
    """Edges of ``region`` with a n^2 <= mu_e < b n^2, canonically sorted.

    Returns an int array of shape (m, d + 1): lower endpoint then direction.
    """
    if not 0 < a < b:
        raise ValueError("need 0 < a < b")
    region = region or field_.region
    if region is None:
        raise ValueError("a finite region is required")
    table = field_.box_edges(region)
    xs, ds, idx = _interior_edges(region)
    vals = table[idx, ds]
    lo, hi = a * n * n, b * n * n
    keep = (vals >= lo) & (vals < hi)
    out = np.concatenate([xs[keep], ds[keep, None]], axis=1)
    order = np.lexsort(out.T[::-1])
    return out[order]


@dataclass
class ClusterMap:
    """Open clusters of the percolation {mu_e > a_p} inside a region."""

    a_p: float
    region: LatticeRegion
    labels: np.ndarray  # per-site label = smallest site index in its cluster
    sizes: dict
    bbox_lo: dict
    bbox_hi: dict

    def cluster_size(self, x):
        return self.sizes[int(self.labels[self.region.index(x)])]

    def cluster_diameter(self, x):
        lab = int(self.labels[self.region.index(x)])
        return int(np.max(self.bbox_hi[lab] - self.bbox_lo[lab]))

    def edge_cluster(self, xs, dirs):
        """Size and sup-norm diameter of C(e) for edges (xs[k], dirs[k]).

        C(e) is the union of the clusters of both endpoints; both endpoints
        always belong to it.
        """
        xs = np.asarray(xs, dtype=np.int64).reshape(-1, self.region.d)
        dirs = np.asarray(dirs, dtype=np.int64).ravel()
        ys = xs.copy()
        ys[np.arange(len(xs)), dirs] += 1
        lx = self.labels[self.region.index(xs)]
        ly = self.labels[self.region.index(ys)]
        sizes = np.empty(len(xs), dtype=np.int64)
        diams = np.empty(len(xs), dtype=np.int64)
        for k, (a, b) in enumerate(zip(lx, ly)):
            if a == b:
                sizes[k] = self.sizes[a]
                diams[k] = np.max(self.bbox_hi[a] - self.bbox_lo[a])
            else:
                sizes[k] = self.sizes[a] + self.sizes[b]
                lo = np.minimum(self.bbox_lo[a], self.bbox_lo[b])
                hi = np.maximum(self.bbox_hi[a], self.bbox_hi[b])
                diams[k] = np.max(hi - lo)
        return sizes, diams


def open_probability(law, a_p):
    return float(law.sf(a_p))


def percolation_clusters(field_, a_p, region=None, pc_table=None):
    """Label the clusters of open edges {mu_e > a_p} in ``region``."""
    region = region or field_.region
    if region is None:
        raise ValueError("a finite region is required")
    table = pc_table or PC_BOND
    d = field_.d
    if d not in table:
        raise ValueError(f"no p_c reference value for d={d}")
    p_open = 0.0 if field_.constant is not None and field_.constant <= a_p else (1.0 if field_.constant is not None else open_probability(field_.law, a_p))
    if p_open >= table[d]:
        raise ValueError(f"a_p={a_p} is supercritical: P(mu > a_p)={p_open:.4g} >= p_c({d})={table[d]}")
    vals = field_.box_edges(region)
    xs, ds, idx = _interior_edges(region)
    open_ = vals[idx, ds] > a_p
    ys = xs[open_].copy()
    ys[np.arange(len(ys)), ds[open_]] += 1
    u = idx[open_]
    v = region.index(ys)
    n = region.n_sites
    graph = coo_matrix((np.ones(len(u)), (u, v)), shape=(n, n)).tocsr()
    _, comp = connected_components(graph, directed=False)
    # canonical label: smallest site index of the component
    first = np.full(comp.max() + 1, n, dtype=np.int64)
    np.minimum.at(first, comp, np.arange(n))
    labels = first[comp]
    coords = region.coords()
    uniq, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    lo = np.full((len(uniq), d), np.iinfo(np.int64).max)
    hi = np.full((len(uniq), d), np.iinfo(np.int64).min)
    for j in range(d):
        np.minimum.at(lo[:, j], inverse, coords[:, j])
        np.maximum.at(hi[:, j], inverse, coords[:, j])
    sizes = dict(zip(uniq.tolist(), counts.tolist()))
    bbox_lo = {int(k): lo[m] for m, k in enumerate(uniq)}
    bbox_hi = {int(k): hi[m] for m, k in enumerate(uniq)}
    return ClusterMap(float(a_p), region, labels, sizes, bbox_lo, bbox_hi)


# --------------------------------------------------------------------------
# serialisation
# --------------------------------------------------------------------------

_MAGIC = b"RCMENV01"


def save_binary(field_, path, region=None):
    """Edge table with header (d, half_side, seed, law parameters, center)."""
    region = region or field_.region
    table = field_.box_edges(region)
    law = field_.law
    const = 0.0 if field_.constant is None else field_.constant
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<qqQ", law.d, region.half_side, int(field_.seed) & ((1 << 64) - 1)))
        fh.write(struct.pack("<5d", law.tail_c, law.rho, law.alpha, const, field_.cutoff))
        fh.write(struct.pack(f"<{law.d}q", *region.center))
        fh.write(np.ascontiguousarray(table, dtype="<f8").tobytes())


def load_binary(path):
    """Returns (header dict, table of shape (n_sites, d))."""
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError("not an environment file")
        d, half_side, seed = struct.unpack("<qqQ", fh.read(24))
        tail_c, rho, alpha, const, cutoff = struct.unpack("<5d", fh.read(40))
        center = struct.unpack(f"<{d}q", fh.read(8 * d))
        table = np.frombuffer(fh.read(), dtype="<f8").reshape(-1, d)
    header = dict(d=d, half_side=half_side, seed=seed, tail_c=tail_c, rho=rho, alpha=alpha, constant=const, cutoff=cutoff, center=center)
    return header, table


def save_csv(field_, path, region=None, header_extra=""):
    """One row per in-region edge: x coordinates, y coordinates, mu.

    ``header_extra`` is written verbatim before the column header.
    """
    region = region or field_.region
    table = field_.box_edges(region)
    xs, ds, idx = _interior_edges(region)
    ys = xs.copy()
    ys[np.arange(len(xs)), ds] += 1
    order = np.lexsort(np.concatenate([xs, ds[:, None]], axis=1).T[::-1])
    d = field_.d
    header = ",".join([f"x{j + 1}" for j in range(d)] + [f"y{j + 1}" for j in range(d)] + ["mu"])
    with open(path, "w") as fh:
        fh.write(header_extra + header + "\n")
        for k in order:
            fh.write(",".join(str(int(v)) for v in xs[k]) + "," + ",".join(str(int(v)) for v in ys[k]) + f",{float(table[idx[k], ds[k]])!r}\n")


def neighbour_offsets(d):
    """The 2d unit moves; index k < d is +e_k, index k >= d is -e_{k-d}."""
    eye = np.eye(d, dtype=np.int64)
    return np.concatenate([eye, -eye])


def all_unit_cube_corners(d):
    return np.array(list(product((0, 1), repeat=d)), dtype=np.int64)
