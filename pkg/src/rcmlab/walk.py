"""Exact continuous-time simulation of the VSRW, its clock and the CSRW.

The variable speed walk Y holds at x for an Exp(mu_x) time and then steps to
y with probability mu_xy / mu_x. The clock is S_t = int_0^t mu_{Y_s} ds and
the constant speed walk is X_t = Y_{A_t} with A the right-continuous inverse
of S. Nothing is discretised in time.

Two compiled engines share one inner step:

* ``_trajectory`` records a whole path (used for ``WalkTrajectory``);
* ``_batch`` runs many independent walkers and keeps only the observables an
  experiment asks for (positions at fixed times, clocks, CSRW positions at
  fixed clock levels, exit and hitting times).

Walker ``w`` of a batch draws from the counter-based stream keyed by
``(master_seed, walker index)``, so results never depend on batch size,
ordering or thread count.
"""

import math
import os
from dataclasses import dataclass

import numba as nb
import numpy as np

from .env import AXIS_MULT, COORD_OFFSET, DIR_MULT, FP_ALPHA, FP_CONST, FP_CUTOFF, FP_LOGC, FP_RHO, FP_TAIL_C, FP_U0, law_value
from .rng import GOLDEN, NS_WALK, RngStream, mix64, stream_key, stream_keys_for, to_unit

if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    # skip TBB, which warns when the installed runtime is too old
    nb.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

# ---------------------------------------------------------------------------
# compiled environment access
# ---------------------------------------------------------------------------
#
# Loading the 2d rates around a site is written out in each kernel: helper
# functions that take arrays cost several times the hash itself in numba.


@nb.njit(inline="always")
def _lazy(h, fp):
    if fp[FP_CONST] > 0.0:
        return fp[FP_CONST]
    return law_value(to_unit(mix64(mix64(h))), fp[FP_TAIL_C], fp[FP_ALPHA], fp[FP_RHO], fp[FP_U0], fp[FP_LOGC])


@nb.njit(inline="always")
def _pick(vals, u, total):
    target = u * total
    acc = 0.0
    last = -1
    for k in range(vals.shape[0]):
        if vals[k] > 0.0:
            last = k
            acc += vals[k]
            if acc >= target:
                return k
    return last


@nb.njit(inline="always")
def _pick_row(rates, row, u, total):
    target = u * total
    acc = 0.0
    last = -1
    for k in range(rates.shape[1]):
        v = rates[row, k]
        if v > 0.0:
            last = k
            acc += v
            if acc >= target:
                return k
    return last


@nb.njit(inline="always")
def _outside(x, rlo, rhi):
    for j in range(x.shape[0]):
        if x[j] < rlo[j] or x[j] > rhi[j]:
            return True
    return False


@nb.njit(cache=True)
def _strides(d, cside):
    st = np.ones(d, dtype=np.int64)
    for j in range(d - 2, -1, -1):
        st[j] = st[j + 1] * cside
    return st


@nb.njit(cache=True)
def _load_site(x, offs, stride, vals, key, fp, table, clo, cside, rlo, rhi, mode):
    """Fill vals[k] with the rate to neighbour k (k<d: +e_k, else -e_{k-d}); returns mu_x.

    Reference implementation of the block inlined in the kernels.
    """
    d = x.shape[0]
    base = key
    bad = 0
    idx = 0
    for j in range(d):
        base += np.uint64(x[j] + COORD_OFFSET) * AXIS_MULT[j]
        off = x[j] - clo[j]
        offs[j] = off
        idx += off * stride[j]
        if off < 0 or off >= cside:
            bad += 1
    cut = fp[FP_CUTOFF]
    mu = 0.0
    for i in range(d):
        hp = base + np.uint64(i + 1) * DIR_MULT
        if bad == 0:
            v = table[idx * d + i]
        else:
            v = _lazy(hp, fp)
        if v > cut or (mode == 1 and x[i] >= rhi[i]):
            v = 0.0
        vals[i] = v
        mu += v
        if (bad == 0 and offs[i] >= 1) or (bad == 1 and offs[i] == cside):
            v = table[(idx - stride[i]) * d + i]
        else:
            v = _lazy(hp - AXIS_MULT[i], fp)
        if v > cut or (mode == 1 and x[i] <= rlo[i]):
            v = 0.0
        vals[d + i] = v
        mu += v
    return mu


# ---------------------------------------------------------------------------
# single trajectory
# ---------------------------------------------------------------------------


@nb.njit(cache=True, error_model="numpy")
def _trajectory(start, horizon, skey, counter0, key, fp, table, clo, cside, rlo, rhi, mode, max_jumps):
    d = start.shape[0]
    x = start.copy()
    offs = np.empty(d, dtype=np.int64)
    stride = _strides(d, cside)
    vals = np.empty(2 * d)
    cap = 1024
    sites = np.empty((cap, d), dtype=np.int64)
    epochs = np.empty(cap)
    rates = np.empty(cap)
    n = 0
    t = 0.0
    state = skey + np.uint64(counter0) * GOLDEN
    draws = 0
    exited = False
    mu = _load_site(x, offs, stride, vals, key, fp, table, clo, cside, rlo, rhi, mode)
    while True:
        if n == cap:
            cap *= 2
            s2 = np.empty((cap, d), dtype=np.int64)
            e2 = np.empty(cap)
            r2 = np.empty(cap)
            s2[:n] = sites[:n]
            e2[:n] = epochs[:n]
            r2[:n] = rates[:n]
            sites, epochs, rates = s2, e2, r2
        sites[n] = x
        epochs[n] = t
        rates[n] = mu
        n += 1
        if mu <= 0.0 or n > max_jumps:
            break
        state += GOLDEN
        draws += 1
        t += -math.log(to_unit(mix64(state))) / mu
        if t > horizon:
            break
        state += GOLDEN
        draws += 1
        k = _pick(vals, to_unit(mix64(state)), mu)
        if k < d:
            x[k] += 1
        else:
            x[k - d] -= 1
        if mode == 2 and _outside(x, rlo, rhi):
            exited = True
            if n == cap:
                cap += 1
                s2 = np.empty((cap, d), dtype=np.int64)
                e2 = np.empty(cap)
                r2 = np.empty(cap)
                s2[:n] = sites[:n]
                e2[:n] = epochs[:n]
                r2[:n] = rates[:n]
                sites, epochs, rates = s2, e2, r2
            sites[n] = x
            epochs[n] = t
            rates[n] = 0.0
            n += 1
            break
        mu = _load_site(x, offs, stride, vals, key, fp, table, clo, cside, rlo, rhi, mode)
    return sites[:n].copy(), epochs[:n].copy(), rates[:n].copy(), exited, draws


# ---------------------------------------------------------------------------
# batch engine
# ---------------------------------------------------------------------------


@nb.njit(cache=True, error_model="numpy")
def _batch(
    starts,
    skeys,
    key,
    fp,
    table,
    clo,
    cside,
    rlo,
    rhi,
    mode,
    obs_times,
    levels,
    w_cut,
    w_center,
    w_r2,
    exit_center,
    exit_r2,
    big_thresh,
    big_center,
    big_r2,
    pos_out,
    clk_out,
    wclk_out,
    csrw_out,
    exit_out,
    hit_out,
    jumps_out,
    flags_out,
    max_jumps,
    w0,
    w1,
):
    d = starts.shape[1]
    n_obs = obs_times.shape[0]
    n_lev = levels.shape[0]
    t_h = obs_times[n_obs - 1] if n_obs > 0 else 0.0
    x = np.empty(d, dtype=np.int64)
    stride = _strides(d, cside)
    offs = np.empty(d, dtype=np.int64)
    rates = np.empty((2, 2 * d))  # current site, site just left
    cur = 0
    cut = fp[FP_CUTOFF]
    use_exit = exit_r2 >= 0.0
    use_big = big_thresh > 0.0
    use_w = w_r2 >= 0.0
    for w in range(w0, w1):
        for j in range(d):
            x[j] = starts[w, j]
        state = skeys[w]
        t = 0.0
        S = 0.0
        W = 0.0
        k_obs = 0
        k_lev = 0
        jumps = 0
        flag = 0
        exit_t = np.inf
        hit_t = np.inf
        mu = 0.0
        pmu = 0.0
        back = -1  # index at the current site of the move back to the previous one
        load = True
        while True:
            if load:
                # fast path: x and its lower neighbours lie inside the table
                idx = 0
                inner = cside > 0
                for j in range(d):
                    off = x[j] - clo[j]
                    idx += off * stride[j]
                    if off < 1 or off >= cside:
                        inner = False
                if inner:
                    mu = 0.0
                    for i in range(d):
                        v = table[idx * d + i]
                        if v > cut or (mode == 1 and x[i] >= rhi[i]):
                            v = 0.0
                        rates[cur, i] = v
                        mu += v
                        v = table[(idx - stride[i]) * d + i]
                        if v > cut or (mode == 1 and x[i] <= rlo[i]):
                            v = 0.0
                        rates[cur, d + i] = v
                        mu += v
                else:
                    mu = _load_site(x, offs, stride, rates[cur], key, fp, table, clo, cside, rlo, rhi, mode)
            # per-site observables
            wx = 0.0
            if use_w:
                r2 = 0.0
                for j in range(d):
                    r2 += (x[j] - w_center[j]) ** 2
                if r2 <= w_r2:
                    for k in range(2 * d):
                        if rates[cur, k] <= w_cut:
                            wx += rates[cur, k]
            if use_big and hit_t == np.inf:
                r2 = 0.0
                for j in range(d):
                    r2 += (x[j] - big_center[j]) ** 2
                if r2 <= big_r2 and mu >= big_thresh:
                    hit_t = t
            if use_exit and exit_t == np.inf:
                r2 = 0.0
                for j in range(d):
                    r2 += (x[j] - exit_center[j]) ** 2
                if r2 > exit_r2:
                    exit_t = t
            if mu > 0.0:
                state += GOLDEN
                hold = -math.log(to_unit(mix64(state))) / mu
            else:
                hold = np.inf
            t_next = t + hold
            while k_obs < n_obs and obs_times[k_obs] < t_next:
                dt = obs_times[k_obs] - t
                for j in range(d):
                    pos_out[w, k_obs, j] = x[j]
                clk_out[w, k_obs] = S + mu * dt
                wclk_out[w, k_obs] = W + wx * dt
                k_obs += 1
            S_next = S + mu * hold if mu > 0.0 else S
            while k_lev < n_lev and levels[k_lev] < S_next:
                for j in range(d):
                    csrw_out[w, k_lev, j] = x[j]
                k_lev += 1
            if k_obs >= n_obs and k_lev >= n_lev and t_next >= t_h:
                break
            if mu <= 0.0:
                flag = 2  # stuck on an isolated site before the clock horizon
                break
            if jumps >= max_jumps:
                flag = 3
                break
            t = t_next
            S = S_next
            W += wx * hold
            state += GOLDEN
            k = _pick_row(rates, cur, to_unit(mix64(state)), mu)
            # keep the rates of the site being left; a move straight back reuses them
            cur = 1 - cur
            mu, pmu = pmu, mu
            load = k != back
            back = k - d if k >= d else k + d
            if k < d:
                x[k] += 1
            else:
                x[k - d] -= 1
            jumps += 1
            if mode == 2 and _outside(x, rlo, rhi):
                flag = 1
                # absorbed: freeze observables at the exit site
                while k_obs < n_obs:
                    for j in range(d):
                        pos_out[w, k_obs, j] = x[j]
                    clk_out[w, k_obs] = S
                    wclk_out[w, k_obs] = W
                    k_obs += 1
                if use_exit and exit_t == np.inf:
                    exit_t = t
                break
        exit_out[w] = exit_t
        hit_out[w] = hit_t
        jumps_out[w] = jumps
        flags_out[w] = flag


@nb.njit(inline="always")
def _flip(at_x, m, dt, u):
    # symmetric two-state chain with switching rate m: P(same state after dt)
    return at_x if u <= 0.5 * (1.0 + math.exp(-2.0 * m * dt)) else not at_x


@nb.njit(inline="always")
def _pair_sojourn(x, y, m, a, b, t, state, ko, obs, pos_out, w):
    """Run the two-state chain on {x, y} from x until it is killed or ``obs`` is exhausted."""
    n_obs = obs.shape[0]
    c = a if a > b else b
    at_x = True
    n_ev = 0
    while True:
        if c > 0.0:
            state += GOLDEN
            tau = t - math.log(to_unit(mix64(state))) / c
        else:
            tau = np.inf
        while ko < n_obs and obs[ko] < tau:
            state += GOLDEN
            at_x = _flip(at_x, m, obs[ko] - t, to_unit(mix64(state)))
            t = obs[ko]
            for j in range(x.shape[0]):
                pos_out[w, ko, j] = x[j] if at_x else y[j]
            ko += 1
        if ko >= n_obs:
            return at_x, t, state, ko, n_ev
        state += GOLDEN
        at_x = _flip(at_x, m, tau - t, to_unit(mix64(state)))
        t = tau
        n_ev += 1
        state += GOLDEN
        if to_unit(mix64(state)) * c <= (a if at_x else b):
            return at_x, t, state, ko, n_ev


@nb.njit(cache=True, error_model="numpy")
def _positions(starts, skeys, key, fp, table, clo, cside, rlo, rhi, mode, obs, trap, pos_out, jumps_out, flags_out, w0, w1):
    """Positions of the VSRW at ``obs`` only.

    Sojourns on a heavy edge {x, y} (mu_xy >= trap * (mu_x - mu_xy)) are
    simulated in one piece: the pair is a symmetric two-state chain with
    switching rate mu_xy, killed at rate a = mu_x - mu_xy in x and
    b = mu_y - mu_xy in y. Killing is sampled by thinning at rate max(a, b),
    and the pair state is drawn from the exact two-state transition law at
    each candidate and observation time. The output law equals that of the
    step-by-step walk; only the cost of the bounces is removed.
    """
    d = starts.shape[1]
    n_obs = obs.shape[0]
    x = np.empty(d, dtype=np.int64)
    y = np.empty(d, dtype=np.int64)
    offs = np.empty(d, dtype=np.int64)
    stride = _strides(d, cside)
    rates = np.empty((3, 2 * d))  # rows: current site, site just left, trap partner
    cur, prv, yb = 0, 1, 2
    cut = fp[FP_CUTOFF]
    for w in range(w0, w1):
        for j in range(d):
            x[j] = starts[w, j]
        state = skeys[w]
        t = 0.0
        ko = 0
        jumps = 0
        flag = 0
        mu = 0.0
        pmu = 0.0
        back = -1
        load = True
        while ko < n_obs:
            if load:
                # fast path: x and its lower neighbours lie inside the table
                idx = 0
                inner = cside > 0
                for j in range(d):
                    off = x[j] - clo[j]
                    idx += off * stride[j]
                    if off < 1 or off >= cside:
                        inner = False
                if inner:
                    mu = 0.0
                    for i in range(d):
                        v = table[idx * d + i]
                        if v > cut or (mode == 1 and x[i] >= rhi[i]):
                            v = 0.0
                        rates[cur, i] = v
                        mu += v
                        v = table[(idx - stride[i]) * d + i]
                        if v > cut or (mode == 1 and x[i] <= rlo[i]):
                            v = 0.0
                        rates[cur, d + i] = v
                        mu += v
                else:
                    mu = _load_site(x, offs, stride, rates[cur], key, fp, table, clo, cside, rlo, rhi, mode)
            if mu <= 0.0:
                while ko < n_obs:
                    for j in range(d):
                        pos_out[w, ko, j] = x[j]
                    ko += 1
                break
            trapped = False
            km = 0
            m = 0.0
            a = 0.0
            if trap > 0.0:
                for k in range(1, 2 * d):
                    if rates[cur, k] > rates[cur, km]:
                        km = k
                m = rates[cur, km]
                a = mu - m
                trapped = m >= trap * a
            if trapped:
                for j in range(d):
                    y[j] = x[j]
                if km < d:
                    y[km] += 1
                else:
                    y[km - d] -= 1
                trapped = not (mode == 2 and _outside(y, rlo, rhi))
            if not trapped:
                state += GOLDEN
                t_next = t - math.log(to_unit(mix64(state))) / mu
                while ko < n_obs and obs[ko] < t_next:
                    for j in range(d):
                        pos_out[w, ko, j] = x[j]
                    ko += 1
                if ko >= n_obs:
                    break
                t = t_next
                state += GOLDEN
                k = _pick_row(rates, cur, to_unit(mix64(state)), mu)
                cur, prv = prv, cur
                mu, pmu = pmu, mu
                load = k != back
                back = k - d if k >= d else k + d
                if k < d:
                    x[k] += 1
                else:
                    x[k - d] -= 1
                jumps += 1
            else:
                idy = 0
                inner = cside > 0
                for j in range(d):
                    off = y[j] - clo[j]
                    idy += off * stride[j]
                    if off < 1 or off >= cside:
                        inner = False
                if inner:
                    muy = 0.0
                    for i in range(d):
                        v = table[idy * d + i]
                        if v > cut or (mode == 1 and y[i] >= rhi[i]):
                            v = 0.0
                        rates[yb, i] = v
                        muy += v
                        v = table[(idy - stride[i]) * d + i]
                        if v > cut or (mode == 1 and y[i] <= rlo[i]):
                            v = 0.0
                        rates[yb, d + i] = v
                        muy += v
                else:
                    muy = _load_site(y, offs, stride, rates[yb], key, fp, table, clo, cside, rlo, rhi, mode)
                b = muy - m
                kb = km - d if km >= d else km + d  # index of x seen from y
                at_x, t, state, ko, n_ev = _pair_sojourn(x, y, m, a, b, t, state, ko, obs, pos_out, w)
                jumps += n_ev
                if ko >= n_obs:
                    break
                # leave the pair from whichever end holds the walker
                if not at_x:
                    cur, yb = yb, cur
                    mu = muy
                    for j in range(d):
                        x[j] = y[j]
                    km = kb
                state += GOLDEN
                rest = mu - rates[cur, km]
                keep = rates[cur, km]
                rates[cur, km] = 0.0
                k = _pick_row(rates, cur, to_unit(mix64(state)), rest)
                rates[cur, km] = keep
                cur, prv = prv, cur
                mu, pmu = pmu, mu
                load = True
                back = k - d if k >= d else k + d
                if k < d:
                    x[k] += 1
                else:
                    x[k - d] -= 1
                jumps += 1
            if mode == 2 and _outside(x, rlo, rhi):
                flag = 1
                while ko < n_obs:
                    for j in range(d):
                        pos_out[w, ko, j] = x[j]
                    ko += 1
                break
        jumps_out[w] = jumps
        flags_out[w] = flag


# Walkers are split into fixed chunks that run in parallel. Chunk bounds do
# not depend on the thread count and every walker owns its random stream and
# output rows, so results are bit-identical for any number of threads.
CHUNK = 128


def _chunks(n_w):
    return np.append(np.arange(0, n_w, CHUNK, dtype=np.int64), np.int64(n_w))


@nb.njit(cache=True, parallel=True)
def _batch_par(chunks, starts, skeys, key, fp, table, clo, cside, rlo, rhi, mode, obs_times, levels, w_cut, w_center, w_r2,
               exit_center, exit_r2, big_thresh, big_center, big_r2, pos_out, clk_out, wclk_out, csrw_out, exit_out, hit_out,
               jumps_out, flags_out, max_jumps):
    for c in nb.prange(chunks.shape[0] - 1):
        _batch(starts, skeys, key, fp, table, clo, cside, rlo, rhi, mode, obs_times, levels, w_cut, w_center, w_r2,
               exit_center, exit_r2, big_thresh, big_center, big_r2, pos_out, clk_out, wclk_out, csrw_out, exit_out,
               hit_out, jumps_out, flags_out, max_jumps, chunks[c], chunks[c + 1])


@nb.njit(cache=True, parallel=True)
def _positions_par(chunks, starts, skeys, key, fp, table, clo, cside, rlo, rhi, mode, obs, trap, pos_out, jumps_out, flags_out):
    for c in nb.prange(chunks.shape[0] - 1):
        _positions(starts, skeys, key, fp, table, clo, cside, rlo, rhi, mode, obs, trap, pos_out, jumps_out, flags_out,
                   chunks[c], chunks[c + 1])


@dataclass
class BatchResult:
    """Observables of a batch of independent walkers (row = walker)."""

    positions: np.ndarray  # (walkers, len(times), d)
    clock: np.ndarray  # (walkers, len(times)) S at each time
    weighted_clock: np.ndarray  # (walkers, len(times))
    csrw: np.ndarray  # (walkers, len(levels), d) X at each clock level
    exit_time: np.ndarray
    hit_time: np.ndarray
    jumps: np.ndarray
    flags: np.ndarray  # 0 ok, 1 absorbed, 2 stuck, 3 jump cap


def run_batch(
    field_,
    starts,
    walk_seed,
    times=(),
    levels=(),
    first_index=0,
    weight_cutoff=None,
    weight_radius=None,
    weight_center=None,
    exit_radius=None,
    exit_center=None,
    big_threshold=None,
    big_radius=None,
    big_center=None,
    max_jumps=10**9,
):
    """Simulate one VSRW per row of ``starts``.

    Walker ``k`` uses stream index ``first_index + k``. ``times`` and
    ``levels`` must be sorted; positions are recorded at ``times`` and CSRW
    positions at clock ``levels``. The weighted clock integrates
    ``sum_{e ~ x, mu_e <= weight_cutoff} mu_e`` over sites within
    ``weight_radius`` of ``weight_center``.
    """
    d = field_.d
    starts = np.ascontiguousarray(np.atleast_2d(starts), dtype=np.int64)
    if starts.shape[1] != d:
        raise ValueError("start sites have the wrong dimension")
    n_w = starts.shape[0]
    times = np.ascontiguousarray(times, dtype=np.float64)
    levels = np.ascontiguousarray(levels, dtype=np.float64)
    if np.any(np.diff(times) < 0) or np.any(np.diff(levels) < 0):
        raise ValueError("times and levels must be sorted")
    skeys = stream_keys_for(walk_seed, first_index, n_w, NS_WALK)
    key, fp, table, clo, cside, rlo, rhi, mode = field_.kernel_args()
    zero = np.zeros(d, dtype=np.int64)

    def _center(c):
        return zero if c is None else np.asarray(c, dtype=np.int64)

    pos = np.zeros((n_w, len(times), d), dtype=np.int64)
    clk = np.zeros((n_w, len(times)))
    wclk = np.zeros((n_w, len(times)))
    csrw = np.zeros((n_w, len(levels), d), dtype=np.int64)
    exit_t = np.empty(n_w)
    hit_t = np.empty(n_w)
    jumps = np.empty(n_w, dtype=np.int64)
    flags = np.empty(n_w, dtype=np.int64)
    _batch_par(
        _chunks(n_w),
        starts,
        skeys,
        key,
        fp,
        table,
        clo,
        cside,
        rlo,
        rhi,
        mode,
        times,
        levels,
        math.inf if weight_cutoff is None else float(weight_cutoff),
        _center(weight_center),
        -1.0 if weight_radius is None else float(weight_radius) ** 2,
        _center(exit_center),
        -1.0 if exit_radius is None else float(exit_radius) ** 2,
        0.0 if big_threshold is None else float(big_threshold),
        _center(big_center),
        math.inf if big_radius is None else float(big_radius) ** 2,
        pos,
        clk,
        wclk,
        csrw,
        exit_t,
        hit_t,
        jumps,
        flags,
        int(max_jumps),
    )
    return BatchResult(pos, clk, wclk, csrw, exit_t, hit_t, jumps, flags)


@dataclass
class PositionSample:
    positions: np.ndarray  # (walkers, len(times), d)
    events: np.ndarray  # simulation events per walker (jumps plus pair-sojourn candidates)
    flags: np.ndarray  # 0 ok, 1 absorbed


def run_positions(field_, starts, walk_seed, times, first_index=0, trap_ratio=4.0):
    """VSRW positions at ``times`` with heavy-edge bounces collapsed.

    Same law as ``run_batch(...).positions`` but not the same sample paths:
    the random stream is consumed differently. ``trap_ratio=0`` disables the
    pair acceleration and reproduces the plain jump chain.
    """
    d = field_.d
    starts = np.ascontiguousarray(np.atleast_2d(starts), dtype=np.int64)
    if starts.shape[1] != d:
        raise ValueError("start sites have the wrong dimension")
    times = np.ascontiguousarray(times, dtype=np.float64)
    if len(times) == 0 or np.any(np.diff(times) < 0) or times[0] < 0:
        raise ValueError("times must be nonempty, nonnegative and sorted")
    n_w = starts.shape[0]
    skeys = stream_keys_for(walk_seed, first_index, n_w, NS_WALK)
    key, fp, table, clo, cside, rlo, rhi, mode = field_.kernel_args()
    pos = np.zeros((n_w, len(times), d), dtype=np.int64)
    events = np.empty(n_w, dtype=np.int64)
    flags = np.empty(n_w, dtype=np.int64)
    _positions_par(_chunks(n_w), starts, skeys, key, fp, table, clo, cside, rlo, rhi, mode, times, float(trap_ratio), pos, events, flags)
    return PositionSample(pos, events, flags)


# ---------------------------------------------------------------------------
# trajectories and their functionals
# ---------------------------------------------------------------------------


@dataclass
class WalkTrajectory:
    """A VSRW path: ``sites[k]`` is occupied on ``[epochs[k], epochs[k+1])``.

    ``rates[k]`` is mu at ``sites[k]``; ``horizon`` is the end of the
    observation window. If ``exited`` is set, the last site lies outside a
    Dirichlet region and the walk was absorbed at ``epochs[-1]``.
    """

    sites: np.ndarray
    epochs: np.ndarray
    rates: np.ndarray
    horizon: float
    exited: bool = False

    @property
    def start(self):
        return self.sites[0]

    @property
    def n_jumps(self):
        return len(self.epochs) - 1

    def _interval_ends(self):
        ends = np.empty_like(self.epochs)
        ends[:-1] = self.epochs[1:]
        ends[-1] = self.epochs[-1] if self.exited else self.horizon
        return ends

    def cumulative_clock(self):
        """S at each jump epoch (S at epochs[k])."""
        lengths = np.diff(self.epochs)
        return np.concatenate([[0.0], np.cumsum(self.rates[:-1] * lengths)])

    def position(self, t):
        if t < 0 or t > self.horizon:
            raise ValueError("time outside the trajectory window")
        k = np.searchsorted(self.epochs, t, side="right") - 1
        return self.sites[k]

    def check(self):
        """Nearest-neighbour moves and strictly increasing epochs."""
        steps = np.abs(np.diff(self.sites, axis=0)).sum(axis=1)
        return bool(np.all(steps == 1) and np.all(np.diff(self.epochs) > 0))


def simulate_vsrw(field_, start, horizon, stream=None, max_jumps=10**8):
    """Simulate Y from ``start`` on [0, horizon] with the walker stream."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    stream = stream or RngStream(0)
    start = np.asarray(start, dtype=np.int64)
    key, fp, table, clo, cside, rlo, rhi, mode = field_.kernel_args()
    skey = stream_key(stream.master_seed, stream.walker)
    sites, epochs, rates, exited, draws = _trajectory(start, float(horizon), skey, stream.counter, key, fp, table, clo, cside, rlo, rhi, mode, int(max_jumps))
    stream.counter += int(draws)
    return WalkTrajectory(sites, epochs, rates, float(horizon), bool(exited))


def clock_value(traj, field_=None, t=None):
    """S_t = int_0^t mu_{Y_s} ds along ``traj``.

    ``field_`` is accepted for symmetry with the other functionals; the rates
    recorded on the trajectory are used.
    """
    if t is None:
        t, field_ = field_, None
    if t < 0 or t > traj.horizon + 1e-12 * max(1.0, traj.horizon):
        raise ValueError("t beyond the trajectory horizon")
    clock = traj.cumulative_clock()
    k = np.searchsorted(traj.epochs, t, side="right") - 1
    return float(clock[k] + traj.rates[k] * (t - traj.epochs[k]))


def inverse_clock(traj, s):
    """A_s = inf{t : S_t > s} (right-continuous inverse)."""
    clock = traj.cumulative_clock()
    ends = traj._interval_ends()
    total = clock[-1] + traj.rates[-1] * (ends[-1] - traj.epochs[-1])
    if s < 0 or s >= total:
        raise ValueError("clock level not reached within the horizon")
    # last interval whose starting clock is <= s; ties go to the later interval
    k = np.searchsorted(clock, s, side="right") - 1
    while k + 1 < len(clock) and clock[k + 1] <= s:
        k += 1
    if traj.rates[k] == 0:
        return float(traj.epochs[k])
    return float(traj.epochs[k] + (s - clock[k]) / traj.rates[k])


def csrw_position(traj, field_=None, t=None):
    """X_t = Y_{A_t}: the site held when the clock first exceeds t."""
    if t is None:
        t, field_ = field_, None
    if t == 0:
        return traj.sites[0]
    clock = traj.cumulative_clock()
    ends = traj._interval_ends()
    total = clock[-1] + traj.rates[-1] * (ends[-1] - traj.epochs[-1])
    if t >= total:
        raise ValueError("trajectory too short: clock does not reach t")
    k = np.searchsorted(clock, t, side="right") - 1
    return traj.sites[k]


def csrw_holding_times(traj):
    """Clock-time spent at each visited site (holding times of X)."""
    return traj.rates[:-1] * np.diff(traj.epochs)


def exit_time(traj, center, R):
    """First time with |Y_t - center| > R (Euclidean); None if not yet."""
    diff = traj.sites - np.asarray(center, dtype=np.int64)
    out = np.flatnonzero(np.sum(diff.astype(np.float64) ** 2, axis=1) > R * R)
    if len(out) == 0:
        return None
    k = out[0]
    if traj.epochs[k] > traj.horizon:
        return None
    return float(traj.epochs[k])


# ---------------------------------------------------------------------------
# rescalings
# ---------------------------------------------------------------------------


@dataclass
class ClockSeries:
    n: int
    t_grid: np.ndarray
    values: np.ndarray  # S^(n) at the grid, one row per walker
    walkers: np.ndarray


def rescaled_clock_series(field_, n, t_grid, walk_seed, walkers=1, first_index=0, start=None):
    """S^(n)_t = S_{n^2 t} / (n^2 log n) on ``t_grid`` for each walker."""
    if n <= 1:
        raise ValueError("n must be >= 2")
    t_grid = np.asarray(t_grid, dtype=np.float64)
    if np.any(t_grid < 0) or np.any(np.diff(t_grid) < 0):
        raise ValueError("t_grid must be nonnegative and sorted")
    d = field_.d
    starts = np.zeros((walkers, d), dtype=np.int64) if start is None else np.tile(np.asarray(start, dtype=np.int64), (walkers, 1))
    res = run_batch(field_, starts, walk_seed, times=n * n * t_grid, first_index=first_index)
    vals = res.clock / (n * n * math.log(n))
    return ClockSeries(int(n), t_grid, vals, np.arange(first_index, first_index + walkers))


def rescaled_csrw_marginal(field_, n, t, walk_seed, walkers=1, first_index=0):
    """X^(n)_t = X_{n^2 log(n) t} / n for ``walkers`` independent walkers."""
    if n <= 1:
        raise ValueError("n must be >= 2")
    d = field_.d
    if t == 0:
        return np.zeros((walkers, d))
    starts = np.zeros((walkers, d), dtype=np.int64)
    res = run_batch(field_, starts, walk_seed, levels=[n * n * math.log(n) * t], first_index=first_index)
    return res.csrw[:, 0, :] / n


def rescaled_vsrw_marginal(field_, n, t, walk_seed, walkers=1, first_index=0):
    """Y^(n)_t = Y_{n^2 t} / n."""
    d = field_.d
    starts = np.zeros((walkers, d), dtype=np.int64)
    res = run_batch(field_, starts, walk_seed, times=[n * n * t], first_index=first_index)
    return res.positions[:, 0, :] / n
