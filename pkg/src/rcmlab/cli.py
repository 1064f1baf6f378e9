"""Command-line laboratory: strict JSON configs, experiment runners, reports.

``rcmlab <experiment> --config cfg.json [--seed S] [--out DIR] [--threads N]``

Every run writes ``<out>/<experiment>.json`` plus CSV tables named
``<out>/<experiment>_<table>.csv``. All files start with the config hash and
master seed, and nothing in them depends on wall time or thread count, so
equal configs give byte-identical files.
"""

import argparse
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numba
import numpy as np

from . import experiments as ex
from .env import ConductanceField, LatticeRegion, homogeneous_field, iid_conductances, make_tail_law, save_binary, save_csv
from .experiments import Check, ExperimentReport, Stat
from .rng import RngStream
from .solver import effective_conductance, green, green_extrapolated, heat_kernel
from .walk import rescaled_clock_series, simulate_vsrw

EXPERIMENTS = (
    "env-sample",
    "walk",
    "clock",
    "heat-kernel",
    "green",
    "ceff",
    "llt",
    "classical",
    "ergodic",
    "truncation",
    "homogenization",
    "clusters",
    "qfclt",
    "report",
)

WATSON_G = 0.2527310098586  # g(0,0) of the unit-conductance VSRW on Z^3

DEFAULT_TOLERANCES = {"solver": 1e-10, "kernel": 1e-9}

DEFAULT_THRESHOLDS = {
    "ks_level": 0.99,
    "bessel_abs": 1e-8,
    "mc_z": 3.0,
    "green_rel": 0.01,
    "duality": 1e-6,
    "mass_factor": 2.0,
    "semigroup_factor": 4.0,
    "trend_fraction": 0.8,
    "llt_eps": 0.35,
    "llt_control_eps": 0.2,
    "mismatch_z": 4.0,
    "ergodic_rel": 0.05,
    "ergodic_fraction": 0.9,
    "truncation_max": 0.05,
    "cluster_r2": 0.98,
    "gamma_ratio": 2.0,
    "homog_lambda": 10.0,
    "qfclt_control_ks": 0.02,
    "cov_z": 4.0,
}


# salts whose seeds build environments; ``env_seed`` replaces them when set
ENV_SALTS = frozenset(
    ["env-sample", "walk-env", "clock-env", "hk-env", "green-env", "ceff-env", "llt-env", "ergodic", "truncation-env", "homog-env", "cluster-env", "qfclt-env"]
)


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LawConfig:
    d: int
    tail_c: float = None
    rho: float = 0.0
    alpha: float = 1.0

    def build(self):
        return make_tail_law(self.d, self.rho, self.alpha, self.tail_c)


@dataclass(frozen=True)
class RunConfig:
    """Validated run parameters.

    ``law`` (with ``d``) and the ``n`` ladder are mandatory; everything else
    has a default that is echoed into the outputs.
    """

    law: LawConfig
    n: tuple
    seed: int = 0
    walkers: int = 2000
    envs: int = 10
    K: float = 2.0
    a: float = 1.0
    t: float = 1.0
    delta: float = 0.1
    beta: float = 1.5
    theta1: float = 0.8
    b_n: int = 6
    b_values: tuple = (6, 10)
    a_p: float = 1.0
    box_half_side: int = 10
    ball_radius: float = 2.0
    spacing: float = 0.5
    llt_times: tuple = (0.5, 0.75, 1.0)
    control_walkers: int = None
    identity_walkers: int = None
    env_seed: int = None
    eps: float = 0.5
    samples: int = 10**6
    cluster_half_side: int = 40
    cluster_inner: int = 20
    tolerances: dict = field(default_factory=lambda: dict(DEFAULT_TOLERANCES))
    thresholds: dict = field(default_factory=lambda: dict(DEFAULT_THRESHOLDS))

    @classmethod
    def from_dict(cls, raw):
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        for req in ("law", "n"):
            if req not in raw:
                raise ConfigError(f"missing required key {req!r}")
        law_raw = raw["law"]
        if not isinstance(law_raw, dict):
            raise ConfigError("law must be an object")
        bad = sorted(set(law_raw) - {f.name for f in fields(LawConfig)})
        if bad:
            raise ConfigError(f"unknown law key(s): {', '.join(bad)}")
        if "d" not in law_raw:
            raise ConfigError("law.d is required")
        try:
            law = LawConfig(**law_raw)
            law.build()
        except (TypeError, ValueError) as err:
            raise ConfigError(f"invalid law: {err}") from None
        ns = raw["n"]
        if isinstance(ns, int):
            ns = [ns]
        if not ns or not all(isinstance(v, int) and v >= 2 for v in ns):
            raise ConfigError("n must be an integer >= 2 or a nonempty list of them")
        kw = {k: v for k, v in raw.items() if k not in ("law", "n", "tolerances", "thresholds")}
        for key in ("b_values", "llt_times"):
            if key in kw:
                kw[key] = tuple(kw[key])
        tol = dict(DEFAULT_TOLERANCES)
        tol.update(_strict_sub(raw.get("tolerances", {}), DEFAULT_TOLERANCES, "tolerances"))
        thr = dict(DEFAULT_THRESHOLDS)
        thr.update(_strict_sub(raw.get("thresholds", {}), DEFAULT_THRESHOLDS, "thresholds"))
        cfg = cls(law=law, n=tuple(int(v) for v in ns), tolerances=tol, thresholds=thr, **kw)
        cfg._validate()
        return cfg

    def _validate(self):
        positive_int = ("walkers", "envs", "b_n", "box_half_side", "samples", "cluster_half_side", "cluster_inner")
        for k in positive_int:
            v = getattr(self, k)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"{k} must be a positive integer")
        for k in ("K", "a", "t", "theta1", "a_p", "ball_radius", "spacing"):
            v = getattr(self, k)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or not v > 0:
                raise ConfigError(f"{k} must be a positive number")
        for k in ("control_walkers", "identity_walkers"):
            v = getattr(self, k)
            if v is not None and (not isinstance(v, int) or isinstance(v, bool) or v < 1):
                raise ConfigError(f"{k} must be a positive integer")
        for k in ("seed", "env_seed"):
            v = getattr(self, k)
            if v is not None and (not isinstance(v, int) or isinstance(v, bool)):
                raise ConfigError(f"{k} must be an integer")
        if not 0 < self.delta < self.t:
            raise ConfigError("need 0 < delta < t")
        if not 1 < self.beta < 2:
            raise ConfigError("beta must lie in (1, 2)")

    def with_seed(self, seed):
        d = self.as_dict()
        d["seed"] = int(seed)
        return RunConfig.from_dict(d)

    def as_dict(self):
        out = asdict(self)
        out["n"] = list(self.n)
        out["b_values"] = list(self.b_values)
        out["llt_times"] = list(self.llt_times)
        out["law"] = {k: v for k, v in asdict(self.law).items()}
        return out

    @property
    def hash(self):
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def d(self):
        return self.law.d

    def seeds(self, salt, count=None):
        """Derived seeds: environment and walk seeds never coincide across salts."""
        count = self.envs if count is None else count
        if self.env_seed is not None and salt in ENV_SALTS:
            return [self.env_seed + i for i in range(count)]
        rng = np.random.default_rng(np.random.SeedSequence([self.seed & ((1 << 64) - 1), _salt(salt)]))
        return [int(v) for v in rng.integers(0, 2**62, size=count)]


def _salt(text):
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")


def _strict_sub(raw, defaults, name):
    if not isinstance(raw, dict):
        raise ConfigError(f"{name} must be an object")
    bad = sorted(set(raw) - set(defaults))
    if bad:
        raise ConfigError(f"unknown {name} key(s): {', '.join(bad)}")
    return raw


def _read_json(path):
    with open(path) as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: {err}") from None


def load_config(path, overrides=None):
    raw = _read_json(path)
    if overrides:
        raw = apply_overrides(raw, overrides)
    return RunConfig.from_dict(raw)


def _number(text):
    try:
        return int(text)
    except ValueError:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"not a number: {text!r}") from None


def _numbers(text):
    return [_number(v) for v in text.split(",") if v.strip()]


def apply_overrides(raw, opts):
    """Fold command-line flags into a raw config dict before validation.

    The result is what gets hashed, so flag-driven runs carry their own
    provenance.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = json.loads(json.dumps(raw))
    if "law" in opts:
        law = dict(raw.get("law", {}))
        for item in opts["law"].split(","):
            key, sep, val = item.partition("=")
            if not sep:
                raise ConfigError(f"--law expects key=value pairs, got {item!r}")
            key = key.strip()
            if key == "a_p":
                raw["a_p"] = _number(val)
            else:
                law[key] = _number(val)
        raw["law"] = law
    if "n" in opts:
        raw["n"] = _numbers(opts["n"])
    if "times" in opts:
        raw["llt_times"] = _numbers(opts["times"])
    if "tol" in opts:
        raw["tolerances"] = {**raw.get("tolerances", {}), "solver": opts["tol"], "kernel": opts["tol"]}
    for flag, key in (("t_max", "t"), ("walkers", "walkers"), ("box", "box_half_side"), ("env_seed", "env_seed"), ("seed", "seed")):
        if flag in opts:
            raw[key] = opts[flag]
    return raw


# --------------------------------------------------------------------------
# runners
# --------------------------------------------------------------------------


def _field(cfg, seed):
    return ConductanceField(cfg.law.build(), seed)


def _cached(f, half_side):
    return f.cached(half_side)


def run_env_sample(cfg):
    law = cfg.law.build()
    (env_seed,) = cfg.seeds("env-sample", 1)
    x = iid_conductances(law, env_seed, cfg.samples)
    ks = ex.law_ks(law, x)
    band = ex.ks_band(cfg.samples, cfg.thresholds["ks_level"])
    region = LatticeRegion(cfg.d, cfg.box_half_side)
    f = _field(cfg, env_seed)
    table = f.box_edges(region)
    vals = table.ravel()
    stats_ = [
        Stat("ks_distance", ks, band / 1.628, cfg.samples),
        Stat("atom_fraction", float(np.mean(x == 1.0)), math.sqrt(law.tail_c * (1 - law.tail_c) / cfg.samples), cfg.samples),
        Stat("box_max_mu", float(vals.max()), 0.0, vals.size),
    ]
    checks = [
        Check("ks_distance", ks, hi=band),
        Check("atom_fraction_z", (np.mean(x == 1.0) - (1 - law.tail_c)) / math.sqrt(law.tail_c * (1 - law.tail_c) / cfg.samples), -4, 4),
    ]
    q = np.quantile(x, [0.5, 0.9, 0.99, 0.999])
    rows = [[p, float(v), float(law.cdf(v))] for p, v in zip([0.5, 0.9, 0.99, 0.999], q)]
    rep = ExperimentReport("env-sample", {"samples": cfg.samples, "box_half_side": cfg.box_half_side}, stats_, checks, {"env": env_seed})
    rep.tables["quantiles"] = (["p", "empirical_quantile", "law_cdf"], rows)
    rep.files = {"edges.csv": lambda p, head: save_csv(f, p, region, head), "env.bin": lambda p, head: save_binary(f, p, region)}
    return rep


def run_walk(cfg):
    (env_seed,) = cfg.seeds("walk-env", 1)
    (walk_seed,) = cfg.seeds("walk", 1)
    f = _field(cfg, env_seed)
    stats_, checks, rows = [], [], []
    for k, n in enumerate(cfg.n):
        g = _cached(f, min(int(6 * n * math.sqrt(cfg.t)) + 4, 300 if cfg.d == 2 else 60))
        est = ex.estimate_sigma_v(g, n, cfg.walkers, cfg.t, walk_seed, first_index=k * cfg.walkers)
        stats_.append(Stat(f"sigma_v2_n{n}", est.value, est.stderr, est.walkers))
        for i in range(cfg.d):
            for j in range(i + 1, cfg.d):
                z = est.covariance[i, j] / est.cov_stderr[i, j]
                checks.append(Check(f"cross_cov_z_n{n}_{i}{j}", z, -cfg.thresholds["cov_z"], cfg.thresholds["cov_z"]))
        rows.append([n, est.value, est.stderr, est.ci, est.walkers])
    rep = ExperimentReport("walk", {"n": list(cfg.n), "t": cfg.t, "walkers": cfg.walkers}, stats_, checks, {"env": env_seed, "walk": walk_seed})
    rep.tables["sigma"] = (["n", "sigma_v2", "stderr", "ci95", "walkers"], rows)
    # one VSRW path at the smallest n, in unrescaled time
    n0 = cfg.n[0]
    traj = simulate_vsrw(_cached(f, 4 * n0 + 4), np.zeros(cfg.d, dtype=np.int64), n0 * n0 * cfg.t, RngStream(walk_seed, 10**9))
    rep.tables["trajectory"] = (["epoch", *[f"x{j + 1}" for j in range(cfg.d)]], [[float(e), *map(int, x)] for e, x in zip(traj.epochs, traj.sites)])
    return rep


def run_clock(cfg):
    law = cfg.law.build()
    env_seeds = cfg.seeds("clock-env")
    (walk_seed,) = cfg.seeds("clock-walk", 1)
    thr = cfg.thresholds
    stats_, checks = [], []
    rep_tables = {}
    # kernel identity for the truncated clock at the smallest n
    n0 = cfg.n[0]
    f0 = ConductanceField(law, env_seeds[0])
    ker = ex.clock_expectation_kernel(f0, n0, cfg.t, cfg.a, cfg.K, tol=cfg.tolerances["kernel"])
    iw = cfg.identity_walkers or cfg.walkers
    mean, se = ex.clock_expectation_mc(f0, n0, cfg.t, cfg.a, cfg.K, iw, walk_seed)
    z = (mean - ker.value) / se
    stats_ += [Stat("clock_kernel_expectation", ker.value, 0.0, 1), Stat("clock_mc_expectation", mean, se, iw)]
    checks.append(Check("clock_identity_z", z, -thr["mc_z"], thr["mc_z"]))
    # trend of S^(n)_t towards 2t
    trend = ex.clock_trend(law, env_seeds, cfg.n, cfg.walkers, walk_seed, cfg.t, eager_half_side=lambda n: min(4 * n, 80))
    for c, n in enumerate(cfg.n):
        stats_.append(Stat(f"mean_S_n{n}", float(trend.means[:, c].mean()), float(np.sqrt(np.sum(trend.stderrs[:, c] ** 2)) / len(env_seeds)), cfg.walkers * len(env_seeds)))
    frac = float(np.mean(trend.decreasing))
    stats_.append(Stat("fraction_decreasing", frac, math.sqrt(max(frac * (1 - frac), 1e-12) / len(env_seeds)), len(env_seeds)))
    checks.append(Check("fraction_decreasing", frac, lo=thr["trend_fraction"]))
    rows = [[es, n, trend.means[r, c], trend.stderrs[r, c], trend.gaps[r, c]] for r, es in enumerate(env_seeds) for c, n in enumerate(cfg.n)]
    rep_tables["trend"] = (["env_seed", "n", "mean_S", "stderr", "gap"], rows)
    # one clock series per n for the first environment
    grid = np.linspace(0.0, cfg.t, 11)[1:]

    for c, n in enumerate(cfg.n):
        cs = rescaled_clock_series(f0, n, grid, walk_seed, walkers=min(cfg.walkers, 200), first_index=10**9 + c * 1000)
        rows = [[n, float(t), float(v[k]), int(w)] for w, v in zip(cs.walkers, cs.values) for k, t in enumerate(grid)]
        rep_tables[f"series_n{n}"] = (["n", "t", "S_n_t", "walker_id"], rows)
    rep = ExperimentReport(
        "clock",
        {"n": list(cfg.n), "t": cfg.t, "a": cfg.a, "K": cfg.K, "walkers": cfg.walkers, "identity_walkers": iw, "envs": cfg.envs},
        stats_,
        checks,
        {"envs": env_seeds, "walk": walk_seed},
    )
    rep.tables = rep_tables
    rep.notes.append("mean S^(n)_t approaches 2t at rate 1/log n; only the ordering across n is asserted")
    return rep


def bessel_return(d, t):
    """p_t(0, 0) of the unit-conductance VSRW on Z^d: (e^{-2t} I_0(2t))^d."""
    from scipy.special import ive

    return float(ive(0, 2.0 * t) ** d)


def run_heat_kernel(cfg):
    thr = cfg.thresholds
    tol = cfg.tolerances["kernel"]
    d = cfg.d
    t = cfg.t
    stats_, checks = [], []
    # homogeneous oracle
    half = int(max(12, math.ceil(12 * math.sqrt(t) + 8)))
    region = LatticeRegion(d, half)
    hf = homogeneous_field(d, 1.0, region)
    kf = heat_kernel(hf, np.zeros(d, dtype=np.int64), [t], tol=tol)
    p0 = kf.value(np.zeros(d, dtype=np.int64))
    exact = bessel_return(d, t)
    stats_.append(Stat("p_t_origin", p0, tol, 1))
    checks.append(Check("bessel_error", abs(p0 - exact), hi=thr["bessel_abs"]))
    (walk_seed,) = cfg.seeds("hk-walk", 1)
    mc = ex.run_positions(hf, np.zeros((cfg.walkers, d), dtype=np.int64), walk_seed, [t]).positions[:, 0, :]
    frac = float(np.mean(np.all(mc == 0, axis=1)))
    se = math.sqrt(exact * (1 - exact) / cfg.walkers)
    stats_.append(Stat("p_t_origin_mc", frac, se, cfg.walkers))
    checks.append(Check("mc_z", (frac - exact) / se, -thr["mc_z"], thr["mc_z"]))
    # invariants on a random truncated field
    (env_seed,) = cfg.seeds("hk-env", 1)
    box = LatticeRegion(d, cfg.box_half_side)
    n0 = cfg.n[0]
    rf = _field(cfg, env_seed).restrict(box, "eager").truncate(cfg.a, n0)
    x0 = np.zeros(d, dtype=np.int64)
    x1 = np.zeros(d, dtype=np.int64)
    x1[0] = 1
    s = 0.5 * t
    k0 = heat_kernel(rf, x0, [s, t], tol=tol)
    k1 = heat_kernel(rf, x1, [t], tol=tol)
    mass = float(np.max(np.abs(k0.values.sum(axis=1) - 1.0)))
    sym = abs(k0.values[1, box.index(x1)] - k1.values[0, box.index(x0)])
    semi = heat_kernel(rf, x0, [s], tol=tol, initial=k0.values[0])
    defect = float(np.max(np.abs(semi.values[0] - k0.values[1])))
    stats_ += [Stat("mass_residual", mass, 0.0, box.n_sites), Stat("symmetry_residual", sym, 0.0, 1), Stat("semigroup_defect", defect, 0.0, box.n_sites)]
    checks += [
        Check("mass_residual", mass, hi=thr["mass_factor"] * tol),
        Check("symmetry_residual", sym, hi=thr["mass_factor"] * tol),
        Check("semigroup_defect", defect, hi=thr["semigroup_factor"] * tol),
    ]
    rows = [[*map(int, y), float(p)] for y, p in zip(box.coords(), k0.values[1])]
    rep = ExperimentReport("heat-kernel", {"t": t, "box_half_side": cfg.box_half_side, "a": cfg.a, "n": n0}, stats_, checks, {"env": env_seed, "walk": walk_seed})
    rep.tables["kernel"] = ([f"y{j + 1}" for j in range(d)] + ["p"], rows)
    rep.files = {"kernel.bin": lambda p, head: k0.save_binary(p)}
    return rep


def run_green(cfg):
    d = cfg.d
    thr = cfg.thresholds
    tol = cfg.tolerances["solver"]
    stats_, checks = [], []
    if d == 3:
        hf = homogeneous_field(3, 1.0)
        gx = green_extrapolated(hf, half_sides=(20, 40), tol=tol)
        stats_.append(Stat("g00_extrapolated", gx.extrapolated, abs(gx.extrapolated - gx.values[-1]), 2))
        checks.append(Check("watson_rel_error", abs(gx.extrapolated / WATSON_G - 1.0), hi=thr["green_rel"]))
    (env_seed,) = cfg.seeds("green-env", 1)
    box = LatticeRegion(d, cfg.box_half_side, None, "dirichlet")
    g = green(_field(cfg, env_seed).restrict(box), np.zeros(d, dtype=np.int64), box, tol)
    stats_.append(Stat("g_box_origin", float(g.value(np.zeros(d, dtype=np.int64))), g.residual, box.n_sites))
    rows = [[*map(int, y), float(v)] for y, v in zip(box.coords(), g.values)]
    rep = ExperimentReport("green", {"box_half_side": cfg.box_half_side}, stats_, checks, {"env": env_seed})
    rep.tables["green"] = ([f"y{j + 1}" for j in range(d)] + ["g"], rows)
    rep.files = {"green.bin": lambda p, head: g.save_binary(p)}
    return rep


def run_ceff(cfg):
    d = cfg.d
    tol = cfg.tolerances["solver"]
    env_seeds = cfg.seeds("ceff-env")
    box = LatticeRegion(d, cfg.box_half_side, None, "dirichlet")
    x0 = np.zeros(d, dtype=np.int64)
    rows, errs = [], []
    for es in env_seeds:
        f = _field(cfg, es).restrict(box)
        c = effective_conductance(f, [x0], None, box, tol).value
        g = green(f, x0, box, tol).value(x0)
        errs.append(abs(c * g - 1.0))
        rows.append([es, c, g, c * g - 1.0])
    worst = float(max(errs))
    rep = ExperimentReport(
        "ceff",
        {"box_half_side": cfg.box_half_side, "envs": cfg.envs, "tol": tol},
        [Stat("max_duality_error", worst, 0.0, len(env_seeds))],
        [Check("max_duality_error", worst, hi=cfg.thresholds["duality"])],
        {"envs": env_seeds},
    )
    rep.tables["duality"] = (["env_seed", "ceff", "g_xx", "defect"], rows)
    return rep


def run_llt(cfg):
    d = cfg.d
    n = cfg.n[0]
    thr = cfg.thresholds
    (env_seed,) = cfg.seeds("llt-env", 1)
    (walk_seed,) = cfg.seeds("llt-walk", 1)
    half = int(math.ceil(n * (cfg.K + 6 * math.sqrt(max(cfg.llt_times)))))
    f = _cached(_field(cfg, env_seed), half)
    res = ex.llt_ratio(f, n, cfg.llt_times, cfg.K, cfg.walkers, walk_seed, cfg.ball_radius, cfg.spacing)
    hf = homogeneous_field(d).cached(half)
    cw = cfg.control_walkers or cfg.walkers
    ctl = ex.llt_ratio(hf, n, cfg.llt_times, cfg.K, cw, walk_seed + 1, cfg.ball_radius, cfg.spacing, sigma_v2=2.0, shift_invariant=True)
    hi, lo = res.extremes()
    chi, clo = ctl.extremes()
    e, ce = thr["llt_eps"], thr["llt_control_eps"]
    cells = int(np.isfinite(res.ratio).sum())
    stats_ = [
        Stat("ratio_max", hi, res.worst_stderr(), cells),
        Stat("ratio_min", lo, res.worst_stderr(), cells),
        Stat("control_ratio_max", chi, ctl.worst_stderr(), int(np.isfinite(ctl.ratio).sum())),
        Stat("control_ratio_min", clo, ctl.worst_stderr(), int(np.isfinite(ctl.ratio).sum())),
        Stat("sigma_v2", res.sigma_v2, res.sigma.stderr, res.sigma.walkers),
        Stat("excluded_cells", res.excluded, 0.0, res.ratio.size),
    ]
    checks = [
        Check("ratio_max", hi, hi=1 + e),
        Check("ratio_min", lo, lo=1 / (1 + e)),
        Check("control_ratio_max", chi, hi=1 + ce),
        Check("control_ratio_min", clo, lo=1 / (1 + ce)),
    ]
    head = ["t", *[f"x{j + 1}" for j in range(d)], *[f"y{j + 1}" for j in range(d)], "hits", "expected", "ratio", "stderr"]
    rep = ExperimentReport(
        "llt",
        {"n": n, "K": cfg.K, "times": list(cfg.llt_times), "walkers_per_start": cfg.walkers, "control_walkers": cw, "ball_radius": cfg.ball_radius},
        stats_,
        checks,
        {"env": env_seed, "walk": walk_seed},
    )
    rep.tables["ratios"] = (head, res.rows())
    rep.tables["control"] = (head, ctl.rows())
    return rep


def run_classical(cfg):
    seeds = cfg.seeds("classical", cfg.envs)
    ns = tuple(cfg.n)
    tr = ex.classical_trend(cfg.beta, seeds, ns)
    frac = tr.fraction_decreasing
    z = tr.pooled_z()
    thr = cfg.thresholds
    stats_ = [
        Stat("fraction_decreasing", frac, math.sqrt(max(frac * (1 - frac), 1e-12) / len(seeds)), len(seeds)),
        Stat("mismatch_mean_count", float(tr.mismatch_counts.mean()), math.sqrt(tr.mismatch_var), len(seeds)),
        Stat("mismatch_expected", tr.mismatch_mean, 0.0, max(ns)),
    ]
    checks = [Check("fraction_decreasing", frac, lo=thr["trend_fraction"]), Check("mismatch_z", z, -thr["mismatch_z"], thr["mismatch_z"])]
    rows = [[s, *tr.errors[r], int(tr.decreasing[r]), int(tr.mismatch_counts[r])] for r, s in enumerate(seeds)]
    xi = ex.pareto_draws(seeds[0], max(ns))
    cs = ex.classical_sums(max(ns), cfg.beta, xi)
    rep = ExperimentReport("classical", {"n": list(ns), "beta": cfg.beta, "seeds": len(seeds)}, stats_, checks, {"seeds": seeds})
    rep.tables["sup_errors"] = (["seed", *[f"n{n}" for n in ns], "decreasing", "mismatches"], rows)
    rep.tables["paths"] = (["t", "U", "V", "M"], [[t, u, v, m] for t, u, v, m in zip(cs.t, cs.U, cs.V, cs.M)])
    return rep


def run_ergodic(cfg):
    n = cfg.n[-1]
    seeds = cfg.seeds("ergodic")
    law = cfg.law.build()
    res = [ex.ergodic_average(ConductanceField(law, s), n, cfg.K, cfg.a) for s in seeds]
    rel = np.array([r.relative_error for r in res])
    thr = cfg.thresholds
    frac = float(np.mean(np.abs(rel) <= thr["ergodic_rel"]))
    em = res[0].site_mean
    closed = 2 * cfg.d - 1 + math.log(cfg.a * n * n) if law.rho == 0 and law.alpha == 1 and abs(law.tail_c - 1 / (2 * cfg.d)) < 1e-15 else em
    stats_ = [
        Stat("fraction_within", frac, math.sqrt(max(frac * (1 - frac), 1e-12) / len(seeds)), len(seeds)),
        Stat("relative_error_sd", float(rel.std(ddof=1)) if len(rel) > 1 else 0.0, 0.0, len(seeds)),
        Stat("E_I_n", res[0].mean, 0.0, 1),
        Stat("limit_target", res[0].target, 0.0, 1),
    ]
    checks = [Check("fraction_within", frac, lo=thr["ergodic_fraction"]), Check("site_mean_closed_form", abs(em - closed), hi=1e-12 * max(1.0, closed))]
    rows = [[s, r.value, r.mean, r.relative_error] for s, r in zip(seeds, res)]
    rep = ExperimentReport("ergodic", {"n": n, "K": cfg.K, "a": cfg.a, "seeds": len(seeds)}, stats_, checks, {"seeds": seeds})
    rep.tables["averages"] = (["env_seed", "I_n", "E_I_n", "relative_error"], rows)
    return rep


def run_truncation(cfg):
    n = cfg.n[0]
    law = cfg.law.build()
    env_seeds = cfg.seeds("truncation-env")
    (walk_seed,) = cfg.seeds("truncation-walk", 1)
    rows = []
    for es in env_seeds:
        r = ex.truncation_probs(ConductanceField(law, es), n, cfg.K, cfg.a, cfg.t, cfg.walkers, walk_seed)
        rows.append([es, r.p_exit, r.p_exit_se, r.p_big, r.p_big_se])
    arr = np.array([r[1:] for r in rows])
    top = cfg.thresholds["truncation_max"]
    k_exit, k_big = int(np.argmax(arr[:, 0])), int(np.argmax(arr[:, 2]))
    stats_ = [
        Stat("max_p_exit", arr[k_exit, 0], arr[k_exit, 1], cfg.walkers),
        Stat("max_p_hit_big", arr[k_big, 2], arr[k_big, 3], cfg.walkers),
        Stat("mean_p_exit", float(arr[:, 0].mean()), float(np.sqrt(np.sum(arr[:, 1] ** 2))) / len(rows), cfg.walkers * len(rows)),
        Stat("mean_p_hit_big", float(arr[:, 2].mean()), float(np.sqrt(np.sum(arr[:, 3] ** 2))) / len(rows), cfg.walkers * len(rows)),
    ]
    checks = [Check("max_p_exit", arr[k_exit, 0], hi=top), Check("max_p_hit_big", arr[k_big, 2], hi=top)]
    rep = ExperimentReport("truncation", {"n": n, "K": cfg.K, "a": cfg.a, "t": cfg.t, "walkers": cfg.walkers, "envs": cfg.envs}, stats_, checks, {"envs": env_seeds, "walk": walk_seed})
    rep.tables["probs"] = (["env_seed", "p_exit", "p_exit_se", "p_hit_big", "p_hit_big_se"], rows)
    return rep


def run_homogenization(cfg):
    n = cfg.n[-1]
    law = cfg.law.build()
    env_seeds = cfg.seeds("homog-env")
    rows, lams, ratios = [], [], []
    for es in env_seeds:
        ts = ex.homogenization_stat(ConductanceField(law, es), n, cfg.a, cfg.theta1, cfg.b_n, seed=es)
        lams.append(ts.lam)
        ratios.append(ts.max_to_mean)
        rows.append([es, ts.m, float(ts.sums.max()), float(ts.sums.mean()), ts.max_to_mean, ts.lam, int(ts.counts.sum()), ts.expected_count * len(ts.counts), ts.gamma_mean])
    worst = float(max(ratios))
    stats_ = [
        Stat("max_to_mean", worst, 0.0, len(env_seeds)),
        Stat("lambda_fitted", float(max(lams)), 0.0, len(env_seeds)),
        Stat("gamma_mean", float(np.mean([r[-1] for r in rows])), 0.0, len(env_seeds)),
    ]
    checks = [Check("max_to_mean", worst, hi=cfg.thresholds["homog_lambda"])]
    rep = ExperimentReport("homogenization", {"n": n, "a": cfg.a, "theta1": cfg.theta1, "b_n": cfg.b_n}, stats_, checks, {"envs": env_seeds})
    rep.tables["tiles"] = (["env_seed", "m", "max_sum", "mean_sum", "max_to_mean", "lambda", "big_edges", "expected_big_edges", "gamma_mean"], rows)
    return rep


def run_clusters(cfg):
    law = cfg.law.build()
    env_seeds = cfg.seeds("cluster-env")
    fields_ = [ConductanceField(law, s) for s in env_seeds]
    tail = ex.cluster_tail_fit(fields_, cfg.a_p, cfg.cluster_half_side, cfg.cluster_inner)
    gm = ex.gamma_moment_check(fields_, cfg.a_p, cfg.b_values, (0.0, 0.05, 0.1, 0.2), seed=env_seeds[0])
    j = list(gm.thetas).index(0.1)
    m = gm.moments[:, j]
    ratio = float(m.max() / m.min())
    stats_ = [
        Stat("tail_r2", tail.r2, 0.0, tail.samples),
        Stat("tail_slope", tail.slope, 0.0, tail.samples),
        *[Stat(f"exp_moment_theta0.1_b{b}", float(m[k]), float(gm.stderr[k, j]), gm.gamma_prime.shape[1]) for k, b in enumerate(gm.b_values)],
    ]
    checks = [
        Check("tail_r2", tail.r2, lo=cfg.thresholds["cluster_r2"]),
        Check("moment_ratio", ratio, hi=cfg.thresholds["gamma_ratio"]),
        Check("cut_bound_violations", 0.0 if gm.bound_ok else 1.0, hi=0.0),
    ]
    rep = ExperimentReport("clusters", {"a_p": cfg.a_p, "b_values": list(cfg.b_values), "half_side": cfg.cluster_half_side, "inner": cfg.cluster_inner}, stats_, checks, {"envs": env_seeds})
    rep.tables["tail"] = (["s", "survival"], [[int(s), float(p)] for s, p in zip(tail.sizes, tail.survival)])
    rep.tables["moments"] = (["b_n", *[f"theta{t}" for t in gm.thetas]], [[b, *gm.moments[k]] for k, b in enumerate(gm.b_values)])
    return rep


def run_qfclt(cfg):
    d = cfg.d
    law = cfg.law.build()
    (walk_seed,) = cfg.seeds("qfclt-walk", 1)
    n_top = cfg.n[-1]
    hf = homogeneous_field(d).cached(int(4 * n_top * math.sqrt(math.log(n_top) * cfg.t)) + 4)
    ctl = ex.qfclt_marginal_test(hf, n_top, cfg.t, cfg.walkers, walk_seed, variance=math.log(n_top) * cfg.t / d)
    env_seeds = cfg.seeds("qfclt-env")
    ks = np.empty((len(env_seeds), len(cfg.n)))
    rows = []
    for r, es in enumerate(env_seeds):
        f = ConductanceField(law, es)
        for c, n in enumerate(cfg.n):
            g = _cached(f, min(int(5 * n * math.sqrt(math.log(n) * cfg.t)) + 4, 120))
            sig = ex.estimate_sigma_v(g, n, cfg.walkers, cfg.t, walk_seed, first_index=2 * c * cfg.walkers)
            mt = ex.qfclt_marginal_test(g, n, cfg.t, cfg.walkers, walk_seed, sigma_v2=sig.value, first_index=(2 * c + 1) * cfg.walkers)
            ks[r, c] = mt.ks.max()
            rows.append([es, n, sig.value, *mt.ks, *mt.correlations])
    dec = np.all(np.diff(ks, axis=1) < 0, axis=1)
    frac = float(dec.mean())
    stats_ = [
        Stat("control_ks_max", float(ctl.ks.max()), 1.36 / math.sqrt(cfg.walkers), cfg.walkers),
        Stat("fraction_decreasing", frac, math.sqrt(max(frac * (1 - frac), 1e-12) / len(env_seeds)), len(env_seeds)),
        *[Stat(f"mean_ks_n{n}", float(ks[:, c].mean()), float(ks[:, c].std(ddof=1) / math.sqrt(len(env_seeds))) if len(env_seeds) > 1 else 0.0, len(env_seeds)) for c, n in enumerate(cfg.n)],
    ]
    checks = [Check("control_ks_max", float(ctl.ks.max()), hi=cfg.thresholds["qfclt_control_ks"]), Check("fraction_decreasing", frac, lo=cfg.thresholds["trend_fraction"])]
    head = ["env_seed", "n", "sigma_v2", *[f"ks{j + 1}" for j in range(d)], *[f"corr{i + 1}{j + 1}" for i in range(d) for j in range(i + 1, d)]]
    rep = ExperimentReport("qfclt", {"n": list(cfg.n), "t": cfg.t, "walkers": cfg.walkers, "envs": cfg.envs}, stats_, checks, {"envs": env_seeds, "walk": walk_seed})
    rep.tables["ks"] = (head, rows)
    return rep


RUNNERS = {
    "env-sample": run_env_sample,
    "walk": run_walk,
    "clock": run_clock,
    "heat-kernel": run_heat_kernel,
    "green": run_green,
    "ceff": run_ceff,
    "llt": run_llt,
    "classical": run_classical,
    "ergodic": run_ergodic,
    "truncation": run_truncation,
    "homogenization": run_homogenization,
    "clusters": run_clusters,
    "qfclt": run_qfclt,
}


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _provenance(cfg):
    return f"# config_hash={cfg.hash} seed={cfg.seed}\n"


def write_csv(path, header, rows, cfg):
    with open(path, "w") as fh:
        fh.write(_provenance(cfg))
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(_fmt(v) for v in r) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return ex._num(obj)
    return obj


def write_report(report, cfg, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for stem, (header, rows) in report.tables.items():
        p = out / f"{report.name}_{stem}.csv"
        write_csv(p, header, rows, cfg)
        written.append(p.name)
    for suffix, writer in getattr(report, "files", {}).items():
        p = out / f"{report.name}_{suffix}"
        writer(p, _provenance(cfg))
        written.append(p.name)
    doc = {"config_hash": cfg.hash, "seed": cfg.seed, "config": cfg.as_dict(), **report.summary(), "files": sorted(written)}
    (out / f"{report.name}.json").write_text(json.dumps(_jsonable(doc), sort_keys=True, indent=2) + "\n")
    return out / f"{report.name}.json"


def run_experiment(cfg, name, out=None):
    """Run experiment ``name``; write its files when ``out`` is given."""
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; choose from {', '.join(EXPERIMENTS)}")
    if name == "report":
        if out is None:
            raise ConfigError("report needs an output directory")
        return collect_reports(out)
    start = time.perf_counter()
    report = RUNNERS[name](cfg)
    report.wall_time = time.perf_counter() - start
    if out is not None:
        write_report(report, cfg, out)
    return report


def collect_reports(out):
    """Reload the per-experiment summaries written to ``out``."""
    out = Path(out)
    reports = []
    for p in sorted(out.glob("*.json")):
        if p.name == "report.json":
            continue
        doc = json.loads(p.read_text())
        if "name" not in doc or "stats" not in doc:
            continue
        stats_ = [Stat(s["key"], float(s["value"]), float(s["stderr"]), int(s["n"])) for s in doc["stats"]]
        checks = [Check(c["key"], float(c["value"]), float(c["lo"]), float(c["hi"])) for c in doc.get("checks", [])]
        reports.append(ExperimentReport(doc["name"], doc.get("params", {}), stats_, checks, doc.get("seeds", {})))
    return reports


def emit_report(reports, stream=None, out=None, cfg=None):
    """Aggregate summary and exit code (0 all pass, 1 any failure)."""
    if not reports:
        raise ValueError("no reports to aggregate")
    stream = stream or sys.stdout
    for r in reports:
        if not r.stats:
            raise ValueError(f"report {r.name!r} has no statistics")
    ok = all(r.passed for r in reports)
    summary = {
        "pass": ok,
        "experiments": [{"name": r.name, "pass": r.passed, "failing": r.failing()} for r in reports],
    }
    if cfg is not None:
        summary["config_hash"] = cfg.hash
        summary["seed"] = cfg.seed
    width = max(len(r.name) for r in reports)
    for r in reports:
        stream.write(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}")
        if not r.passed:
            stream.write("  failing: " + ", ".join(r.failing()))
        stream.write("\n")
        for s in r.stats:
            stream.write(f"    {s.key} = {s.value:.6g} +/- {s.stderr:.2g} (n={s.n})\n")
    stream.write(f"overall: {'PASS' if ok else 'FAIL'}\n")
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / "report.json").write_text(json.dumps(_jsonable(summary), sort_keys=True, indent=2) + "\n")
    return summary, 0 if ok else 1


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------


def _set_threads(value):
    threads = value or os.environ.get("RCMLAB_THREADS")
    if threads is None:
        return
    threads = int(threads)
    if threads < 1:
        raise ConfigError("threads must be positive")
    numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides the config)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads (env RCMLAB_THREADS)")
    over = common.add_argument_group("config overrides")
    over.add_argument("--law", default=argparse.SUPPRESS, help="law fields, e.g. d=3,rho=0,a_p=1")
    over.add_argument("--n", default=argparse.SUPPRESS, help="comma-separated n ladder")
    over.add_argument("--t-max", dest="t_max", type=float, default=argparse.SUPPRESS, help="time horizon t")
    over.add_argument("--walkers", type=int, default=argparse.SUPPRESS)
    over.add_argument("--box", type=int, default=argparse.SUPPRESS, help="box half side")
    over.add_argument("--tol", type=float, default=argparse.SUPPRESS, help="solver and kernel tolerance")
    over.add_argument("--times", default=argparse.SUPPRESS, help="comma-separated LLT times")
    over.add_argument("--env-seed", dest="env_seed", type=int, default=argparse.SUPPRESS, help="fixed environment seed")
    parser = argparse.ArgumentParser(prog="rcmlab", description="Random conductance model laboratory", parents=[common])
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        sub.add_parser(name, parents=[common])
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    opts = vars(args)
    out = opts.get("out", "rcmlab-out")
    try:
        _set_threads(opts.get("threads"))
        cfg = None
        keys = ("law", "n", "t_max", "walkers", "box", "tol", "times", "env_seed", "seed")
        overrides = {k: opts[k] for k in keys if k in opts}
        if "config" in opts:
            cfg = load_config(opts["config"], overrides)
        elif args.experiment != "report":
            if "law" not in overrides or "n" not in overrides:
                raise ConfigError("--config is required unless --law and --n are given")
            cfg = RunConfig.from_dict(apply_overrides({}, overrides))
        if args.experiment == "report":
            reports = collect_reports(out)
            if not reports:
                raise ConfigError(f"no experiment summaries in {out}")
            _, code = emit_report(reports, out=out, cfg=cfg)
            return code
        report = run_experiment(cfg, args.experiment, out)
        _, code = emit_report([report])
        return code
    except (ConfigError, OSError, ValueError) as err:
        sys.stderr.write(f"rcmlab: error: {err}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
