"""Acceptance suite: one test per criterion, each at its stated size and tolerance.

Configurations live in ``configs/``; their seeds were fixed before any
acceptance run and are disjoint from the pilot seeds used to calibrate
thresholds. Every test records a verdict that ``conftest.py`` prints as one
PASS/FAIL line per criterion at the end of the session.
"""

import os
import subprocess
import sys
from pathlib import Path

import pytest

from rcmlab.cli import EXPERIMENTS, load_config, run_experiment

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

pytestmark = pytest.mark.slow


def _run(name, config, out):
    return run_experiment(load_config(CONFIGS / config), name, out)


def judge(verdicts, k, report, keys, limit=None):
    checks = {c.key: c for c in report.checks}
    ok = True
    parts = []
    for key in keys:
        c = checks[key]
        ok &= c.passed
        parts.append(f"{key}={c.value:.4g}")
    if limit is not None:
        ok &= report.wall_time < limit
        parts.append(f"runtime={report.wall_time:.1f}s (limit {limit}s)")
    verdicts[k] = (bool(ok), ", ".join(parts))
    assert ok, verdicts[k][1]


def test_c01_tail_exactness(verdicts, tmp_path):
    rep = _run("env-sample", "c01_tail.json", tmp_path)
    judge(verdicts, 1, rep, ["ks_distance"], limit=5)


def test_c02_homogeneous_kernel(verdicts, tmp_path):
    rep = _run("heat-kernel", "c02_bessel.json", tmp_path)
    judge(verdicts, 2, rep, ["bessel_error", "mc_z"], limit=60)


def test_c03_green_watson(verdicts, tmp_path):
    rep = _run("green", "c03_watson.json", tmp_path)
    judge(verdicts, 3, rep, ["watson_rel_error"], limit=120)


def test_c04_duality(verdicts, tmp_path):
    rep = _run("ceff", "c04_duality.json", tmp_path)
    judge(verdicts, 4, rep, ["max_duality_error"], limit=120)


def test_c05_kernel_invariants(verdicts, tmp_path):
    rep = _run("heat-kernel", "c05_invariants.json", tmp_path)
    judge(verdicts, 5, rep, ["mass_residual", "symmetry_residual", "semigroup_defect"])


@pytest.fixture(scope="module")
def clock_report(tmp_path_factory):
    return _run("clock", "c06_c07_clock.json", tmp_path_factory.mktemp("clock"))


def test_c06_clock_identity(verdicts, clock_report):
    judge(verdicts, 6, clock_report, ["clock_identity_z"], limit=300)


@pytest.mark.xfail(strict=True, reason="single-walker trap visits dominate per-environment means at 2000 walkers; see README")
def test_c07_clock_trend(verdicts, clock_report):
    judge(verdicts, 7, clock_report, ["fraction_decreasing"])


def test_c08_local_limit(verdicts, tmp_path):
    rep = _run("llt", "c08_llt.json", tmp_path)
    judge(verdicts, 8, rep, ["ratio_max", "ratio_min", "control_ratio_max", "control_ratio_min"], limit=900)


@pytest.mark.xfail(strict=True, reason="sup-error trend is not monotone at n <= 1e6; see README")
def test_c09_classical_analogue(verdicts, tmp_path):
    rep = _run("classical", "c09_classical.json", tmp_path)
    judge(verdicts, 9, rep, ["fraction_decreasing", "mismatch_z"], limit=120)


def test_c10_ergodic_concentration(verdicts, tmp_path):
    rep = _run("ergodic", "c10_ergodic.json", tmp_path)
    judge(verdicts, 10, rep, ["fraction_within", "site_mean_closed_form"], limit=180)


def test_c11_truncation(verdicts, tmp_path):
    rep = _run("truncation", "c11_truncation.json", tmp_path)
    judge(verdicts, 11, rep, ["max_p_exit", "max_p_hit_big"], limit=600)


def test_c12_clusters_and_gamma(verdicts, tmp_path):
    rep = _run("clusters", "c12_clusters.json", tmp_path)
    judge(verdicts, 12, rep, ["tail_r2", "moment_ratio", "cut_bound_violations"], limit=300)


def test_c13_determinism(verdicts, tmp_path):
    cfg = str(CONFIGS / "c13_determinism.json")
    env = dict(os.environ)
    env.pop("RCMLAB_THREADS", None)
    env["NUMBA_NUM_THREADS"] = "4"
    names = [e for e in EXPERIMENTS if e != "report"]
    outputs = []
    for threads in ("1", "4"):
        out = tmp_path / f"threads{threads}"
        for name in names:
            r = subprocess.run(
                [sys.executable, "-m", "rcmlab.cli", name, "--config", cfg, "--out", str(out), "--threads", threads],
                capture_output=True,
                text=True,
                env=env,
            )
            assert r.returncode in (0, 1), r.stderr
        outputs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    same = outputs[0] == outputs[1]
    verdicts[13] = (same, f"{len(outputs[0])} files from {len(names)} experiments identical at 1 and 4 threads: {same}")
    assert same
