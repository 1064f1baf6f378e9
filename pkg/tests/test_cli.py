import json
import os
import subprocess
import sys

import pytest

from rcmlab.cli import (
    EXPERIMENTS,
    ConfigError,
    RunConfig,
    collect_reports,
    emit_report,
    main,
    run_experiment,
)
from rcmlab.experiments import Check, ExperimentReport, Stat

SMALL = {"law": {"d": 2}, "n": [4], "walkers": 200, "envs": 2, "box_half_side": 4, "K": 1.0}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _run_cli(args, env_extra=None):
    env = dict(os.environ)
    env.pop("RCMLAB_THREADS", None)
    # allow more worker threads than cores so thread counts really differ
    env["NUMBA_NUM_THREADS"] = "4"
    env.update(env_extra or {})
    return subprocess.run([sys.executable, "-m", "rcmlab.cli", *args], capture_output=True, text=True, env=env)


def test_unknown_key_is_named():
    with pytest.raises(ConfigError, match="walkerz"):
        RunConfig.from_dict({**SMALL, "walkerz": 10})


def test_unknown_nested_keys_are_named():
    with pytest.raises(ConfigError, match="dd"):
        RunConfig.from_dict({**SMALL, "law": {"d": 2, "dd": 3}})
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({**SMALL, "thresholds": {"bogus": 1}})


@pytest.mark.parametrize("missing", ["law", "n"])
def test_missing_required(missing):
    raw = dict(SMALL)
    del raw[missing]
    with pytest.raises(ConfigError, match=missing):
        RunConfig.from_dict(raw)


@pytest.mark.parametrize(
    "patch",
    [{"walkers": 0}, {"walkers": 2.5}, {"K": -1}, {"delta": 2.0}, {"beta": 2.0}, {"n": [1]}, {"law": {"d": 1}}, {"seed": True}],
)
def test_invalid_values(patch):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({**SMALL, **patch})


def test_defaults_and_hash():
    a = RunConfig.from_dict(SMALL)
    b = RunConfig.from_dict(dict(reversed(list(SMALL.items()))))
    assert a.hash == b.hash
    assert a.with_seed(1).hash != a.hash
    assert a.thresholds["ks_level"] == 0.99
    assert RunConfig.from_dict(a.as_dict()) == a


def test_seed_streams_are_distinct():
    cfg = RunConfig.from_dict(SMALL)
    env = cfg.seeds("env", 5)
    walk = cfg.seeds("walk", 5)
    assert len(set(env) | set(walk)) == 10
    assert cfg.seeds("env", 5) == env


def test_cli_error_exit_codes(tmp_path, capsys):
    bad = _write(tmp_path, {**SMALL, "walkerz": 1})
    assert main(["walk", "--config", bad, "--out", str(tmp_path / "o")]) == 2
    assert "walkerz" in capsys.readouterr().err
    assert main(["walk", "--out", str(tmp_path / "o")]) == 2
    assert main(["walk", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["report", "--out", str(tmp_path / "empty")]) == 2


def test_emit_report_codes():
    good = ExperimentReport("a", {}, [Stat("s", 1.0, 0.1, 5)], [Check("c", 1.0, hi=2.0)])
    bad = ExperimentReport("b", {}, [Stat("s", 1.0, 0.1, 5)], [Check("c", 3.0, hi=2.0)])
    import io

    buf = io.StringIO()
    summary, code = emit_report([good], buf)
    assert code == 0 and summary["pass"]
    summary, code = emit_report([good, bad], buf)
    assert code == 1 and summary["experiments"][1]["failing"] == ["c"]
    assert "FAIL" in buf.getvalue()
    with pytest.raises(ValueError):
        emit_report([])


def test_unknown_experiment():
    with pytest.raises(ConfigError):
        run_experiment(RunConfig.from_dict(SMALL), "nope")


@pytest.mark.parametrize("name", ["env-sample", "walk", "classical", "green", "ceff", "ergodic"])
def test_outputs_carry_provenance(tmp_path, name):
    cfg = RunConfig.from_dict({**SMALL, "samples": 5000})
    rep = run_experiment(cfg, name, tmp_path)
    doc = json.loads((tmp_path / f"{name}.json").read_text())
    assert doc["config_hash"] == cfg.hash and doc["seed"] == cfg.seed
    assert doc["stats"] and doc["name"] == name
    for f in doc["files"]:
        if f.endswith(".csv"):
            first = (tmp_path / f).read_text().splitlines()[0]
            assert first == f"# config_hash={cfg.hash} seed={cfg.seed}"
    assert rep.stats


def test_report_aggregation(tmp_path):
    cfg = RunConfig.from_dict({**SMALL, "samples": 5000})
    for name in ("walk", "classical"):
        run_experiment(cfg, name, tmp_path)
    reps = collect_reports(tmp_path)
    assert sorted(r.name for r in reps) == ["classical", "walk"]
    code = main(["report", "--out", str(tmp_path)])
    assert code in (0, 1)
    summary = json.loads((tmp_path / "report.json").read_text())
    assert summary["pass"] == (code == 0)


def test_reruns_are_byte_identical_across_threads(tmp_path):
    cfg = _write(tmp_path, {**SMALL, "samples": 5000})
    outs = []
    for k, (flag, env) in enumerate([([], {"RCMLAB_THREADS": "1"}), (["--threads", "4"], {}), ([], {"RCMLAB_THREADS": "3"})]):
        out = tmp_path / f"o{k}"
        for name in ("walk", "env-sample"):
            r = _run_cli([name, "--config", cfg, "--out", str(out), *flag], env)
            assert r.returncode in (0, 1), r.stderr
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert outs[0] == outs[1] == outs[2]
    assert len(outs[0]) >= 4


def test_seed_flag_overrides_config(tmp_path):
    cfg = _write(tmp_path, SMALL)
    assert main(["walk", "--config", cfg, "--seed", "7", "--out", str(tmp_path)]) in (0, 1)
    assert json.loads((tmp_path / "walk.json").read_text())["seed"] == 7


def test_every_experiment_is_registered():
    from rcmlab.cli import RUNNERS

    assert set(EXPERIMENTS) == set(RUNNERS) | {"report"}


def test_flags_override_config_and_hash(tmp_path):
    cfg = _write(tmp_path, SMALL)
    out = tmp_path / "o"
    argv = ["walk", "--config", cfg, "--out", str(out), "--n", "4,6", "--walkers", "50", "--t-max", "0.5", "--law", "d=2,rho=0"]
    assert main(argv) in (0, 1)
    doc = json.loads((out / "walk.json").read_text())
    assert doc["config"]["n"] == [4, 6] and doc["config"]["walkers"] == 50 and doc["config"]["t"] == 0.5
    assert doc["config_hash"] != RunConfig.from_dict(SMALL).hash


def test_flags_alone_build_a_config(tmp_path):
    assert main(["env-sample", "--law", "d=3", "--n", "4", "--box", "3", "--out", str(tmp_path)]) in (0, 1)
    assert json.loads((tmp_path / "env-sample.json").read_text())["config"]["box_half_side"] == 3
    assert main(["env-sample", "--law", "d=3", "--out", str(tmp_path)]) == 2
    assert main(["env-sample", "--law", "d3", "--n", "4", "--out", str(tmp_path)]) == 2


def test_env_seed_pins_environments():
    a = RunConfig.from_dict({**SMALL, "env_seed": 42})
    b = RunConfig.from_dict({**SMALL, "env_seed": 42, "seed": 9})
    assert a.seeds("clock-env") == b.seeds("clock-env") == [42, 43]
    assert a.seeds("clock-walk", 1) != b.seeds("clock-walk", 1)
    with pytest.raises(ConfigError, match="env_seed"):
        RunConfig.from_dict({**SMALL, "env_seed": "x"})


def test_clock_series_long_format(tmp_path):
    cfg = RunConfig.from_dict({**SMALL, "n": [4, 6], "walkers": 20, "identity_walkers": 20})
    run_experiment(cfg, "clock", tmp_path)
    for n in (4, 6):
        lines = (tmp_path / f"clock_series_n{n}.csv").read_text().splitlines()
        assert lines[1] == "n,t,S_n_t,walker_id"
        assert len(lines) == 2 + 20 * 10 and lines[2].startswith(f"{n},")


def test_grid_files_roundtrip(tmp_path):
    import numpy as np

    from rcmlab.solver import load_grid

    cfg = RunConfig.from_dict({**SMALL, "walkers": 100})
    run_experiment(cfg, "heat-kernel", tmp_path)
    run_experiment(cfg, "green", tmp_path)
    kind, region, _, times, tol, vals = load_grid(tmp_path / "heat-kernel_kernel.bin")
    assert kind == "kernel" and region.half_side == 4 and len(times) == 2 and tol == cfg.tolerances["kernel"]
    assert np.allclose(vals.sum(axis=1), 1.0, atol=1e-8)
    kind, region, *_ , vals = load_grid(tmp_path / "green_green.bin")
    assert kind == "green" and vals.shape == (1, region.n_sites) and np.all(vals > 0)


def test_trajectory_dump(tmp_path):
    run_experiment(RunConfig.from_dict(SMALL), "walk", tmp_path)
    lines = (tmp_path / "walk_trajectory.csv").read_text().splitlines()
    assert lines[1] == "epoch,x1,x2" and lines[2] == "0.0,0,0"
