"""Command line pipeline: config handling, stage skipping, artifacts."""

import json
from pathlib import Path

import numpy as np
import pytest
import yaml

import diffik.cli as cli
from diffik import datagen
from diffik import denoiser as dn
from diffik import kinematics as kin


def _untrained_checkpoint(model, path, mode="tokens"):
    lo, hi = model.joint_limits
    stats = datagen.NormStats(lo, hi, np.zeros(3), 1.0)
    arch = dn.ArchConfig(n_blocks=1, n_heads=1, d_model=16, d_ff=32, mode=mode)
    dn.save_params(dn.init_params(arch, model.dof, model.n_ee, stats, 0), path)


def _run(argv):
    return cli.main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# describe

def test_describe_human_output(robots_dir, capsys):
    rc = _run(["describe", robots_dir / "planar2.yaml"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "dof=2" in out and "end_effectors=1" in out
    assert "j1: revolute" in out and "limits" in out


def test_describe_json_output(robots_dir, capsys):
    rc = _run(["describe", robots_dir / "dual_waist.yaml", "--json"])
    assert rc == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["n_ee"] == 2
    assert doc["dof"] == len([j for j in doc["joints"] if j["kind"] != "fixed"])
    # the shared waist joint appears exactly once
    assert sum(j["name"] == "waist" for j in doc["joints"]) == 1


def test_describe_missing_file_fails(tmp_path, capsys):
    rc = _run(["describe", tmp_path / "nope.yaml"])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# configuration

def test_config_defaults():
    cfg = cli.load_config(None, [])
    assert cfg.scenario == "task1_generation"
    assert cfg.train.epochs == 30
    assert cfg.sample.stochastic is True


def test_config_file_then_flag_precedence(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump({
        "robot": "r.yaml", "seed": 5,
        "train": {"epochs": 7, "learning_rate": 0.002},
        "sample": {"n_samples": 4},
    }))
    cfg = cli.load_config(p, [("train", "epochs", "3"), (None, "seed", "9")])
    assert cfg.train.epochs == 3            # flag beats file
    assert cfg.train.learning_rate == 0.002  # file beats default
    assert cfg.sample.n_samples == 4
    assert cfg.seed == 9


def test_top_seed_flows_into_sections(tmp_path):
    cfg = cli.load_config(None, [(None, "seed", "42")])
    assert cfg.train.seed == 42 and cfg.sample.seed == 42
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump({"seed": 42, "train": {"seed": 7}}))
    cfg = cli.load_config(p, [])
    assert cfg.train.seed == 7              # explicit section seed wins
    assert cfg.sample.seed == 42


def test_unknown_keys_rejected(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump({"robbot": "x.yaml"}))
    with pytest.raises(cli.CliError, match="unknown config key"):
        cli.load_config(p, [])
    with pytest.raises(cli.CliError, match="unknown key 'epoches'"):
        cli.load_config(None, [("train", "epoches", "3")])
    with pytest.raises(cli.CliError, match="unknown config section"):
        cli.load_config(None, [("trian", "epochs", "3")])


def test_flag_coercion():
    cfg = cli.load_config(None, [
        ("sample", "steps_used", "10"),
        ("sample", "stochastic", "false"),
        (None, "free_slots", "0,2"),
    ])
    assert cfg.sample.steps_used == 10
    assert cfg.sample.stochastic is False
    assert cfg.free_slots == [0, 2]
    cfg = cli.load_config(None, [("sample", "steps_used", "none")])
    assert cfg.sample.steps_used is None
    with pytest.raises(cli.CliError, match="integer"):
        cli.load_config(None, [("train", "epochs", "many")])


def test_workers_env_default(monkeypatch):
    monkeypatch.setenv("DIFFIK_WORKERS", "3")
    assert cli.load_config(None, []).workers == 3
    monkeypatch.setenv("DIFFIK_WORKERS", "junk")
    assert cli.load_config(None, []).workers == 1


def test_bad_override_syntax():
    with pytest.raises(cli.CliError, match="unrecognized argument"):
        cli._split_overrides(["--train.epochs", "3"])


# ---------------------------------------------------------------------------
# pipeline runs (deliberately tiny budgets)

_TINY = {
    "count": 2000, "n_goals": 2,
    "eval_n_goals": 3, "eval_n_samples": 2,
    "arch": {"n_blocks": 1, "n_heads": 1, "d_model": 16, "d_ff": 32},
    "train": {"epochs": 2, "batch_size": 256},
    "sample": {"n_samples": 2, "steps_used": 5},
}


def _write_cfg(tmp_path, robots_dir, **extra):
    doc = dict(_TINY, robot=str(robots_dir / "planar2.yaml"), **extra)
    p = tmp_path / "run.yaml"
    p.write_text(yaml.safe_dump(doc))
    return p


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory, robots_dir):
    """One full tiny pipeline run, shared by the artifact checks."""
    out = tmp_path_factory.mktemp("clirun")
    cfgp = _write_cfg(out, robots_dir)
    rc = _run(["all", "--config", cfgp, "--out", out / "a"])
    assert rc == 0
    return out, cfgp


def test_all_stages_produce_artifacts(pipeline_run):
    out, _ = pipeline_run
    run = out / "a"
    for name in ["config.json", "dataset.ikdf", "model.ikdn", "train_log.csv",
                 "samples.csv", "samples.json", "refined.csv", "refined.json",
                 "eval/task1_generation.csv", "eval/task1_generation.json"]:
        assert (run / name).exists(), name
    for stage in ["datagen", "train", "sample", "refine", "eval"]:
        assert (run / f"{stage}.stamp.json").exists()


def test_effective_config_echoed(pipeline_run):
    out, _ = pipeline_run
    run = out / "a"
    eff = json.loads((run / "config.json").read_text())
    assert eff["dataset_path"] == str(run / "dataset.ikdf")
    assert eff["train"]["epochs"] == 2
    meta = json.loads((run / "samples.json").read_text())
    assert meta["effective"]["sample"]["steps_used"] == 5
    stamp = json.loads((run / "train.stamp.json").read_text())
    assert stamp["config"]["train"]["epochs"] == 2


def test_rerun_skips_all_stages(pipeline_run, capsys):
    out, cfgp = pipeline_run
    rc = _run(["all", "--config", cfgp, "--out", out / "a"])
    lines = capsys.readouterr().out
    assert rc == 0
    for stage in ["datagen", "train", "sample", "refine", "eval"]:
        assert f"{stage}: skipped (up-to-date)" in lines


def test_config_change_triggers_rebuild(pipeline_run, capsys):
    out, cfgp = pipeline_run
    rc = _run(["sample", "--config", cfgp, "--out", out / "a",
               "--sample.steps_used=4"])
    lines = capsys.readouterr().out
    assert rc == 0
    assert "skipped" not in lines and "sample: 2x2" in lines
    # and back again: the stamp now reflects steps_used=4
    rc = _run(["sample", "--config", cfgp, "--out", out / "a"])
    assert rc == 0
    assert "skipped" not in capsys.readouterr().out


def test_missing_stamp_rebuilds_partial_artifact(pipeline_run, capsys, caplog):
    out, cfgp = pipeline_run
    (out / "a" / "sample.stamp.json").unlink()
    rc = _run(["sample", "--config", cfgp, "--out", out / "a"])
    assert rc == 0
    assert "skipped" not in capsys.readouterr().out
    assert any("partial artifact" in r.message for r in caplog.records)


def test_same_seed_reproduces_artifacts(pipeline_run, robots_dir):
    out, cfgp = pipeline_run
    rc = _run(["all", "--config", cfgp, "--out", out / "b"])
    assert rc == 0
    for name in ["dataset.ikdf", "model.ikdn", "samples.csv", "refined.csv",
                 "eval/task1_generation.csv"]:
        a = (out / "a" / name).read_bytes()
        b = (out / "b" / name).read_bytes()
        assert a == b, f"{name} differs between identical runs"


def test_samples_csv_round_trips_exactly(pipeline_run):
    out, _ = pipeline_run
    rows = np.loadtxt(out / "a" / "samples.csv", delimiter=",", skiprows=1,
                      ndmin=2)
    assert rows.shape[1] == 2 + 2   # goal, sample, q0, q1
    assert np.isfinite(rows).all()
    # repr round trip: parsing then re-printing loses nothing
    q = float(rows[0, 2])
    assert float(repr(q)) == q


def test_refined_csv_reports_success(pipeline_run):
    out, _ = pipeline_run
    rows = np.loadtxt(out / "a" / "refined.csv", delimiter=",", skiprows=1,
                      ndmin=2)
    assert rows.shape[0] == 4       # 2 goals x 2 samples
    success = rows[:, 2]
    assert set(success) <= {0.0, 1.0}
    summary = json.loads((out / "a" / "refined.json").read_text())
    assert summary["success_rate"] == pytest.approx(success.mean())


# ---------------------------------------------------------------------------
# failure paths

def test_stage_failure_names_stage(tmp_path, robots_dir, capsys):
    rc = _run(["train", "--robot", robots_dir / "planar2.yaml",
               "--out", tmp_path / "r"])
    err = capsys.readouterr().err
    assert rc == 1
    assert "stage train failed" in err and "dataset not found" in err


def test_missing_robot_fails_cleanly(tmp_path, capsys):
    rc = _run(["datagen", "--robot", tmp_path / "ghost.yaml",
               "--out", tmp_path / "r"])
    assert rc == 1
    assert "robot description not found" in capsys.readouterr().err


def test_free_slot_out_of_range(tmp_path, robots_dir, capsys):
    out = tmp_path / "r"
    cfgp = _write_cfg(tmp_path, robots_dir)
    assert _run(["datagen", "--config", cfgp, "--out", out]) == 0
    assert _run(["train", "--config", cfgp, "--out", out]) == 0
    rc = _run(["sample", "--config", cfgp, "--out", out, "--free_slots=3"])
    assert rc == 1
    assert "out of range" in capsys.readouterr().err


def test_all_slots_free_is_an_error(tmp_path, robots_dir, capsys):
    """Freeing the only goal slot leaves nothing to condition on."""
    model = kin.parse_robot_file(robots_dir / "planar2.yaml")
    out = tmp_path / "r"
    out.mkdir()
    _untrained_checkpoint(model, out / "model.ikdn")
    rc = _run(["sample", "--robot", robots_dir / "planar2.yaml", "--out", out,
               "--free_slots=0", "--sample.n_samples=2", "--sample.steps_used=5"])
    assert rc == 1
    assert "every slot is free" in capsys.readouterr().err


def test_flat_checkpoint_rejects_masked_goals(tmp_path, robots_dir, capsys):
    model = kin.parse_robot_file(robots_dir / "dual_waist.yaml")
    out = tmp_path / "r"
    out.mkdir()
    _untrained_checkpoint(model, out / "model.ikdn", mode="flat")
    rc = _run(["sample", "--robot", robots_dir / "dual_waist.yaml", "--out", out,
               "--free_slots=1", "--sample.n_samples=2", "--sample.steps_used=5"])
    err = capsys.readouterr().err
    assert rc == 1
    assert "flat" in err


def test_objective_config_validation(tmp_path, robots_dir):
    cfg = cli.load_config(None, [])
    cfg.objectives = [{"weight": 2.0}]
    with pytest.raises(cli.CliError, match="kind"):
        cli._objectives(cfg)
    cfg.objectives = [{"kind": "warm_start"}]
    with pytest.raises(cli.CliError, match="q_prior"):
        cli._objectives(cfg)
    cfg.objectives = [{"kind": "custom"}]
    with pytest.raises(cli.CliError, match="code-level"):
        cli._objectives(cfg)
    cfg.objectives = [{"kind": "warm_start", "q_prior": [0.1, 0.2], "weight": 3.0},
                      {"kind": "manipulability"}]
    objs = cli._objectives(cfg)
    assert [o.kind for o in objs] == ["warm_start", "manipulability"]
    assert objs[0].weight == 3.0
