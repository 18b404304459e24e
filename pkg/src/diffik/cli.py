"""Command line front end wiring the pipeline stages together.

Subcommands: describe, datagen, train, sample, refine, eval, all.  A run
is configured by a YAML document whose sections mirror the library
config dataclasses, overridable from the command line with
``--section.key=value`` flags (flags win).  Every artifact lands under
the run directory (``--out``), each stage records a stamp holding the
effective config section plus content hashes of its inputs and outputs,
and a re-run whose hashes still match is skipped as up to date.

Randomness flows from the single top-level seed, so repeating an
invocation reproduces every artifact byte for byte.
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import re
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import kinematics as kin
from . import datagen
from . import denoiser as dn
from . import diffusion
from . import guidance
from . import refiner
from . import evalbench

log = logging.getLogger("diffik")

_WORKERS_ENV = "DIFFIK_WORKERS"


class CliError(Exception):
    """Configuration or stage failure carrying an exit message."""


# ---------------------------------------------------------------------------
# run configuration

def _default_workers():
    try:
        return max(1, int(os.environ.get(_WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclasses.dataclass
class RunConfig:
    """Everything one pipeline run needs, resolved from file + flags."""

    robot: str = ""
    out: str = "run"
    dataset_path: str = ""        # defaults to <out>/dataset.ikdf
    checkpoint_path: str = ""     # defaults to <out>/model.ikdn
    scenario: str = "task1_generation"
    seed: int = 0
    workers: int = dataclasses.field(default_factory=_default_workers)
    determinism: bool = True
    count: int = 200_000          # dataset records
    arch: dn.ArchConfig = dataclasses.field(default_factory=dn.ArchConfig)
    train: diffusion.TrainConfig = dataclasses.field(
        default_factory=diffusion.TrainConfig)
    sample: diffusion.SampleConfig = dataclasses.field(
        default_factory=diffusion.SampleConfig)
    refine: refiner.RefineConfig = dataclasses.field(
        default_factory=refiner.RefineConfig)
    objectives: list = dataclasses.field(default_factory=list)
    n_goals: int = 8              # goal count for the sample/refine stages
    free_slots: list = dataclasses.field(default_factory=list)
    eval_n_goals: int | None = None
    eval_n_samples: int | None = None

    def resolved_dataset(self):
        return Path(self.dataset_path or Path(self.out) / "dataset.ikdf")

    def resolved_checkpoint(self):
        return Path(self.checkpoint_path or Path(self.out) / "model.ikdn")


_SECTION_TYPES = {
    "arch": dn.ArchConfig,
    "train": diffusion.TrainConfig,
    "sample": diffusion.SampleConfig,
    "refine": refiner.RefineConfig,
}
_TOP_KEYS = {f.name for f in dataclasses.fields(RunConfig)} - set(_SECTION_TYPES) \
    - {"objectives"}


def _coerce(raw, target):
    """Parse a flag string into the type the current field value has."""
    if not isinstance(raw, str):
        return raw
    low = raw.lower()
    if low in ("null", "none"):
        return None
    if isinstance(target, bool) or low in ("true", "false"):
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise CliError(f"expected a boolean, got '{raw}'")
    if isinstance(target, int) and not isinstance(target, bool):
        try:
            return int(raw)
        except ValueError as e:
            raise CliError(f"expected an integer, got '{raw}'") from e
    if isinstance(target, float):
        try:
            return float(raw)
        except ValueError as e:
            raise CliError(f"expected a number, got '{raw}'") from e
    if isinstance(target, list):
        return [int(x) if x.strip().lstrip("-").isdigit() else x.strip()
                for x in raw.split(",") if x.strip()]
    if target is None:
        # untyped hole (e.g. steps_used=None): try the obvious scalars
        for conv in (int, float):
            try:
                return conv(raw)
            except ValueError:
                pass
    return raw


def _apply_section(obj, updates, section):
    known = {f.name for f in dataclasses.fields(obj)}
    vals = dataclasses.asdict(obj)
    for key, raw in updates.items():
        if key not in known:
            raise CliError(f"unknown key '{key}' in section '{section}'")
        vals[key] = _coerce(raw, vals[key])
    try:
        return type(obj)(**vals)
    except Exception as e:
        raise CliError(f"bad value in section '{section}': {e}") from e


def load_config(path=None, overrides=()):
    """Build the effective RunConfig from defaults, file, then flags."""
    doc = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise CliError(f"config file not found: {p}")
        doc = yaml.safe_load(p.read_text()) or {}
        if not isinstance(doc, dict):
            raise CliError("config file must hold a mapping at top level")
    cfg = RunConfig()
    sections = {name: dict(doc.get(name) or {}) for name in _SECTION_TYPES}
    for key, val in doc.items():
        if key in _SECTION_TYPES:
            continue
        elif key == "objectives":
            cfg.objectives = list(val or [])
        elif key in _TOP_KEYS:
            setattr(cfg, key, _coerce(val, getattr(cfg, key)))
        else:
            raise CliError(f"unknown config key '{key}'")
    for sec, key, raw in overrides:
        if sec is None:
            if key in _TOP_KEYS:
                setattr(cfg, key, _coerce(raw, getattr(cfg, key)))
            else:
                raise CliError(f"unknown option '--{key}'")
        elif sec in _SECTION_TYPES:
            sections[sec][key] = raw
        else:
            raise CliError(f"unknown config section '{sec}'")
    for name, updates in sections.items():
        base = _apply_section(getattr(cfg, name), updates, name)
        setattr(cfg, name, base)
    # the pipeline seed feeds every stage unless a section pins its own
    if "seed" not in sections["train"]:
        cfg.train = dataclasses.replace(cfg.train, seed=cfg.seed)
    if "seed" not in sections["sample"]:
        cfg.sample = dataclasses.replace(cfg.sample, seed=cfg.seed)
    return cfg


def effective_dict(cfg: RunConfig):
    d = dataclasses.asdict(cfg)
    d["dataset_path"] = str(cfg.resolved_dataset())
    d["checkpoint_path"] = str(cfg.resolved_checkpoint())
    return d


def _objectives(cfg: RunConfig):
    objs = []
    for item in cfg.objectives:
        if not isinstance(item, dict) or "kind" not in item:
            raise CliError("each objective needs a mapping with a 'kind'")
        kind = item["kind"]
        # omit weight to take the objective's own default
        extra = {"weight": float(item["weight"])} if "weight" in item else {}
        if kind == "warm_start":
            prior = item.get("q_prior")
            if prior is None:
                raise CliError("warm_start objective needs q_prior in the config")
            objs.append(guidance.warm_start(np.asarray(prior, dtype=float), **extra))
        elif kind == "manipulability":
            objs.append(guidance.manipulability(**extra))
        else:
            raise CliError(f"unsupported objective kind '{kind}' "
                           "(custom objectives are code-level only)")
    return tuple(objs)


# ---------------------------------------------------------------------------
# stage plumbing

def _sha_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _sha_text(*parts):
    h = hashlib.sha256()
    for p in parts:
        h.update(str(p).encode())
        h.update(b"\x00")
    return h.hexdigest()


def _stamp_path(cfg, stage):
    return Path(cfg.out) / f"{stage}.stamp.json"


def _outputs_digest(paths):
    return {str(p): _sha_file(p) for p in paths}


def _stage_fresh(cfg, stage, inputs_hash, outputs):
    """True when the recorded stamp matches inputs and outputs on disk."""
    stamp = _stamp_path(cfg, stage)
    exist = [p for p in outputs if Path(p).exists()]
    if not stamp.exists():
        if exist:
            log.warning("%s: output exists without a stamp "
                        "(partial artifact from an interrupted run); rebuilding", stage)
        return False
    if len(exist) != len(outputs):
        return False
    try:
        rec = json.loads(stamp.read_text())
    except json.JSONDecodeError:
        log.warning("%s: unreadable stamp; rebuilding", stage)
        return False
    return (rec.get("inputs_hash") == inputs_hash
            and rec.get("outputs") == _outputs_digest(outputs))


def _write_stamp(cfg, stage, inputs_hash, outputs, section_echo):
    rec = {"stage": stage, "inputs_hash": inputs_hash,
           "outputs": _outputs_digest(outputs),
           "config": section_echo, "effective": effective_dict(cfg)}
    _stamp_path(cfg, stage).write_text(json.dumps(rec, indent=2, sort_keys=True) + "\n")


def _require(path, what):
    if not Path(path).exists():
        raise CliError(f"{what} not found: {path}")


def _load_robot(cfg):
    _require(cfg.robot, "robot description")
    return kin.parse_robot_file(cfg.robot)


# ---------------------------------------------------------------------------
# stages

def stage_datagen(cfg: RunConfig):
    model = _load_robot(cfg)
    out = cfg.resolved_dataset()
    # workers stay out of the hash: shard seeding makes bytes identical
    ih = _sha_text("datagen", model.text_hash.hex(), cfg.count, cfg.seed)
    if _stage_fresh(cfg, "datagen", ih, [out]):
        print("datagen: skipped (up-to-date)")
        return
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = datagen.generate(model, cfg.count, cfg.seed, workers=cfg.workers)
    datagen.save(ds, out)
    _write_stamp(cfg, "datagen", ih, [out], {"count": cfg.count, "seed": cfg.seed})
    print(f"datagen: wrote {ds.count} records to {out}")


def stage_train(cfg: RunConfig):
    model = _load_robot(cfg)
    ds_path = cfg.resolved_dataset()
    _require(ds_path, "dataset")
    out = cfg.resolved_checkpoint()
    log_csv = Path(cfg.out) / "train_log.csv"
    ih = _sha_text("train", _sha_file(ds_path), model.text_hash.hex(),
                   dataclasses.asdict(cfg.arch), dataclasses.asdict(cfg.train))
    if _stage_fresh(cfg, "train", ih, [out, log_csv]):
        print("train: skipped (up-to-date)")
        return
    ds = datagen.load(ds_path)
    datagen.ensure_matches(ds, model)
    out.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.monotonic()
    params = diffusion.train(ds, cfg.arch, cfg.train, diffusion.make_schedule(),
                             log_path=log_csv)
    dn.save_params(params, out)
    _write_stamp(cfg, "train", ih, [out, log_csv],
                 {"arch": dataclasses.asdict(cfg.arch),
                  "train": dataclasses.asdict(cfg.train)})
    print(f"train: {cfg.train.epochs} epochs in {time.monotonic() - t0:.0f}s -> {out}")


def _load_checkpoint(cfg, model):
    ck = cfg.resolved_checkpoint()
    _require(ck, "checkpoint")
    params = dn.load_params(ck)
    dn.ensure_model_match(params, model)
    return params, ck


def _sample_goals(cfg, model):
    """Unseen goal sets for the sample stage, minus any freed slots."""
    Q = evalbench.unseen_configs(model, cfg.seed, cfg.n_goals)
    free = set(int(i) for i in cfg.free_slots)
    bad = [i for i in free if not 0 <= i < model.n_ee]
    if bad:
        raise CliError(f"free_slots {bad} out of range for {model.n_ee} end effectors")
    sets = []
    for q in Q:
        poses = kin.forward_kinematics(model, q)
        sets.append(dn.GoalSet([None if i in free else p
                                for i, p in enumerate(poses)]))
    return Q, sets


def stage_sample(cfg: RunConfig):
    model = _load_robot(cfg)
    params, ck = _load_checkpoint(cfg, model)
    out_csv = Path(cfg.out) / "samples.csv"
    out_json = Path(cfg.out) / "samples.json"
    ih = _sha_text("sample", _sha_file(ck), model.text_hash.hex(),
                   dataclasses.asdict(cfg.sample), cfg.objectives,
                   cfg.n_goals, sorted(cfg.free_slots), cfg.seed)
    if _stage_fresh(cfg, "sample", ih, [out_csv, out_json]):
        print("sample: skipped (up-to-date)")
        return
    _, goal_sets = _sample_goals(cfg, model)
    objs = _objectives(cfg)
    sols = diffusion.sample_goals_batch(params, goal_sets, diffusion.make_schedule(),
                                        cfg.sample, objectives=objs, model=model)
    with open(out_csv, "w") as fh:
        cols = ["goal", "sample"] + [f"q{i}" for i in range(model.dof)]
        fh.write(",".join(cols) + "\n")
        for g in range(sols.shape[0]):
            for s in range(sols.shape[1]):
                row = [str(g), str(s)] + [repr(float(v)) for v in sols[g, s]]
                fh.write(",".join(row) + "\n")
    meta = {
        "seed": cfg.sample.seed, "steps_used": cfg.sample.steps_used,
        "stochastic": cfg.sample.stochastic,
        "objective_weights": [{"kind": o.kind, "weight": o.weight} for o in objs],
        "goals": [[None if s is None else s.as_array().tolist() for s in gs.slots]
                  for gs in goal_sets],
        "effective": effective_dict(cfg),
    }
    out_json.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _write_stamp(cfg, "sample", ih, [out_csv, out_json],
                 {"sample": dataclasses.asdict(cfg.sample)})
    print(f"sample: {sols.shape[0]}x{sols.shape[1]} configurations -> {out_csv}")


def _read_samples(path, dof):
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if rows.shape[1] != dof + 2:
        raise CliError(f"samples file has {rows.shape[1] - 2} joint columns, "
                       f"robot needs {dof}")
    return rows[:, 0].astype(int), rows[:, 2:]


def stage_refine(cfg: RunConfig):
    model = _load_robot(cfg)
    in_csv = Path(cfg.out) / "samples.csv"
    in_json = Path(cfg.out) / "samples.json"
    _require(in_csv, "samples stage output")
    _require(in_json, "samples stage metadata")
    out_csv = Path(cfg.out) / "refined.csv"
    out_json = Path(cfg.out) / "refined.json"
    ih = _sha_text("refine", _sha_file(in_csv), _sha_file(in_json),
                   model.text_hash.hex(), dataclasses.asdict(cfg.refine))
    if _stage_fresh(cfg, "refine", ih, [out_csv, out_json]):
        print("refine: skipped (up-to-date)")
        return
    goal_idx, seeds = _read_samples(in_csv, model.dof)
    meta = json.loads(in_json.read_text())
    goal_sets = [dn.GoalSet([None if s is None else
                             kin.Pose(np.array(s[:3]), np.array(s[3:]))
                             for s in slots])
                 for slots in meta["goals"]]
    rows_out = []
    n_ok = 0
    for g, gs in enumerate(goal_sets):
        block = seeds[goal_idx == g]
        if block.size == 0:
            continue
        results = refiner.refine_batch(model, gs, block, cfg.refine)
        for s, res in enumerate(results):
            n_ok += res.success
            rows_out.append([g, s, int(res.success), res.iters_used,
                            float(np.nanmax(res.pos_errors)),
                            float(np.nanmax(res.ang_errors)), res.cost]
                           + [float(v) for v in res.q])
    with open(out_csv, "w") as fh:
        cols = (["goal", "sample", "success", "iters", "pos_err_max_m",
                 "ang_err_max_rad", "cost"] + [f"q{i}" for i in range(model.dof)])
        fh.write(",".join(cols) + "\n")
        for row in rows_out:
            fh.write(",".join(repr(v) if isinstance(v, float) else str(v)
                              for v in row) + "\n")
    summary = {"n_refined": len(rows_out),
               "success_rate": n_ok / max(len(rows_out), 1),
               "effective": effective_dict(cfg)}
    out_json.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _write_stamp(cfg, "refine", ih, [out_csv, out_json],
                 {"refine": dataclasses.asdict(cfg.refine)})
    print(f"refine: {len(rows_out)} seeds, success rate "
          f"{summary['success_rate']:.2f} -> {out_csv}")


def stage_eval(cfg: RunConfig):
    model = _load_robot(cfg)
    params, ck = _load_checkpoint(cfg, model)
    out_dir = Path(cfg.out) / "eval"
    scenario = cfg.scenario
    outputs = [out_dir / f"{scenario}.csv", out_dir / f"{scenario}.json"]
    ih = _sha_text("eval", _sha_file(ck), model.text_hash.hex(), scenario,
                   cfg.eval_n_goals, cfg.eval_n_samples, cfg.seed,
                   dataclasses.asdict(cfg.sample), dataclasses.asdict(cfg.refine))
    if _stage_fresh(cfg, "eval", ih, [p for p in outputs]):
        print("eval: skipped (up-to-date)")
        return
    bench = evalbench.BenchConfig(
        scenario, seed=cfg.seed, n_goals=cfg.eval_n_goals,
        n_samples=cfg.eval_n_samples, steps_used=cfg.sample.steps_used,
        stochastic=cfg.sample.stochastic, out_dir=str(out_dir),
        workers=cfg.workers)
    entry = evalbench.BenchEntry(model, params, source=str(ck))
    report = evalbench.run_benchmark(bench, entry, refine_cfg=cfg.refine)
    _write_stamp(cfg, "eval", ih, [p for p in outputs if p.exists()],
                 {"scenario": scenario})
    print(f"eval: {scenario}, {len(report['rows'])} rows -> {out_dir}")


_STAGES = {"datagen": stage_datagen, "train": stage_train, "sample": stage_sample,
           "refine": stage_refine, "eval": stage_eval}
_PIPELINE = ("datagen", "train", "sample", "refine", "eval")


# ---------------------------------------------------------------------------
# describe

def cmd_describe(path, as_json=False, stream=None):
    stream = stream or sys.stdout
    model = kin.parse_robot_file(path)
    lo, hi = model.joint_limits
    if as_json:
        doc = {
            "name": model.name, "dof": model.dof, "n_ee": model.n_ee,
            "links": [l.name for l in model.links],
            "end_effectors": list(model.end_effectors),
            "joints": [{"name": j.name, "kind": j.kind, "parent": j.parent,
                        "child": j.child,
                        "limits": list(j.limits) if j.limits else None}
                       for j in model.joints],
        }
        print(json.dumps(doc, indent=2, sort_keys=True), file=stream)
        return
    print(f"{model.name}: dof={model.dof}, end_effectors={model.n_ee}, "
          f"links={len(model.links)}", file=stream)
    k = 0
    for j in model.joints:
        if j.kind == "fixed":
            print(f"  {j.name}: fixed {j.parent} -> {j.child}", file=stream)
        else:
            print(f"  {j.name}: {j.kind} {j.parent} -> {j.child} "
                  f"limits [{lo[k]:.4g}, {hi[k]:.4g}]", file=stream)
            k += 1
    print(f"  end effectors: {', '.join(model.end_effectors)}", file=stream)


# ---------------------------------------------------------------------------
# argument handling

_OVERRIDE_RE = re.compile(r"^--([A-Za-z_][\w.]*)=(.*)$")


def _split_overrides(extras):
    out = []
    for raw in extras:
        m = _OVERRIDE_RE.match(raw)
        if not m:
            raise CliError(f"unrecognized argument '{raw}' "
                           "(overrides look like --section.key=value)")
        dotted, value = m.groups()
        if "." in dotted:
            sec, key = dotted.split(".", 1)
            out.append((sec, key, value))
        else:
            out.append((None, dotted, value))
    return out


def build_parser():
    p = argparse.ArgumentParser(
        prog="diffik",
        description="Generative inverse kinematics pipeline: data generation, "
                    "diffusion training, sampling, refinement, evaluation.")
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("describe", help="summarize a robot description file")
    d.add_argument("robot")
    d.add_argument("--json", action="store_true")

    for name in _PIPELINE + ("all",):
        s = sub.add_parser(name, help=f"run the {name} stage" if name != "all"
                           else "run every stage in order")
        s.add_argument("--config", help="YAML run configuration")
        s.add_argument("--out", help="run directory for artifacts")
        s.add_argument("--robot", help="robot description path")
        s.add_argument("--seed", type=int)
        s.add_argument("--workers", type=int)
        s.add_argument("--scenario", help="evaluation scenario name")
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args, extras = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "describe":
            cmd_describe(args.robot, as_json=args.json)
            return 0
        overrides = _split_overrides(extras)
        for key in ("out", "robot", "seed", "workers", "scenario"):
            val = getattr(args, key, None)
            if val is not None:
                overrides.append((None, key, val))
        cfg = load_config(args.config, overrides)
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        (Path(cfg.out) / "config.json").write_text(
            json.dumps(effective_dict(cfg), indent=2, sort_keys=True) + "\n")
        stages = _PIPELINE if args.command == "all" else (args.command,)
        for stage in stages:
            try:
                _STAGES[stage](cfg)
            except Exception as e:
                raise CliError(f"stage {stage} failed: {e}") from e
        return 0
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (kin.RobotError, datagen.DatagenError, dn.DenoiserError,
            diffusion.DiffusionError, guidance.GuidanceError,
            refiner.RefinerError, evalbench.EvalError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
