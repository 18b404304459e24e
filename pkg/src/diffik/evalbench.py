"""Benchmark scenarios and metrics for trained samplers.

Every scenario draws previously unseen goals (fresh collision-free
configurations pushed through forward kinematics, on an RNG stream
disjoint from dataset generation), runs the sampler and/or refiner, and
writes one CSV of per-row records plus a JSON summary that echoes the
effective configuration and a content hash of the inputs.  Reports are
deterministic for a fixed (checkpoint, seed, scenario); wall-clock
timings are logged and returned in memory but never written into the
report files.

Scenarios
---------
task1_generation      error / collision / diversity stats of raw samples
task2_seeding         generated vs random seeds through the refiner
task4_warm            warm-start guidance against an unguided control
task4_manip           manipulability guidance against an unguided control
task5_marginal        partial goal sets with uniformly drawn mask counts
task6_scaling         one generation row per (robot, checkpoint) entry
appendix_unreachable  goals pushed past the workspace in fixed steps
"""

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np
from scipy.spatial.distance import pdist

from . import kinematics as kin
from . import denoiser as dn
from . import diffusion
from . import guidance
from . import refiner

log = logging.getLogger(__name__)


class EvalError(ValueError):
    pass


# stream tags keep benchmark draws clear of dataset shards (seed, k) and
# the datagen probe stream
_GOAL_TAG = 0xE7A1
_RANDOM_SEED_TAG = 0xE7A2
_MASK_TAG = 0xE7A3


# ---------------------------------------------------------------------------
# metrics

def _angular_deg(qa, qb):
    """Geodesic angle in degrees between unit quaternion arrays."""
    dot = np.abs(np.sum(qa * qb, axis=-1))
    return np.degrees(2.0 * np.arccos(np.minimum(1.0, dot)))


def pose_errors_batch(model, Q, goals):
    """Errors of a (B, dof) block against one goal set.

    Returns (pos_mm, ang_deg), each (B, k) over the specified slots in
    slot order.
    """
    Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
    idx = np.flatnonzero(goals.specified())
    if idx.size == 0:
        raise EvalError("every goal slot is free; nothing to measure")
    gp = np.stack([goals.slots[i].position for i in idx])
    gq = np.stack([goals.slots[i].quaternion for i in idx])
    p, r = kin.ee_poses_batch(model, Q)
    pos_mm = np.linalg.norm(p[:, idx] - gp, axis=-1) * 1000.0
    ang_deg = _angular_deg(r[:, idx], gq)
    return pos_mm, ang_deg


def pose_errors(model, q, goals):
    """Per-end-effector (pos_mm, ang_deg) of one configuration, specified
    slots only."""
    pos, ang = pose_errors_batch(model, np.asarray(q)[None], goals)
    return pos[0], ang[0]


def diversity_score(sols_a, sols_b):
    """Mean pairwise joint-space distance of set a over that of set b.

    Homogeneous of degree +1 in a and -1 in b; a value above 1.0 means
    set a spreads wider than the baseline.
    """
    a = np.atleast_2d(np.asarray(sols_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(sols_b, dtype=np.float64))
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise EvalError("need at least two solutions per side")
    denom = pdist(b).mean()
    if denom == 0.0:
        raise EvalError("degenerate baseline")
    return float(pdist(a).mean() / denom)


def joint_difference(q_sols, q_prior, limits):
    """Mean deviation from a reference configuration as a percentage of
    each joint's range.

    `limits` is the (lo, hi) pair of per-joint bound arrays.
    """
    q = np.atleast_2d(np.asarray(q_sols, dtype=np.float64))
    prior = np.asarray(q_prior, dtype=np.float64)
    lo, hi = np.asarray(limits[0], dtype=np.float64), np.asarray(limits[1], dtype=np.float64)
    span = hi - lo
    if not np.all(np.isfinite(span)) or np.any(span <= 0):
        raise EvalError("joint ranges must be finite and positive")
    return float(np.mean(np.abs(q - prior) / span) * 100.0)


@dataclass
class MetricsRecord:
    """Aggregated numbers for one report row; unused fields stay None."""

    collision_rate: float | None = None
    pos_mm_mean: float | None = None
    pos_mm_std: float | None = None
    ang_deg_mean: float | None = None
    ang_deg_std: float | None = None
    diversity: float | None = None
    success_rate: float | None = None
    iters_mean: float | None = None
    joint_diff_pct: float | None = None
    manip_improve_pct: float | None = None

    def __post_init__(self):
        for name in ("pos_mm_mean", "pos_mm_std", "ang_deg_mean", "ang_deg_std",
                     "diversity", "collision_rate", "success_rate"):
            v = getattr(self, name)
            if v is not None and np.isfinite(v) and v < 0:
                raise EvalError(f"{name} must be nonnegative, got {v}")
        for name in ("joint_diff_pct", "manip_improve_pct"):
            v = getattr(self, name)
            if v is not None and not np.isfinite(v):
                raise EvalError(f"{name} must be finite, got {v}")

    def as_dict(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


# ---------------------------------------------------------------------------
# harness plumbing

SCENARIOS = ("task1_generation", "task2_seeding", "task4_warm", "task4_manip",
             "task5_marginal", "task6_scaling", "appendix_unreachable")

# (n_goals, n_samples) applied when the config leaves them unset
_DEFAULT_SIZES = {
    "task1_generation": (1000, 32),
    "task2_seeding": (200, 32),
    "task4_warm": (200, 8),
    "task4_manip": (200, 8),
    "task5_marginal": (200, 8),
    "task6_scaling": (200, 8),
    "appendix_unreachable": (20, 8),
}


@dataclass
class BenchEntry:
    """One (robot, checkpoint) pair a scenario runs against."""

    model: kin.RobotModel
    params: dn.DenoiserParams
    label: str = ""
    source: str = ""        # free-form provenance note echoed in the report

    def __post_init__(self):
        dn.ensure_model_match(self.params, self.model)
        if not self.label:
            self.label = self.model.name


@dataclass
class BenchConfig:
    scenario: str
    seed: int = 0
    n_goals: int | None = None     # scenario default when None
    n_samples: int | None = None   # samples (or refiner seeds) per goal
    steps_used: int | None = None  # sampler steps, None = full schedule
    stochastic: bool = True
    guide_weight: float = 1.0      # objective weight for the task4 runs
    step_m: float = 0.05           # outward translation per sweep step
    n_steps: int = 10              # sweep steps per ray
    out_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise EvalError(f"unknown scenario '{self.scenario}'; "
                            f"expected one of {', '.join(SCENARIOS)}")
        if self.workers < 1:
            raise EvalError(f"workers must be >= 1, got {self.workers}")
        if self.step_m <= 0 or self.n_steps < 1:
            raise EvalError("sweep needs step_m > 0 and n_steps >= 1")


def unseen_configs(model, seed, n, extra=0):
    """Collision-free configurations from a stream disjoint from datagen."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, _GOAL_TAG, extra)))
    rows = []
    have = 0
    while have < n:
        cand = kin.sample_configs(model, rng, max(2 * n, 64))
        keep = cand[~kin.self_collides_batch(model, cand)]
        rows.append(keep)
        have += len(keep)
    return np.concatenate(rows)[:n]


def _goal_sets(model, Q):
    return [dn.GoalSet.full(kin.forward_kinematics(model, q)) for q in Q]


def _sample_cfg(cfg, n_samples):
    return diffusion.SampleConfig(n_samples=n_samples, steps_used=cfg.steps_used,
                                  stochastic=cfg.stochastic, seed=cfg.seed)


def _params_digest(params):
    """Content hash over tensors and normalization stats, order-fixed."""
    h = hashlib.sha256()
    for name in sorted(params.tensors):
        t = np.ascontiguousarray(params.tensors[name], dtype=np.float64)
        h.update(name.encode())
        h.update(repr(t.shape).encode())
        h.update(t.tobytes())
    s = params.stats
    for arr in (s.q_lo, s.q_hi, s.pos_center, [s.pos_scale]):
        h.update(np.asarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def _entry_inputs(entries):
    return [{"label": e.label, "robot": e.model.name,
             "robot_sha256": e.model.text_hash.hex(),
             "checkpoint_sha256": _params_digest(e.params),
             "source": e.source} for e in entries]


def _py(v):
    """Plain-python scalar for CSV/JSON emission."""
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return v


def _refine_many(model, goal_sets, seed_blocks, cfg, workers):
    """refiner.refine_batch per goal set, optionally across processes.

    Partitioning cannot change results: each goal's refinement is
    independent and rows are reassembled by goal index.
    """
    if workers <= 1 or len(goal_sets) < 4:
        return [refiner.refine_batch(model, g, s, cfg)
                for g, s in zip(goal_sets, seed_blocks)]
    jobs = [(model, g, s, cfg) for g, s in zip(goal_sets, seed_blocks)]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_refine_one, jobs, chunksize=8))


def _refine_one(job):
    model, goals, seeds, cfg = job
    return refiner.refine_batch(model, goals, seeds, cfg)


# ---------------------------------------------------------------------------
# scenario bodies; each returns (columns, rows, metrics, timing, solutions)

def _generation_core(cfg, entry, schedule, tag):
    """Sample against fresh goals; shared by several scenarios."""
    model, params = entry.model, entry.params
    G, S = cfg.n_goals, cfg.n_samples
    Qg = unseen_configs(model, cfg.seed, G, extra=tag)
    goals = _goal_sets(model, Qg)
    t0 = time.monotonic()
    sols = diffusion.sample_goals_batch(params, goals, schedule,
                                        _sample_cfg(cfg, S), model=model)
    t_sample = time.monotonic() - t0
    gp, gq = kin.ee_poses_batch(model, Qg)
    p, r = kin.ee_poses_batch(model, sols.reshape(-1, model.dof))
    p = p.reshape(G, S, model.n_ee, 3)
    r = r.reshape(G, S, model.n_ee, 4)
    pos_mm = np.linalg.norm(p - gp[:, None], axis=-1) * 1000.0   # (G, S, n_ee)
    ang_deg = _angular_deg(r, gq[:, None])
    coll = kin.self_collides_batch(model, sols.reshape(-1, model.dof)).reshape(G, S)
    return Qg, goals, sols, pos_mm, ang_deg, coll, t_sample


def _scn_generation(cfg, entry, schedule, refine_cfg):
    model = entry.model
    G, S = cfg.n_goals, cfg.n_samples
    Qg, goals, sols, pos_mm, ang_deg, coll, t_sample = \
        _generation_core(cfg, entry, schedule, 0)

    # baseline for the diversity ratio: the refiner run from random seeds;
    # it stands in for a solver, so only converged endpoints count as its
    # solutions (failed runs leave scatter, not answers)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _RANDOM_SEED_TAG)))
    seed_blocks = [kin.sample_configs(model, rng, S) for _ in range(G)]
    t0 = time.monotonic()
    refined = _refine_many(model, goals, seed_blocks, refine_cfg, cfg.workers)
    t_refine = time.monotonic() - t0

    rows = []
    for g in range(G):
        base = [res.q for res in refined[g] if res.success]
        # pairwise spread needs two baseline points; goals the random seeds
        # never solve drop out of the average
        div = (diversity_score(sols[g], np.stack(base))
               if len(base) >= 2 else float("nan"))
        rec = MetricsRecord(
            collision_rate=float(coll[g].mean()),
            pos_mm_mean=float(pos_mm[g].mean()), pos_mm_std=float(pos_mm[g].std()),
            ang_deg_mean=float(ang_deg[g].mean()), ang_deg_std=float(ang_deg[g].std()),
            diversity=div)
        rows.append({"goal": g, **rec.as_dict()})
    divs = [r["diversity"] for r in rows if np.isfinite(r["diversity"])]
    metrics = {
        "pos_mm_mean": float(pos_mm.mean()), "pos_mm_std": float(pos_mm.std()),
        "ang_deg_mean": float(ang_deg.mean()), "ang_deg_std": float(ang_deg.std()),
        "collision_rate": float(coll.mean()),
        "diversity_mean": float(np.mean(divs)) if divs else float("nan"),
        "diversity_goals": len(divs),
    }
    cols = ["goal", "pos_mm_mean", "pos_mm_std", "ang_deg_mean", "ang_deg_std",
            "collision_rate", "diversity"]
    timing = {"sampler_s": t_sample, "refiner_s": t_refine}
    return cols, rows, metrics, timing, sols


def _scn_seeding(cfg, entry, schedule, refine_cfg):
    model = entry.model
    G, S = cfg.n_goals, cfg.n_samples
    Qg, goals, sols, _, _, _, t_sample = _generation_core(cfg, entry, schedule, 0)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _RANDOM_SEED_TAG)))
    rand = [kin.sample_configs(model, rng, S) for _ in range(G)]

    t0 = time.monotonic()
    res_gen = _refine_many(model, goals, list(sols), refine_cfg, cfg.workers)
    res_rand = _refine_many(model, goals, rand, refine_cfg, cfg.workers)
    t_refine = time.monotonic() - t0

    rows = []
    acc = {"gen": [[], []], "rand": [[], []]}   # successes, iters-of-successes
    for g in range(G):
        cells = {"goal": g}
        for name, results in (("gen", res_gen[g]), ("rand", res_rand[g])):
            ok = np.array([r.success for r in results])
            it = np.array([r.iters_used for r in results], dtype=float)
            acc[name][0].append(ok)
            acc[name][1].append(it[ok])
            rec = MetricsRecord(
                success_rate=float(ok.mean()),
                iters_mean=float(it[ok].mean()) if ok.any() else float("nan"))
            cells[f"{name}_success_rate"] = rec.success_rate
            cells[f"{name}_iters_mean"] = rec.iters_mean
        rows.append(cells)
    ok_gen = np.concatenate(acc["gen"][0])
    ok_rand = np.concatenate(acc["rand"][0])
    it_gen = np.concatenate(acc["gen"][1])
    it_rand = np.concatenate(acc["rand"][1])
    metrics = {
        "gen_success_rate": float(ok_gen.mean()),
        "rand_success_rate": float(ok_rand.mean()),
        "success_gap_pp": float((ok_gen.mean() - ok_rand.mean()) * 100.0),
        "gen_iters_mean": float(it_gen.mean()) if it_gen.size else float("nan"),
        "rand_iters_mean": float(it_rand.mean()) if it_rand.size else float("nan"),
    }
    cols = ["goal", "gen_success_rate", "gen_iters_mean",
            "rand_success_rate", "rand_iters_mean"]
    timing = {"sampler_s": t_sample, "refiner_s": t_refine}
    log.info("%s: sampler %.1fs vs refiner %.1fs (x%.2f)", cfg.scenario,
             t_sample, t_refine, t_refine / max(t_sample, 1e-9))
    return cols, rows, metrics, timing, sols


def _guided_pair(cfg, entry, schedule, objective, priors=None):
    """Run the sampler twice on shared noise: unguided, then guided."""
    model, params = entry.model, entry.params
    G, S = cfg.n_goals, cfg.n_samples
    Qg = unseen_configs(model, cfg.seed, G, extra=0)
    goals = _goal_sets(model, Qg)
    scfg = _sample_cfg(cfg, S)
    t0 = time.monotonic()
    plain = diffusion.sample_goals_batch(params, goals, schedule, scfg, model=model)
    guided = diffusion.sample_goals_batch(params, goals, schedule, scfg,
                                          objectives=(objective,), model=model,
                                          priors=priors(Qg) if callable(priors) else priors)
    t_sample = time.monotonic() - t0

    def errs(block):
        p, r = kin.ee_poses_batch(model, block.reshape(-1, model.dof))
        gp, gq = kin.ee_poses_batch(model, Qg)
        pos = np.linalg.norm(p.reshape(G, S, model.n_ee, 3) - gp[:, None], axis=-1) * 1e3
        ang = _angular_deg(r.reshape(G, S, model.n_ee, 4), gq[:, None])
        return pos, ang

    return Qg, goals, plain, guided, errs, t_sample


def _scn_warm(cfg, entry, schedule, refine_cfg):
    model = entry.model
    obj = guidance.Objective("warm_start", cfg.guide_weight)   # prior comes per goal
    Qg, goals, plain, guided, errs, t_sample = _guided_pair(
        cfg, entry, schedule, obj, priors=lambda Q: Q)
    pos_u, ang_u = errs(plain)
    pos_g, ang_g = errs(guided)
    lim = model.joint_limits

    rows = []
    for g in range(cfg.n_goals):
        jd_u = joint_difference(plain[g], Qg[g], lim)
        jd_g = joint_difference(guided[g], Qg[g], lim)
        rows.append({"goal": g,
                     "jd_unguided_pct": jd_u, "jd_guided_pct": jd_g,
                     "pos_mm_unguided": float(pos_u[g].mean()),
                     "pos_mm_guided": float(pos_g[g].mean()),
                     "ang_deg_unguided": float(ang_u[g].mean()),
                     "ang_deg_guided": float(ang_g[g].mean())})
    jd_u = float(np.mean([r["jd_unguided_pct"] for r in rows]))
    jd_g = float(np.mean([r["jd_guided_pct"] for r in rows]))
    rec = MetricsRecord(joint_diff_pct=jd_g,
                        pos_mm_mean=float(pos_g.mean()), ang_deg_mean=float(ang_g.mean()))
    metrics = {
        "jd_unguided_pct": jd_u, "jd_guided_pct": rec.joint_diff_pct,
        "jd_reduction_pct": (jd_u - jd_g) / jd_u * 100.0 if jd_u > 0 else 0.0,
        "pos_mm_unguided": float(pos_u.mean()), "pos_mm_guided": float(pos_g.mean()),
        "pos_degrade_pct": (float(pos_g.mean()) - float(pos_u.mean()))
                           / max(float(pos_u.mean()), 1e-12) * 100.0,
        "ang_deg_unguided": float(ang_u.mean()), "ang_deg_guided": float(ang_g.mean()),
    }
    cols = ["goal", "jd_unguided_pct", "jd_guided_pct", "pos_mm_unguided",
            "pos_mm_guided", "ang_deg_unguided", "ang_deg_guided"]
    return cols, rows, metrics, {"sampler_s": t_sample}, guided


def _scn_manip(cfg, entry, schedule, refine_cfg):
    model = entry.model
    obj = guidance.manipulability(cfg.guide_weight)
    Qg, goals, plain, guided, errs, t_sample = _guided_pair(cfg, entry, schedule, obj)
    pos_u, ang_u = errs(plain)
    pos_g, ang_g = errs(guided)
    G, S = cfg.n_goals, cfg.n_samples
    m_u = kin.total_manipulability_batch(model, plain.reshape(-1, model.dof)).reshape(G, S)
    m_g = kin.total_manipulability_batch(model, guided.reshape(-1, model.dof)).reshape(G, S)

    rows = [{"goal": g,
             "manip_unguided": float(m_u[g].mean()),
             "manip_guided": float(m_g[g].mean()),
             "pos_mm_unguided": float(pos_u[g].mean()),
             "pos_mm_guided": float(pos_g[g].mean())}
            for g in range(G)]
    mu, mg = float(m_u.mean()), float(m_g.mean())
    rec = MetricsRecord(manip_improve_pct=(mg - mu) / mu * 100.0 if mu != 0 else np.inf)
    metrics = {
        "manip_unguided_mean": mu, "manip_guided_mean": mg,
        "manip_improve_pct": rec.manip_improve_pct,
        "pos_mm_unguided": float(pos_u.mean()), "pos_mm_guided": float(pos_g.mean()),
        "pos_degrade_pct": (float(pos_g.mean()) - float(pos_u.mean()))
                           / max(float(pos_u.mean()), 1e-12) * 100.0,
    }
    cols = ["goal", "manip_unguided", "manip_guided",
            "pos_mm_unguided", "pos_mm_guided"]
    return cols, rows, metrics, {"sampler_s": t_sample}, guided


def _scn_marginal(cfg, entry, schedule, refine_cfg):
    model, params = entry.model, entry.params
    G, S = cfg.n_goals, cfg.n_samples
    Qg = unseen_configs(model, cfg.seed, G, extra=0)
    full = _goal_sets(model, Qg)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, _MASK_TAG)))
    masked = []
    n_masked = np.empty(G, dtype=int)
    for g in range(G):
        m = int(rng.integers(0, model.n_ee))       # uniform over {0 .. n_ee-1}
        drop = set(rng.choice(model.n_ee, size=m, replace=False).tolist())
        slots = [None if i in drop else s for i, s in enumerate(full[g].slots)]
        masked.append(dn.GoalSet(slots))
        n_masked[g] = m
    t0 = time.monotonic()
    sols = diffusion.sample_goals_batch(params, masked, schedule,
                                        _sample_cfg(cfg, S), model=model)
    t_sample = time.monotonic() - t0

    rows = []
    for g in range(G):
        pos, ang = pose_errors_batch(model, sols[g], masked[g])
        coll = kin.self_collides_batch(model, sols[g])
        rec = MetricsRecord(pos_mm_mean=float(pos.mean()),
                            ang_deg_mean=float(ang.mean()),
                            collision_rate=float(coll.mean()))
        rows.append({"goal": g, "n_masked": int(n_masked[g]), **rec.as_dict()})
    metrics = {"pos_mm_mean": float(np.mean([r["pos_mm_mean"] for r in rows])),
               "ang_deg_mean": float(np.mean([r["ang_deg_mean"] for r in rows]))}
    for m in range(model.n_ee):
        sel = [r["pos_mm_mean"] for r in rows if r["n_masked"] == m]
        if sel:
            metrics[f"pos_mm_mean_masked_{m}"] = float(np.mean(sel))
    cols = ["goal", "n_masked", "pos_mm_mean", "ang_deg_mean", "collision_rate"]
    return cols, rows, metrics, {"sampler_s": t_sample}, sols


def _scn_scaling(cfg, entries, schedule, refine_cfg):
    rows = []
    timing = {}
    sols_all = {}
    for e, entry in enumerate(entries):
        _, _, sols, pos_mm, ang_deg, coll, t_sample = \
            _generation_core(cfg, entry, schedule, e)
        rec = MetricsRecord(
            pos_mm_mean=float(pos_mm.mean()), pos_mm_std=float(pos_mm.std()),
            ang_deg_mean=float(ang_deg.mean()), ang_deg_std=float(ang_deg.std()),
            collision_rate=float(coll.mean()))
        rows.append({"label": entry.label, "robot": entry.model.name,
                     "dof": entry.model.dof, "n_ee": entry.model.n_ee,
                     **rec.as_dict()})
        timing[f"sampler_s_{e}"] = t_sample
        sols_all[entry.label] = sols
    metrics = {r["label"]: {"pos_mm_mean": r["pos_mm_mean"],
                            "ang_deg_mean": r["ang_deg_mean"]} for r in rows}
    cols = ["label", "robot", "dof", "n_ee", "pos_mm_mean", "pos_mm_std",
            "ang_deg_mean", "ang_deg_std", "collision_rate"]
    return cols, rows, metrics, timing, None


def _scn_unreachable(cfg, entry, schedule, refine_cfg):
    model, params = entry.model, entry.params
    if model.n_ee != 1:
        raise EvalError("unreachable sweep expects a single end effector")
    R, S, K = cfg.n_goals, cfg.n_samples, cfg.n_steps
    Qg = unseen_configs(model, cfg.seed, R, extra=0)
    p0, q0 = kin.ee_poses_batch(model, Qg)
    p0, q0 = p0[:, 0], q0[:, 0]
    radius0 = np.linalg.norm(p0, axis=-1)
    direction = np.where(radius0[:, None] > 1e-9, p0 / np.maximum(radius0, 1e-9)[:, None],
                         np.array([1.0, 0.0, 0.0]))

    goals = []
    radii = np.empty((R, K))
    for ray in range(R):
        for k in range(K):
            radii[ray, k] = radius0[ray] + cfg.step_m * k
            pose = kin.Pose(direction[ray] * radii[ray, k], q0[ray])
            goals.append(dn.GoalSet([pose]))
    t0 = time.monotonic()
    sols = diffusion.sample_goals_batch(params, goals, schedule,
                                        _sample_cfg(cfg, S), model=model)
    t_sample = time.monotonic() - t0

    # position-only refinement isolates the geometric shortfall
    sweep_cfg = replace(refine_cfg, rot_weight=0.0)
    t0 = time.monotonic()
    results = _refine_many(model, goals, list(sols), sweep_cfg, cfg.workers)
    t_refine = time.monotonic() - t0

    rows = []
    refined = np.empty_like(sols)
    for i, (ray, k) in enumerate((r, k) for r in range(R) for k in range(K)):
        block = np.stack([res.q for res in results[i]])
        refined[i] = block
        pos, _ = pose_errors_batch(model, block, goals[i])
        finite = bool(np.all(np.isfinite(block)) and np.all(np.isfinite(pos)))
        rows.append({"ray": ray, "step": k, "radius_m": float(radii[ray, k]),
                     "pos_mm_best": float(pos.min()), "pos_mm_mean": float(pos.mean()),
                     "finite": int(finite)})
    metrics = {"max_radius_m": float(radii.max()),
               "all_finite": int(all(r["finite"] for r in rows))}
    cols = ["ray", "step", "radius_m", "pos_mm_best", "pos_mm_mean", "finite"]
    timing = {"sampler_s": t_sample, "refiner_s": t_refine}
    return cols, rows, metrics, timing, refined.reshape(R, K, S, model.dof)


_SCENARIO_FNS = {
    "task1_generation": _scn_generation,
    "task2_seeding": _scn_seeding,
    "task4_warm": _scn_warm,
    "task4_manip": _scn_manip,
    "task5_marginal": _scn_marginal,
    "task6_scaling": _scn_scaling,
    "appendix_unreachable": _scn_unreachable,
}


# ---------------------------------------------------------------------------
# entry point

def _write_report(out_dir, name, columns, rows, summary, solutions):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{name}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_py(row.get(c, "")) for c in columns])
    with open(out / f"{name}.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if solutions is not None:
        np.save(out / f"{name}_solutions.npy", np.asarray(solutions))


def run_benchmark(cfg: BenchConfig, entries, schedule=None, refine_cfg=None):
    """Execute one named scenario and return its report.

    `entries` is a BenchEntry or a list; task6_scaling emits one row per
    entry, every other scenario takes exactly one.  When cfg.out_dir is
    set the report lands there as <scenario>.csv and <scenario>.json
    (plus <scenario>_solutions.npy where solutions are kept), written so
    a rerun with identical inputs reproduces the bytes.
    """
    if isinstance(entries, BenchEntry):
        entries = [entries]
    entries = list(entries)
    if not entries:
        raise EvalError("no entries given")
    if cfg.scenario != "task6_scaling" and len(entries) != 1:
        raise EvalError(f"scenario '{cfg.scenario}' takes exactly one entry")
    schedule = schedule if schedule is not None else diffusion.make_schedule()
    refine_cfg = refine_cfg if refine_cfg is not None else refiner.RefineConfig()

    dflt = _DEFAULT_SIZES[cfg.scenario]
    eff = replace(cfg,
                  n_goals=cfg.n_goals if cfg.n_goals is not None else dflt[0],
                  n_samples=cfg.n_samples if cfg.n_samples is not None else dflt[1])

    fn = _SCENARIO_FNS[cfg.scenario]
    arg = entries if cfg.scenario == "task6_scaling" else entries[0]
    t0 = time.monotonic()
    cols, rows, metrics, timing, solutions = fn(eff, arg, schedule, refine_cfg)
    timing["total_s"] = time.monotonic() - t0

    summary = {
        "scenario": eff.scenario,
        "config": {k: (_py(v) if v is None or np.isscalar(v) else str(v))
                   for k, v in asdict(eff).items()},
        "inputs": _entry_inputs(entries),
        "metrics": metrics,
        "n_rows": len(rows),
    }
    report = {"scenario": eff.scenario, "columns": cols, "rows": rows,
              "summary": summary, "timing": timing, "solutions": solutions}
    log.info("%s: %d rows in %.1fs", eff.scenario, len(rows), timing["total_s"])
    if eff.out_dir is not None:
        _write_report(eff.out_dir, eff.scenario, cols, rows, summary, solutions)
    return report
