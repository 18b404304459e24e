"""Damped-least-squares goal refinement with adaptive damping.

Each iteration solves J^T (J J^T + lambda^2 I)^-1 r for the stacked
position and orientation residual of every specified goal slot, clamps
the step, projects into joint limits, and accepts only if the weighted
residual does not grow (rejections raise the damping tenfold, acceptances
lower it).  Seeds are refined as one batch with per-seed damping state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kinematics as kin
from .denoiser import GoalSet


class RefinerError(Exception):
    pass


@dataclass
class RefineConfig:
    max_iters: int = 200
    pos_tol: float = 1e-4      # meters
    ang_tol: float = 0.01      # radians
    damping: float = 1e-3
    step_clamp: float = 0.5    # per-joint bound on one update
    pos_weight: float = 1.0
    rot_weight: float = 0.5
    damping_min: float = 1e-9
    damping_max: float = 1e8

    def __post_init__(self):
        if self.max_iters < 1:
            raise RefinerError(f"max_iters must be >= 1, got {self.max_iters}")
        for name in ("pos_tol", "ang_tol", "damping", "step_clamp"):
            if getattr(self, name) <= 0:
                raise RefinerError(f"{name} must be positive")


@dataclass
class RefineResult:
    q: np.ndarray
    success: bool
    iters_used: int
    pos_errors: np.ndarray   # (n_ee,) meters, NaN where the slot was free
    ang_errors: np.ndarray   # (n_ee,) radians, NaN where the slot was free
    cost: float              # final weighted squared residual
    seed_source: str = ""


def _limit_projection(model):
    """Per-step map of configurations into joint limits.

    Narrow joints clip at the wall.  A revolute joint whose range spans a
    full turn has no wall: angles there are wrapped modulo 2*pi back into
    the range, which is the identical physical configuration.  Clipping
    such a joint instead manufactures a spurious boundary minimum that
    strands seeds approaching the goal from the wrapped side.
    """
    lo, hi = model.joint_limits
    clip_lo = np.where(np.isnan(lo), -np.inf, lo)
    clip_hi = np.where(np.isnan(hi), np.inf, hi)
    wrap = np.zeros(model.dof, dtype=bool)
    for k, i in enumerate(model.actuated):
        if (model.joints[i].kind == "revolute" and np.isfinite(lo[k])
                and hi[k] - lo[k] >= 2.0 * np.pi - 1e-9):
            wrap[k] = True

    def project(Q):
        out = np.clip(Q, clip_lo, clip_hi)
        if np.any(wrap):
            out[:, wrap] = lo[wrap] + np.mod(Q[:, wrap] - lo[wrap], 2.0 * np.pi)
        return out

    return project


def _goal_arrays(model, goals: GoalSet):
    if goals.n_slots != model.n_ee:
        raise RefinerError(f"goal set has {goals.n_slots} slots, robot has {model.n_ee}")
    idx = [i for i, s in enumerate(goals.slots) if s is not None]
    if not idx:
        raise RefinerError("every goal slot is free; nothing to refine")
    gp = np.stack([goals.slots[i].position for i in idx])
    gq = np.stack([goals.slots[i].quaternion for i in idx])
    return idx, gp, gq


def _errors(model, Q, idx, gp, gq):
    """Per-seed position and angle errors plus the world-frame residual."""
    p, r = kin.ee_poses_batch(model, Q)
    p = p[:, idx]
    r = r[:, idx]
    dp = gp - p                                     # (B, k, 3)
    q_err = kin.quat_multiply(gq, kin.quat_conjugate(r))
    rv = kin.quat_to_rotvec(q_err)                  # (B, k, 3)
    pos_err = np.linalg.norm(dp, axis=-1)
    ang_err = np.linalg.norm(rv, axis=-1)
    return dp, rv, pos_err, ang_err


def refine_batch(model: kin.RobotModel, goals: GoalSet, seeds, cfg: RefineConfig,
                 sources=None):
    """Refine a (B, dof) block of seeds toward one goal set."""
    seeds = np.atleast_2d(np.asarray(seeds, dtype=np.float64))
    if seeds.shape[1] != model.dof:
        raise RefinerError(f"seeds have {seeds.shape[1]} entries, robot has {model.dof} dof")
    idx, gp, gq = _goal_arrays(model, goals)
    k = len(idx)
    m = 6 * k
    project = _limit_projection(model)
    B = seeds.shape[0]
    if sources is None:
        sources = [""] * B

    Q = project(seeds)
    lam = np.full(B, cfg.damping)
    iters = np.zeros(B, dtype=int)
    done = np.zeros(B, dtype=bool)
    success = np.zeros(B, dtype=bool)
    final_pos = np.full((B, model.n_ee), np.nan)
    final_ang = np.full((B, model.n_ee), np.nan)
    final_cost = np.zeros(B)

    def residual(dp, rv):
        r = np.concatenate([cfg.pos_weight * dp, cfg.rot_weight * rv], axis=-1)
        return r.reshape(r.shape[0], m)

    def stacked_jacobian(sub_Q):
        J = np.empty((len(sub_Q), m, model.dof))
        for j, e in enumerate(idx):
            Je = kin.jacobian_batch(model, sub_Q, model.end_effectors[e])
            J[:, 6 * j:6 * j + 3] = cfg.pos_weight * Je[:, :3]
            J[:, 6 * j + 3:6 * j + 6] = cfg.rot_weight * Je[:, 3:]
        return J

    def record(rows, dp_pos, dp_ang, cost, ok):
        final_pos[rows[:, None], np.asarray(idx)[None, :]] = dp_pos
        final_ang[rows[:, None], np.asarray(idx)[None, :]] = dp_ang
        final_cost[rows] = cost
        success[rows] = ok
        done[rows] = True

    while True:
        rows = np.flatnonzero(~done)
        if rows.size == 0:
            break
        dp, rv, pos_err, ang_err = _errors(model, Q[rows], idx, gp, gq)
        r = residual(dp, rv)
        cost = np.sum(r * r, axis=1)
        conv = np.all(pos_err < cfg.pos_tol, axis=1) & np.all(ang_err < cfg.ang_tol, axis=1)
        fail = ~conv & ((iters[rows] >= cfg.max_iters) | (lam[rows] > cfg.damping_max))
        if np.any(conv):
            record(rows[conv], pos_err[conv], ang_err[conv], cost[conv], True)
        if np.any(fail):
            record(rows[fail], pos_err[fail], ang_err[fail], cost[fail], False)
        step = ~conv & ~fail
        live = rows[step]
        if live.size == 0:
            continue
        r_l = r[step]
        cost_l = cost[step]
        J = stacked_jacobian(Q[live])
        # J^T (J J^T + lam^2 I)^-1 r computed through the SVD of J; the
        # normal matrix is rank deficient for planar chains, so a direct
        # factorization can hit an exactly zero pivot once lam gets small
        U, S, Vt = np.linalg.svd(J, full_matrices=False)
        coef = S / (S * S + (lam[live] ** 2)[:, None])
        ur = np.einsum("bmr,bm->br", U, r_l)
        dq = np.einsum("brd,br->bd", Vt, coef * ur)
        biggest = np.max(np.abs(dq), axis=1)
        over = biggest > cfg.step_clamp
        if np.any(over):
            dq[over] *= (cfg.step_clamp / biggest[over])[:, None]
        Q_try = project(Q[live] + dq)
        dp_t, rv_t, _, _ = _errors(model, Q_try, idx, gp, gq)
        r_t = residual(dp_t, rv_t)
        cost_t = np.sum(r_t * r_t, axis=1)
        accept = cost_t <= cost_l
        acc = live[accept]
        Q[acc] = Q_try[accept]
        lam[acc] = np.maximum(lam[acc] / 10.0, cfg.damping_min)
        rej = live[~accept]
        lam[rej] = lam[rej] * 10.0
        iters[live] += 1

    return [RefineResult(Q[i].copy(), bool(success[i]), int(iters[i]),
                         final_pos[i], final_ang[i], float(final_cost[i]),
                         sources[i])
            for i in range(B)]


def refine(model: kin.RobotModel, goals: GoalSet, seed_q, cfg: RefineConfig = None,
           seed_source: str = "") -> RefineResult:
    """Refine a single seed configuration toward the specified goal slots."""
    cfg = cfg or RefineConfig()
    return refine_batch(model, goals, np.asarray(seed_q, dtype=np.float64)[None],
                        cfg, [seed_source])[0]


def solve_batch(model: kin.RobotModel, goals: GoalSet, seeds, cfg: RefineConfig = None,
                sources=None):
    """Refine many seeds; returns (best, results).

    Successes outrank failures; ties break on the lower final cost.
    """
    cfg = cfg or RefineConfig()
    seeds = np.atleast_2d(np.asarray(seeds, dtype=np.float64))
    if seeds.shape[0] == 0:
        raise RefinerError("no seeds given")
    results = refine_batch(model, goals, seeds, cfg, sources)
    best = min(results, key=lambda r: (not r.success, r.cost))
    return best, results
