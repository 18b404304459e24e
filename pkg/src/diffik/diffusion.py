"""Denoising diffusion over normalized joint vectors.

Timesteps are one-based: t runs over {1..T}, alpha_bar_0 is defined as 1,
so the posterior variance at t=1 is exactly zero and the final reverse
step is deterministic.  A respaced sub-schedule supports skipping steps
at sampling time while the network still sees the original step indices.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import denoiser as dn
from .datagen import Dataset, denormalize_q, normalize_q

log = logging.getLogger("diffik.diffusion")

ADAM_B1 = 0.9
ADAM_B2 = 0.999
ADAM_EPS = 1e-8


class DiffusionError(Exception):
    pass


# ---------------------------------------------------------------------------
# schedule

@dataclass(frozen=True)
class NoiseSchedule:
    """Beta schedule plus cumulative products, one-based indexing via t-1.

    timesteps holds the original step index fed to the network at each
    local step; for a full schedule it is simply 1..T.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    timesteps: np.ndarray

    def alpha_bar_prev(self, t):
        """alpha_bar at t-1 with the t=1 convention alpha_bar_0 = 1."""
        t = np.asarray(t)
        return np.where(t > 1, self.alpha_bar[np.maximum(t - 2, 0)], 1.0)


def make_schedule(T: int = 100, beta_start: float = 1e-4,
                  beta_end: float = 0.04) -> NoiseSchedule:
    """Linear beta ramp from beta_start to beta_end over T steps."""
    if T < 1:
        raise DiffusionError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise DiffusionError(f"need 0 < beta_start <= beta_end < 1, "
                             f"got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, np.cumprod(alpha), np.arange(1, T + 1))


def respace(schedule: NoiseSchedule, steps_used: int) -> NoiseSchedule:
    """Sub-schedule visiting every (T / steps_used)-th step.

    The kept steps' alpha_bar values are copied from the parent, so the
    marginal at each kept step is preserved exactly; betas are rederived
    from consecutive ratios.
    """
    if steps_used == schedule.T:
        return schedule
    if not 1 <= steps_used <= schedule.T:
        raise DiffusionError(f"steps_used {steps_used} outside 1..{schedule.T}")
    if schedule.T % steps_used:
        raise DiffusionError(f"steps_used {steps_used} does not divide T={schedule.T}")
    stride = schedule.T // steps_used
    keep = np.arange(1, steps_used + 1) * stride
    abar = schedule.alpha_bar[keep - 1]
    abar_prev = np.concatenate([[1.0], abar[:-1]])
    alpha = abar / abar_prev
    return NoiseSchedule(steps_used, 1.0 - alpha, alpha, abar, keep)


def _check_t(schedule, t):
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise DiffusionError(f"timestep outside 1..{schedule.T}: {t}")
    return t


def q_sample(q0, t, eps, schedule: NoiseSchedule):
    """Forward-noised state at step t: sqrt(ab) q0 + sqrt(1-ab) eps."""
    t = _check_t(schedule, t)
    ab = schedule.alpha_bar[t - 1]
    ab = ab[..., None] if np.ndim(t) else ab
    return np.sqrt(ab) * np.asarray(q0, dtype=np.float64) \
        + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def estimate_q0(qt, eps_hat, t, schedule: NoiseSchedule):
    """Invert q_sample given a noise estimate."""
    t = _check_t(schedule, t)
    ab = schedule.alpha_bar[t - 1]
    ab = ab[..., None] if np.ndim(t) else ab
    return (np.asarray(qt, dtype=np.float64)
            - np.sqrt(1.0 - ab) * np.asarray(eps_hat, dtype=np.float64)) / np.sqrt(ab)


def posterior_mean_var(qt, eps_hat, t, schedule: NoiseSchedule):
    """Reverse-step mean and (scalar) variance at one-based step t."""
    t = int(_check_t(schedule, t))
    qt = np.asarray(qt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    beta = schedule.beta[t - 1]
    ab = schedule.alpha_bar[t - 1]
    abp = float(schedule.alpha_bar_prev(t))
    mu = (qt - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(schedule.alpha[t - 1])
    var = (1.0 - abp) / (1.0 - ab) * beta
    return mu, float(var)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 512
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    p_drop: float = 0.2
    seed: int = 0
    determinism: bool = True   # runs are bit-reproducible either way; recorded
    compute_dtype: str = "float32"
    log_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise DiffusionError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise DiffusionError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise DiffusionError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0.0 <= self.p_drop < 1.0:
            raise DiffusionError(f"p_drop must be in [0, 1), got {self.p_drop}")
        if self.compute_dtype not in ("float32", "float64"):
            raise DiffusionError(f"compute_dtype must be float32 or float64")


def train(dataset: Dataset, arch: dn.ArchConfig, cfg: TrainConfig,
          schedule: NoiseSchedule, log_path=None) -> dn.DenoiserParams:
    """Fit the denoiser with AdamW; returns float64 parameters.

    Weights are initialized from cfg.seed, the data stream (shuffling,
    timesteps, noise, slot dropout) comes from stream (cfg.seed, 1).
    Per-epoch mean loss and wall time go to `log_path` as CSV if given.
    """
    if dataset.count < 1:
        raise DiffusionError("dataset is empty")
    dtype = np.float32 if cfg.compute_dtype == "float32" else np.float64
    master = dn.init_params(arch, dataset.dof, dataset.n_ee, dataset.stats, cfg.seed)
    work = master.astype(dtype) if dtype is not np.float64 else master

    q0 = normalize_q(dataset.q.astype(np.float64), dataset.stats).astype(dtype)
    feats_all = dn.pose_array_features(dataset.poses.astype(np.float64),
                                       dataset.stats).astype(dtype)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 1)))

    names = work.trainable()
    m = {k: np.zeros_like(work.tensors[k]) for k in names}
    v = {k: np.zeros_like(work.tensors[k]) for k in names}
    lr, wd = cfg.learning_rate, cfg.weight_decay
    step = 0
    n = dataset.count
    n_batches = max(1, n // cfg.batch_size)
    history = []

    for epoch in range(cfg.epochs):
        t0 = time.monotonic()
        perm = rng.permutation(n)
        losses = np.zeros(n_batches)
        for b in range(n_batches):
            idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            B = len(idx)
            t_draw = rng.integers(1, schedule.T + 1, size=B)
            eps = rng.standard_normal((B, dataset.dof)).astype(dtype)
            if arch.mode == "tokens" and cfg.p_drop > 0:
                mask = rng.random((B, dataset.n_ee)) >= cfg.p_drop
            else:
                mask = np.ones((B, dataset.n_ee), dtype=bool)
            loss, grads = dn.loss_and_grads_fixed(
                work, q0[idx], feats_all[idx], mask, t_draw, eps, schedule)
            if not np.isfinite(loss):
                raise DiffusionError(f"loss diverged at epoch {epoch} batch {b}: {loss}")
            losses[b] = loss
            step += 1
            c1 = 1.0 - ADAM_B1 ** step
            c2 = 1.0 - ADAM_B2 ** step
            for k in names:
                g = grads[k]
                mk = m[k]
                vk = v[k]
                mk *= ADAM_B1
                mk += (1 - ADAM_B1) * g
                vk *= ADAM_B2
                vk += (1 - ADAM_B2) * g * g
                p = work.tensors[k]
                p -= lr * (mk / c1) / (np.sqrt(vk / c2) + ADAM_EPS)
                if wd:
                    p -= lr * wd * p
        wall_ms = (time.monotonic() - t0) * 1000.0
        mean_loss = float(losses.mean())
        history.append({"epoch": epoch, "loss": mean_loss, "wall_ms": wall_ms})
        if cfg.log_every and epoch % cfg.log_every == 0:
            log.info("epoch %d/%d loss %.5f (%.0f ms)",
                     epoch + 1, cfg.epochs, mean_loss, wall_ms)

    if log_path is not None:
        with open(log_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["epoch", "loss", "wall_ms"])
            w.writeheader()
            w.writerows(history)
    out = work.astype(np.float64) if dtype is not np.float64 else work
    return out


# ---------------------------------------------------------------------------
# sampling

@dataclass
class SampleConfig:
    n_samples: int = 8
    steps_used: int | None = None  # None means every step
    stochastic: bool = True
    seed: int = 0
    objectives: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.n_samples < 1:
            raise DiffusionError(f"n_samples must be >= 1, got {self.n_samples}")


def _draw_noise(base, n, steps, dof):
    """(n, steps+1, dof) gaussian stack; row i comes from stream base+(i,)."""
    out = np.empty((n, steps + 1, dof))
    for i in range(n):
        g = np.random.default_rng(np.random.SeedSequence(tuple(base) + (i,)))
        out[i] = g.standard_normal((steps + 1, dof))
    return out


def _reverse_chain(params, feats, mask, sub: NoiseSchedule, noise, stochastic,
                   objectives, model, guide_fn):
    B = feats.shape[0]
    q = noise[:, 0, :].copy()
    for s in range(sub.T, 0, -1):
        t_net = np.full(B, sub.timesteps[s - 1])
        eps_hat = dn.predict_noise_batch(params, q, t_net, feats, mask).astype(np.float64)
        beta = sub.beta[s - 1]
        ab = sub.alpha_bar[s - 1]
        abp = float(sub.alpha_bar_prev(s))
        mu = (q - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(sub.alpha[s - 1])
        var = (1.0 - abp) / (1.0 - ab) * beta
        if not np.all(np.isfinite(mu)):
            raise DiffusionError(f"non-finite reverse mean at step {s}")
        q = mu
        if var > 0.0:
            if objectives:
                shift = guide_fn(objectives, model, mu, params.stats)
                if not np.all(np.isfinite(shift)):
                    raise DiffusionError(f"non-finite guidance at step {s}")
                if log.isEnabledFor(logging.DEBUG):
                    log.debug("guidance shift/mean ratio at step %d: %.3g", s,
                              var * np.linalg.norm(shift)
                              / max(np.linalg.norm(mu), 1e-12))
                q = q + var * shift
            if stochastic:
                q = q + np.sqrt(var) * noise[:, s, :]
    return q


def _finish(params, qn, model):
    q = denormalize_q(np.clip(qn, -1.0, 1.0), params.stats)
    # float32 stats in checkpoints can leave denormalized values a hair
    # outside the true limits; clamp again in joint space
    if model is not None:
        lo, hi = model.joint_limits
        q = np.clip(q, lo, hi)
    else:
        q = np.clip(q, params.stats.q_lo, params.stats.q_hi)
    return q


def _prep(params, schedule, cfg, objectives, model):
    from . import guidance
    objectives = tuple(objectives) if objectives else tuple(cfg.objectives)
    steps = cfg.steps_used if cfg.steps_used is not None else schedule.T
    sub = respace(schedule, steps)
    if objectives and model is None and any(o.needs_model for o in objectives):
        raise DiffusionError("objective needs a kinematic model; pass model=")
    if model is not None:
        dn.ensure_model_match(params, model)
    return objectives, sub, guidance.combine


def sample(params: dn.DenoiserParams, goals: dn.GoalSet, schedule: NoiseSchedule,
           cfg: SampleConfig, objectives=(), model=None):
    """Draw cfg.n_samples joint configurations for one goal set.

    Returns (n_samples, dof) in real joint coordinates, clamped to limits.
    Sample i consumes gaussian stream (cfg.seed, i) regardless of batch
    size, so runs are reproducible sample by sample.
    """
    if goals.n_slots != params.n_ee:
        raise DiffusionError(f"goal set has {goals.n_slots} slots, "
                             f"model expects {params.n_ee}")
    if not goals.specified().any():
        raise DiffusionError("every goal slot is free; nothing to condition on")
    objectives, sub, guide = _prep(params, schedule, cfg, objectives, model)
    feats1, mask1 = dn.goal_features(goals, params.stats)
    feats = np.broadcast_to(feats1, (cfg.n_samples,) + feats1.shape).copy()
    mask = np.broadcast_to(mask1, (cfg.n_samples,) + mask1.shape).copy()
    noise = _draw_noise((cfg.seed,), cfg.n_samples, sub.T, params.dof)
    qn = _reverse_chain(params, feats, mask, sub, noise, cfg.stochastic,
                        objectives, model, guide)
    return _finish(params, qn, model)


def sample_goals_batch(params: dn.DenoiserParams, goals_list, schedule: NoiseSchedule,
                       cfg: SampleConfig, objectives=(), model=None,
                       priors=None):
    """One reverse chain for many goal sets at once.

    Returns (n_goals, n_samples, dof).  Goal g, sample i uses stream
    (cfg.seed, g, i).  `priors` optionally gives a per-goal array passed
    to warm-start objectives (see guidance.combine_batched).
    """
    G = len(goals_list)
    if G == 0:
        raise DiffusionError("no goal sets given")
    for g, gset in enumerate(goals_list):
        if gset.n_slots != params.n_ee:
            raise DiffusionError("goal slot count does not match model")
        if not gset.specified().any():
            raise DiffusionError(f"goal set {g}: every slot is free; "
                                 "nothing to condition on")
    objectives, sub, _ = _prep(params, schedule, cfg, objectives, model)
    feats, mask = dn.goal_features_batch(goals_list, params.stats)
    n = cfg.n_samples
    feats = np.repeat(feats, n, axis=0)
    mask = np.repeat(mask, n, axis=0)
    noise = np.concatenate([_draw_noise((cfg.seed, g), n, sub.T, params.dof)
                            for g in range(G)])
    from . import guidance
    if priors is not None:
        priors = np.repeat(np.asarray(priors, dtype=np.float64), n, axis=0)

    def guide(objs, mdl, mu, stats):
        return guidance.combine_batched(objs, mdl, mu, stats, priors)

    qn = _reverse_chain(params, feats, mask, sub, noise, cfg.stochastic,
                        objectives, model, guide)
    return _finish(params, qn, model).reshape(G, n, params.dof)
