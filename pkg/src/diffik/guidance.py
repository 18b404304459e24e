"""Objective gradients blended into the reverse diffusion mean.

Objectives score real (denormalized) joint vectors; `combine` converts
their summed gradient into normalized coordinates, where the sampler
applies it as mean_shift = variance * gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import NormStats, denormalize_q
from .kinematics import RobotModel, total_manipulability_batch

FD_STEP = 1e-5


class GuidanceError(Exception):
    pass


@dataclass(frozen=True)
class Objective:
    kind: str                 # warm_start | manipulability | custom
    weight: float
    q_prior: np.ndarray | None = None
    grad_fn: object = None

    def __post_init__(self):
        if self.kind not in ("warm_start", "manipulability", "custom"):
            raise GuidanceError(f"unknown objective kind '{self.kind}'")
        if not np.isfinite(self.weight):
            raise GuidanceError(f"objective weight must be finite, got {self.weight}")

    @property
    def needs_model(self):
        return self.kind == "manipulability"


def warm_start(q_prior, weight: float = 0.5) -> Objective:
    """Pull samples toward a reference configuration."""
    q_prior = np.asarray(q_prior, dtype=np.float64)
    return Objective("warm_start", weight, q_prior=q_prior)


def manipulability(weight: float = 0.1) -> Objective:
    """Push samples toward high-dexterity configurations."""
    return Objective("manipulability", weight)


def custom(grad_fn, weight: float = 1.0) -> Objective:
    """grad_fn(model, q) -> d(score)/dq over real joint vectors, batched."""
    if not callable(grad_fn):
        raise GuidanceError("custom objective needs a callable")
    return Objective("custom", weight, grad_fn=grad_fn)


def warm_start_grad(mu, q_prior):
    """Gradient of -|mu - q_prior|^2 in real joint space."""
    return -2.0 * (np.asarray(mu, dtype=np.float64) - q_prior)


def manipulability_grad(model: RobotModel, mu, h: float = FD_STEP):
    """Central-difference gradient of the summed manipulability measure."""
    Q = np.atleast_2d(np.asarray(mu, dtype=np.float64))
    B, dof = Q.shape
    # (dof, 2, B, dof) perturbation block evaluated in one kinematics call
    block = np.broadcast_to(Q, (dof, 2, B, dof)).copy()
    for j in range(dof):
        block[j, 0, :, j] += h
        block[j, 1, :, j] -= h
    vals = total_manipulability_batch(model, block.reshape(-1, dof))
    vals = vals.reshape(dof, 2, B)
    g = ((vals[:, 0] - vals[:, 1]) / (2.0 * h)).T
    return g if np.asarray(mu).ndim > 1 else g[0]


def _summed_gradient(objectives, model, q, priors):
    g = np.zeros_like(q)
    for o in objectives:
        if o.weight == 0.0:
            continue
        if o.kind == "warm_start":
            prior = o.q_prior if o.q_prior is not None else priors
            if prior is None:
                raise GuidanceError("warm_start objective has no reference configuration")
            g += o.weight * warm_start_grad(q, prior)
        elif o.kind == "manipulability":
            if model is None:
                raise GuidanceError("manipulability objective needs a kinematic model")
            g += o.weight * manipulability_grad(model, q)
        else:
            g += o.weight * np.asarray(o.grad_fn(model, q), dtype=np.float64)
    return g


def combine(objectives, model, mu, stats: NormStats):
    """Summed objective gradient at normalized mean mu, in normalized coords.

    mu may be (dof,) or (B, dof).  Raises GuidanceError on non-finite
    gradients so a bad objective aborts the sample loudly.
    """
    return combine_batched(objectives, model, mu, stats, None)


def combine_batched(objectives, model, mu, stats: NormStats, priors):
    mu = np.asarray(mu, dtype=np.float64)
    q = denormalize_q(mu, stats)
    g = _summed_gradient(objectives, model, np.atleast_2d(q),
                         None if priors is None else np.atleast_2d(priors))
    # d(real)/d(normalized) is diagonal: half the joint range
    g = g * (stats.q_hi - stats.q_lo) * 0.5
    if not np.all(np.isfinite(g)):
        raise GuidanceError("objective gradient is not finite")
    return g if mu.ndim > 1 else g[0]
