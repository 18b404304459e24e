"""Collision-free configuration datasets: generation, normalization, file IO.

File layout (magic ``IKDF``, little-endian):

====================  =======================================================
64-byte header        magic(4) version(u32) dof(u32) n_ee(u32) count(u64)
                      robot_hash(32) reserved(8, zero)
stats block           float64: q_lo(dof) q_hi(dof) pos_center(3) pos_scale(1)
records               count rows of float32 [q(dof) | pose(7) per end
                      effector], pose as [x y z qw qx qy qz]
====================  =======================================================

Generation is sharded: shard k of 16384 records draws from an RNG stream
seeded by (seed, k), so the bytes are identical for any worker count.
"""

from __future__ import annotations

import concurrent.futures
import struct
from dataclasses import dataclass

import numpy as np

from . import kinematics as kin

MAGIC = b"IKDF"
VERSION = 1
SHARD = 16384
_PROBE_STREAM = 0xFFFFFFFF
_PROBE_DRAWS = 100_000
_MIN_ACCEPTANCE = 1e-3


class DatagenError(Exception):
    pass


@dataclass
class NormStats:
    """Per-robot normalization constants shared by training and sampling."""

    q_lo: np.ndarray
    q_hi: np.ndarray
    pos_center: np.ndarray
    pos_scale: float

    def __post_init__(self):
        self.q_lo = np.asarray(self.q_lo, dtype=np.float64).reshape(-1)
        self.q_hi = np.asarray(self.q_hi, dtype=np.float64).reshape(-1)
        self.pos_center = np.asarray(self.pos_center, dtype=np.float64).reshape(3)
        self.pos_scale = float(self.pos_scale)
        if self.pos_scale <= 0:
            raise DatagenError(f"pos_scale must be positive, got {self.pos_scale}")
        if np.any(self.q_hi <= self.q_lo):
            raise DatagenError("q_hi must exceed q_lo")


def normalize_q(q, stats: NormStats):
    """Map joint values from [lo, hi] onto [-1, 1] per joint."""
    q = np.asarray(q, dtype=np.float64)
    return 2.0 * (q - stats.q_lo) / (stats.q_hi - stats.q_lo) - 1.0


def denormalize_q(qn, stats: NormStats):
    qn = np.asarray(qn, dtype=np.float64)
    return stats.q_lo + 0.5 * (qn + 1.0) * (stats.q_hi - stats.q_lo)


def normalize_pos(p, stats: NormStats):
    """Center and scale workspace positions to roughly the unit ball."""
    return (np.asarray(p, dtype=np.float64) - stats.pos_center) / stats.pos_scale


@dataclass
class Dataset:
    robot_hash: bytes
    stats: NormStats
    q: np.ndarray       # (count, dof) float32
    poses: np.ndarray   # (count, n_ee, 7) float32

    @property
    def count(self):
        return self.q.shape[0]

    @property
    def dof(self):
        return self.q.shape[1]

    @property
    def n_ee(self):
        return self.poses.shape[1]


def ensure_matches(dataset: Dataset, model: kin.RobotModel):
    """Refuse to pair a dataset with a robot it was not generated from."""
    if dataset.robot_hash != model.text_hash:
        raise DatagenError(
            f"dataset robot hash {dataset.robot_hash.hex()[:12]} does not match "
            f"robot '{model.name}' ({model.text_hash.hex()[:12]})")


def _f32_bounds(lo, hi):
    """Float32 values guaranteed inside [lo, hi] for clamping stored q."""
    lo32 = lo.astype(np.float32)
    hi32 = hi.astype(np.float32)
    lo32 = np.where(lo32.astype(np.float64) < lo, np.nextafter(lo32, np.float32(np.inf)), lo32)
    hi32 = np.where(hi32.astype(np.float64) > hi, np.nextafter(hi32, np.float32(-np.inf)), hi32)
    return lo32, hi32


def _fill_shard(model, shard_index, quota, seed):
    """Accept `quota` collision-free records from stream (seed, shard_index)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, shard_index)))
    lo, hi = model.joint_limits
    lo32, hi32 = _f32_bounds(lo, hi)
    got_q, got_p = [], []
    have = 0
    while have < quota:
        q = kin.sample_configs(model, rng, 4096)
        # quantize first so collision and stored poses both see the stored q
        q32 = np.clip(q.astype(np.float32), lo32, hi32)
        q64 = q32.astype(np.float64)
        free = ~kin.self_collides_batch(model, q64)
        q64 = q64[free]
        p, r = kin.ee_poses_batch(model, q64)
        poses = np.concatenate([p, r], axis=-1).astype(np.float32)
        got_q.append(q32[free])
        got_p.append(poses)
        have += int(free.sum())
    q_all = np.concatenate(got_q)[:quota]
    p_all = np.concatenate(got_p)[:quota]
    return shard_index, q_all, p_all


def generate(model: kin.RobotModel, count: int, seed: int, workers: int = 1) -> Dataset:
    """Rejection-sample `count` collision-free configurations with poses.

    Aborts if a 1e5-draw probe accepts fewer than 0.1% of configurations.
    Output is byte-identical for any `workers` value.
    """
    if count <= 0:
        raise DatagenError(f"count must be positive, got {count}")
    lo, hi = model.joint_limits

    if len(model.collision_pairs):
        probe_rng = np.random.default_rng(np.random.SeedSequence((seed, _PROBE_STREAM)))
        probe = kin.sample_configs(model, probe_rng, _PROBE_DRAWS)
        acceptance = float(1.0 - kin.self_collides_batch(model, probe).mean())
        if acceptance < _MIN_ACCEPTANCE:
            raise DatagenError(
                f"collision model leaves {acceptance:.2e} of configurations free "
                f"(need {_MIN_ACCEPTANCE:.0e}); robot '{model.name}' looks infeasible")

    n_shards = (count + SHARD - 1) // SHARD
    quotas = [min(SHARD, count - k * SHARD) for k in range(n_shards)]
    results = {}
    if workers > 1 and n_shards > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futs = [pool.submit(_fill_shard, model, k, quotas[k], seed)
                    for k in range(n_shards)]
            for f in futs:
                k, q, p = f.result()
                results[k] = (q, p)
    else:
        for k in range(n_shards):
            _, q, p = _fill_shard(model, k, quotas[k], seed)
            results[k] = (q, p)

    q = np.concatenate([results[k][0] for k in range(n_shards)])
    poses = np.concatenate([results[k][1] for k in range(n_shards)])

    head = poses[:min(count, 10_000)].astype(np.float64)
    pts = head[:, :, :3].reshape(-1, 3)
    center = pts.mean(axis=0)
    spread = float(np.max(np.linalg.norm(pts - center, axis=1)))
    scale = 1.1 * spread if spread > 1e-12 else 1.0
    stats = NormStats(lo, hi, center, scale)
    return Dataset(model.text_hash, stats, q, poses)


# ---------------------------------------------------------------------------
# file IO

_HEADER = struct.Struct("<4sIIIQ32s8x")
assert _HEADER.size == 64


def save(dataset: Dataset, path):
    stats = dataset.stats
    block = np.concatenate([stats.q_lo, stats.q_hi, stats.pos_center,
                            [stats.pos_scale]]).astype("<f8")
    records = np.concatenate(
        [dataset.q, dataset.poses.reshape(dataset.count, -1)], axis=1).astype("<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, dataset.dof, dataset.n_ee,
                             dataset.count, dataset.robot_hash))
        f.write(block.tobytes())
        f.write(records.tobytes())


def load(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise DatagenError(f"{path}: too short for a dataset header")
    magic, version, dof, n_ee, count, robot_hash = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatagenError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DatagenError(f"{path}: unsupported version {version}")
    stats_n = 2 * dof + 4
    expect = _HEADER.size + stats_n * 8 + count * (dof + 7 * n_ee) * 4
    if len(raw) != expect:
        raise DatagenError(f"{path}: expected {expect} bytes, found {len(raw)}")
    block = np.frombuffer(raw, dtype="<f8", count=stats_n, offset=_HEADER.size)
    stats = NormStats(block[:dof], block[dof:2 * dof], block[2 * dof:2 * dof + 3],
                      block[2 * dof + 3])
    rec = np.frombuffer(raw, dtype="<f4", count=count * (dof + 7 * n_ee),
                        offset=_HEADER.size + stats_n * 8).reshape(count, dof + 7 * n_ee)
    q = np.ascontiguousarray(rec[:, :dof])
    poses = np.ascontiguousarray(rec[:, dof:]).reshape(count, n_ee, 7)
    return Dataset(robot_hash, stats, q, poses)
