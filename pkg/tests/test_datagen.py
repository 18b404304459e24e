import numpy as np
import pytest

from diffik import datagen, kinematics as kin
from helpers import HALF_REJECTED, planar_chain
from oracles import brute_collision


@pytest.fixture(scope="module")
def dual(robots_dir):
    return kin.parse_robot_file(robots_dir / "dual_waist.yaml")


@pytest.fixture(scope="module")
def small_set(dual):
    return datagen.generate(dual, 3000, seed=9)


# ---------------------------------------------------------------------------
# generation

def test_records_collision_free_and_within_limits(dual, small_set):
    lo, hi = dual.joint_limits
    q = small_set.q.astype(np.float64)
    assert small_set.count == 3000
    assert np.all(q >= lo) and np.all(q <= hi)
    assert not np.any(kin.self_collides_batch(dual, q))


def test_stored_poses_match_fk(dual, small_set):
    q = small_set.q.astype(np.float64)
    p, r = kin.ee_poses_batch(dual, q)
    fresh = np.concatenate([p, r], axis=-1)
    assert np.max(np.abs(fresh - small_set.poses.astype(np.float64))) < 1e-6


def test_generate_deterministic(dual):
    a = datagen.generate(dual, 1000, seed=3)
    b = datagen.generate(dual, 1000, seed=3)
    np.testing.assert_array_equal(a.q, b.q)
    np.testing.assert_array_equal(a.poses, b.poses)
    c = datagen.generate(dual, 1000, seed=4)
    assert not np.array_equal(a.q, c.q)


def test_worker_count_does_not_change_bytes(tmp_path):
    # spans several shards so the pool actually distributes work
    m = kin.parse_robot(HALF_REJECTED)
    n = datagen.SHARD * 2 + 100
    a = datagen.generate(m, n, seed=5, workers=1)
    b = datagen.generate(m, n, seed=5, workers=3)
    datagen.save(a, tmp_path / "a.bin")
    datagen.save(b, tmp_path / "b.bin")
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_generate_rejects_bad_count(dual):
    with pytest.raises(datagen.DatagenError, match="count"):
        datagen.generate(dual, 0, seed=1)


def test_generate_aborts_when_everything_collides():
    text = planar_chain(2, 0.3, spheres={
        "base": [((0.0, 0.0, 0.0), 1.0)],
        "l2": [((0.3, 0.0, 0.0), 1.0)],
    })
    m = kin.parse_robot(text)
    with pytest.raises(datagen.DatagenError, match="free|infeasible"):
        datagen.generate(m, 100, seed=0)


def test_acceptance_rate_near_half():
    m = kin.parse_robot(HALF_REJECTED)
    rng = np.random.default_rng(77)
    Q = kin.sample_configs(m, rng, 10_000)
    rate = float(1.0 - kin.self_collides_batch(m, Q).mean())
    assert 0.40 < rate < 0.60
    # cross-check a slice against the brute-force oracle
    idx = rng.choice(len(Q), size=40, replace=False)
    for i in idx:
        assert kin.self_collides(m, Q[i]) == brute_collision(m, Q[i])


# ---------------------------------------------------------------------------
# normalization

def test_normalize_round_trip(small_set):
    rng = np.random.default_rng(8)
    stats = small_set.stats
    q = rng.uniform(stats.q_lo, stats.q_hi, size=(200, len(stats.q_lo)))
    back = datagen.denormalize_q(datagen.normalize_q(q, stats), stats)
    assert np.max(np.abs(back - q)) < 1e-12
    qn = datagen.normalize_q(q, stats)
    assert np.all(qn >= -1.0) and np.all(qn <= 1.0)


def test_normalize_limits_map_to_unit_interval(small_set):
    stats = small_set.stats
    np.testing.assert_allclose(datagen.normalize_q(stats.q_lo, stats), -1.0, atol=1e-15)
    np.testing.assert_allclose(datagen.normalize_q(stats.q_hi, stats), 1.0, atol=1e-15)


def test_position_stats_cover_workspace(small_set):
    pts = small_set.poses[:, :, :3].reshape(-1, 3).astype(np.float64)
    r = np.linalg.norm(datagen.normalize_pos(pts, small_set.stats), axis=1)
    assert r.max() <= 1.0 + 1e-9  # scale carries a 1.1 margin over the head sample


def test_stats_validation():
    with pytest.raises(datagen.DatagenError, match="pos_scale"):
        datagen.NormStats(np.zeros(2), np.ones(2), np.zeros(3), 0.0)
    with pytest.raises(datagen.DatagenError, match="q_hi"):
        datagen.NormStats(np.ones(2), np.zeros(2), np.zeros(3), 1.0)


# ---------------------------------------------------------------------------
# file IO

def test_save_load_round_trip(tmp_path, small_set):
    path = tmp_path / "d.bin"
    datagen.save(small_set, path)
    back = datagen.load(path)
    np.testing.assert_array_equal(back.q, small_set.q)
    np.testing.assert_array_equal(back.poses, small_set.poses)
    np.testing.assert_array_equal(back.stats.q_lo, small_set.stats.q_lo)
    assert back.stats.pos_scale == small_set.stats.pos_scale
    assert back.robot_hash == small_set.robot_hash
    # saving the loaded copy reproduces the bytes
    datagen.save(back, tmp_path / "d2.bin")
    assert (tmp_path / "d.bin").read_bytes() == (tmp_path / "d2.bin").read_bytes()


def test_file_size_formula(tmp_path, small_set):
    path = tmp_path / "d.bin"
    datagen.save(small_set, path)
    dof, n_ee, count = small_set.dof, small_set.n_ee, small_set.count
    expect = 64 + (2 * dof + 4) * 8 + count * (dof + 7 * n_ee) * 4
    assert path.stat().st_size == expect


def test_load_rejects_bad_magic(tmp_path, small_set):
    path = tmp_path / "d.bin"
    datagen.save(small_set, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(datagen.DatagenError, match="magic"):
        datagen.load(path)


def test_load_rejects_truncated(tmp_path, small_set):
    path = tmp_path / "d.bin"
    datagen.save(small_set, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-17])
    with pytest.raises(datagen.DatagenError, match="bytes"):
        datagen.load(path)


def test_hash_mismatch_detected(dual, small_set):
    other = kin.parse_robot(HALF_REJECTED)
    with pytest.raises(datagen.DatagenError, match="hash"):
        datagen.ensure_matches(small_set, other)
    datagen.ensure_matches(small_set, dual)  # no raise
