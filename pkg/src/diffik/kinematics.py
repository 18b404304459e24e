"""Kinematic trees: parsing, forward kinematics, Jacobians, collision checks.

A robot is a tree of links connected by revolute, prismatic or fixed joints,
described in a small YAML dialect (see ``parse_robot``).  All heavy math is
vectorized over a leading batch axis; quaternions are wxyz with w >= 0.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import yaml


class RobotError(Exception):
    """Malformed robot description or invalid kinematic query."""


# ---------------------------------------------------------------------------
# quaternion helpers (wxyz, batched over leading axes)

def quat_normalize(q):
    """Scale to unit norm and flip into the w >= 0 hemisphere."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise RobotError("zero-norm quaternion")
    q = q / n
    flip = q[..., :1] < 0.0
    return np.where(flip, -q, q)


def quat_multiply(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_rotate(q, v):
    """Rotate vectors v (...,3) by quaternions q (...,4)."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = q[..., :1]
    u = q[..., 1:]
    uv = np.cross(u, v)
    return v + 2.0 * (w * uv + np.cross(u, uv))


def quat_from_axis_angle(axis, angle):
    """Unit quaternion for a rotation of `angle` (radians) about a unit axis."""
    axis = np.asarray(axis, dtype=np.float64)
    angle = np.asarray(angle, dtype=np.float64)
    half = 0.5 * angle
    s = np.sin(half)
    w = np.cos(half)
    xyz = axis * s[..., None]
    return np.concatenate([w[..., None], xyz], axis=-1)


def quat_to_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def quat_to_rotvec(q):
    """Rotation vector (axis * angle) of q; angle taken in [0, pi]."""
    q = quat_normalize(q)
    # q and -q are the same rotation; pick the w >= 0 sheet so the angle
    # is the short geodesic rather than its 2*pi complement
    q = np.where(q[..., :1] < 0.0, -q, q)
    w = np.clip(q[..., 0], -1.0, 1.0)
    v = q[..., 1:]
    vn = np.linalg.norm(v, axis=-1)
    angle = 2.0 * np.arctan2(vn, w)
    # sin(angle/2) = vn; scale = angle / vn, with the small-angle limit 2.
    safe = np.where(vn > 1e-12, vn, 1.0)
    scale = np.where(vn > 1e-12, angle / safe, 2.0)
    return v * scale[..., None]


def rpy_to_quat(rpy):
    """Fixed-axis roll-pitch-yaw (x, then y, then z) to quaternion."""
    r, p, y = float(rpy[0]), float(rpy[1]), float(rpy[2])
    qx = quat_from_axis_angle(np.array([1.0, 0.0, 0.0]), np.float64(r))
    qy = quat_from_axis_angle(np.array([0.0, 1.0, 0.0]), np.float64(p))
    qz = quat_from_axis_angle(np.array([0.0, 0.0, 1.0]), np.float64(y))
    return quat_multiply(qz, quat_multiply(qy, qx))


# ---------------------------------------------------------------------------
# model types

@dataclass
class Pose:
    """Rigid transform as position (3,) plus unit wxyz quaternion (4,)."""

    position: np.ndarray
    quaternion: np.ndarray

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.quaternion = quat_normalize(np.asarray(self.quaternion, dtype=np.float64).reshape(4))

    @classmethod
    def identity(cls):
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    def compose(self, other: "Pose") -> "Pose":
        p = self.position + quat_rotate(self.quaternion, other.position)
        return Pose(p, quat_multiply(self.quaternion, other.quaternion))

    def as_array(self):
        """7-vector [x, y, z, qw, qx, qy, qz]."""
        return np.concatenate([self.position, self.quaternion])


@dataclass
class Sphere:
    center: np.ndarray  # in the parent link frame
    radius: float


@dataclass
class Link:
    name: str
    spheres: list = field(default_factory=list)


@dataclass
class Joint:
    name: str
    kind: str  # revolute | prismatic | fixed
    parent: str
    child: str
    axis: np.ndarray
    origin: Pose
    limits: tuple | None  # (lo, hi), required for actuated joints in files

    def __post_init__(self):
        if self.kind not in ("revolute", "prismatic", "fixed"):
            raise RobotError(f"joint '{self.name}': unknown kind '{self.kind}'")
        self.axis = np.asarray(self.axis, dtype=np.float64).reshape(3)
        if self.kind != "fixed":
            n = np.linalg.norm(self.axis)
            if abs(n - 1.0) > 1e-9:
                raise RobotError(f"joint '{self.name}': axis norm {n:.12f} is not 1")
            if self.limits is not None:
                lo, hi = float(self.limits[0]), float(self.limits[1])
                if not lo < hi:
                    raise RobotError(f"joint '{self.name}': limits [{lo}, {hi}] need lo < hi")
                self.limits = (lo, hi)


class RobotModel:
    """Validated kinematic tree with precomputed traversal and collision data.

    Attributes
    ----------
    links : list of Link
    joints : list of Joint, topologically ordered (parent link first)
    end_effectors : list of str
    dof : int, number of actuated joints
    n_ee : int
    joint_limits : (lo, hi) float64 arrays of shape (dof,), entries NaN where
        a joint carries no limits
    text_hash : bytes, sha256 of the source description (zeros if built
        programmatically)
    """

    def __init__(self, name, links, joints, end_effectors, text_hash=b"\x00" * 32):
        self.name = name
        self.links = list(links)
        self.joints = list(joints)
        self.end_effectors = list(end_effectors)
        self.text_hash = text_hash
        self._build()

    def _build(self):
        names = [l.name for l in self.links]
        if len(set(names)) != len(names):
            dup = next(n for n in names if names.count(n) > 1)
            raise RobotError(f"duplicate link name '{dup}'")
        self.link_index = {n: i for i, n in enumerate(names)}

        jnames = [j.name for j in self.joints]
        if len(set(jnames)) != len(jnames):
            dup = next(n for n in jnames if jnames.count(n) > 1)
            raise RobotError(f"duplicate joint name '{dup}'")

        parent_joint = {}
        for j in self.joints:
            for endpoint in (j.parent, j.child):
                if endpoint not in self.link_index:
                    raise RobotError(f"joint '{j.name}' references unknown link '{endpoint}'")
            if j.child in parent_joint:
                raise RobotError(f"link '{j.child}' has two parent joints "
                                 f"('{parent_joint[j.child].name}', '{j.name}')")
            parent_joint[j.child] = j

        roots = [n for n in names if n not in parent_joint]
        if len(roots) != 1:
            raise RobotError(f"tree needs exactly one base link, found {roots}")
        self.base_link = roots[0]

        # walk from every link to the base; a visited repeat means a cycle
        order = []
        depth = {}
        for n in names:
            chain = []
            cur = n
            seen = set()
            while cur != self.base_link:
                if cur in seen:
                    raise RobotError(f"cycle through link '{cur}'")
                seen.add(cur)
                chain.append(cur)
                if cur not in parent_joint:
                    raise RobotError(f"link '{cur}' is disconnected from '{self.base_link}'")
                cur = parent_joint[cur].parent
            for c in reversed(chain):
                if c not in depth:
                    depth[c] = len(depth)
                    order.append(parent_joint[c])
        self.joints = order  # topological: parents precede children

        for ee in self.end_effectors:
            if ee not in self.link_index:
                raise RobotError(f"end effector '{ee}' is not a link")
        if not self.end_effectors:
            raise RobotError("no end effectors declared")

        self.actuated = [i for i, j in enumerate(self.joints) if j.kind != "fixed"]
        self.dof = len(self.actuated)
        self.n_ee = len(self.end_effectors)
        self.q_index = {self.joints[i].name: k for k, i in enumerate(self.actuated)}

        lo = np.full(self.dof, np.nan)
        hi = np.full(self.dof, np.nan)
        for k, i in enumerate(self.actuated):
            lim = self.joints[i].limits
            if lim is not None:
                lo[k], hi[k] = lim
        self.joint_limits = (lo, hi)

        # per-link incoming joint index, ordered by traversal
        self._link_joint = {j.child: i for i, j in enumerate(self.joints)}
        self._ee_link_idx = [self.link_index[n] for n in self.end_effectors]

        # ancestry: actuated joints on the base->EE path, per end effector
        self.on_path = np.zeros((self.n_ee, self.dof), dtype=bool)
        for e, ee in enumerate(self.end_effectors):
            cur = ee
            while cur != self.base_link:
                j = self.joints[self._link_joint[cur]]
                if j.kind != "fixed":
                    self.on_path[e, self.q_index[j.name]] = True
                cur = j.parent

        # flattened sphere arrays and non-adjacent collision pairs
        s_link, s_center, s_radius = [], [], []
        for li, link in enumerate(self.links):
            for s in link.spheres:
                s_link.append(li)
                s_center.append(np.asarray(s.center, dtype=np.float64).reshape(3))
                s_radius.append(float(s.radius))
        self.sphere_link = np.array(s_link, dtype=np.int64)
        self.sphere_center = (np.array(s_center) if s_center else np.zeros((0, 3)))
        self.sphere_radius = np.array(s_radius, dtype=np.float64)

        adjacent = set()
        for j in self.joints:
            a, b = self.link_index[j.parent], self.link_index[j.child]
            adjacent.add((min(a, b), max(a, b)))
        pairs = []
        ns = len(self.sphere_link)
        for a in range(ns):
            for b in range(a + 1, ns):
                la, lb = self.sphere_link[a], self.sphere_link[b]
                if la == lb:
                    continue
                key = (min(la, lb), max(la, lb))
                if key in adjacent:
                    continue
                pairs.append((a, b))
        self.collision_pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        if len(self.collision_pairs):
            self.pair_threshold = (self.sphere_radius[self.collision_pairs[:, 0]]
                                   + self.sphere_radius[self.collision_pairs[:, 1]])
        else:
            self.pair_threshold = np.zeros(0)


# ---------------------------------------------------------------------------
# parsing

_JOINT_KEYS = {"name", "kind", "parent", "child", "axis", "origin", "limits"}


def parse_robot(text: str) -> RobotModel:
    """Build a RobotModel from a YAML description.

    Schema::

        name: arm
        links:
          - name: base
          - name: upper
            spheres:
              - {center: [0.1, 0, 0], radius: 0.05}
        joints:
          - name: shoulder
            kind: revolute        # revolute | prismatic | fixed
            parent: base
            child: upper
            axis: [0, 0, 1]
            origin: {xyz: [0, 0, 0.2], rpy: [0, 0, 0]}
            limits: [-3.1, 3.1]   # required unless kind is fixed
        end_effectors: [upper]

    Raises RobotError naming the offending entity on any structural problem
    (unknown link, duplicate name, cycle, non-unit axis, missing limits).
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise RobotError(f"not valid YAML: {e}") from e
    if not isinstance(doc, dict):
        raise RobotError("description must be a mapping")
    for key in ("links", "joints", "end_effectors"):
        if key not in doc:
            raise RobotError(f"missing top-level key '{key}'")

    links = []
    for entry in doc["links"]:
        if not isinstance(entry, dict) or "name" not in entry:
            raise RobotError(f"link entry without a name: {entry!r}")
        spheres = []
        for s in entry.get("spheres", []) or []:
            if "center" not in s or "radius" not in s:
                raise RobotError(f"link '{entry['name']}': sphere needs center and radius")
            if float(s["radius"]) <= 0:
                raise RobotError(f"link '{entry['name']}': sphere radius must be positive")
            spheres.append(Sphere(np.asarray(s["center"], dtype=np.float64), float(s["radius"])))
        links.append(Link(entry["name"], spheres))

    joints = []
    for entry in doc["joints"]:
        if not isinstance(entry, dict):
            raise RobotError(f"joint entry is not a mapping: {entry!r}")
        unknown = set(entry) - _JOINT_KEYS
        if unknown:
            raise RobotError(f"joint '{entry.get('name', '?')}': unknown keys {sorted(unknown)}")
        for key in ("name", "kind", "parent", "child"):
            if key not in entry:
                raise RobotError(f"joint entry missing '{key}': {entry!r}")
        kind = entry["kind"]
        origin = entry.get("origin", {}) or {}
        xyz = np.asarray(origin.get("xyz", [0.0, 0.0, 0.0]), dtype=np.float64)
        rpy = origin.get("rpy", [0.0, 0.0, 0.0])
        pose = Pose(xyz, rpy_to_quat(rpy))
        axis = entry.get("axis", [0.0, 0.0, 1.0])
        limits = entry.get("limits")
        if kind in ("revolute", "prismatic") and limits is None:
            raise RobotError(f"joint '{entry['name']}': actuated joint needs limits")
        joints.append(Joint(entry["name"], kind, entry["parent"], entry["child"],
                            axis, pose, tuple(limits) if limits is not None else None))

    model = RobotModel(doc.get("name", "robot"), links, joints, doc["end_effectors"],
                       text_hash=hashlib.sha256(text.encode()).digest())
    return model


def parse_robot_file(path) -> RobotModel:
    try:
        with open(path, "r") as f:
            return parse_robot(f.read())
    except OSError as e:
        raise RobotError(f"cannot read robot description: {e}") from e


# ---------------------------------------------------------------------------
# forward kinematics

def _check_q(model: RobotModel, q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != model.dof:
        raise RobotError(f"configuration has {q.shape[-1]} entries, robot has {model.dof} dof")
    return q


def link_poses(model: RobotModel, q):
    """World pose of every link for a batch of configurations.

    Parameters
    ----------
    q : (B, dof) or (dof,) array

    Returns
    -------
    pos : (B, n_links, 3)
    quat : (B, n_links, 4)
    jpos : (B, n_joints, 3)   joint origin after parent and offset transforms
    jaxis : (B, n_joints, 3)  joint axis in world coordinates
    """
    q = _check_q(model, q)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    B = q.shape[0]
    L = len(model.links)
    pos = np.zeros((B, L, 3))
    quat = np.zeros((B, L, 4))
    quat[:, :, 0] = 1.0
    jpos = np.zeros((B, len(model.joints), 3))
    jaxis = np.zeros((B, len(model.joints), 3))

    base = model.link_index[model.base_link]
    for ji, joint in enumerate(model.joints):
        pi = model.link_index[joint.parent]
        ci = model.link_index[joint.child]
        pp, pq = pos[:, pi], quat[:, pi]
        # frame after the fixed offset, before joint motion
        op = pp + quat_rotate(pq, joint.origin.position)
        oq = quat_multiply(pq, np.broadcast_to(joint.origin.quaternion, (B, 4)))
        jpos[:, ji] = op
        ax = quat_rotate(oq, np.broadcast_to(joint.axis, (B, 3)))
        jaxis[:, ji] = ax

        if joint.kind == "revolute":
            qi = q[:, model.q_index[joint.name]]
            mq = quat_from_axis_angle(joint.axis, qi)
            pos[:, ci] = op
            quat[:, ci] = quat_multiply(oq, mq)
        elif joint.kind == "prismatic":
            qi = q[:, model.q_index[joint.name]]
            pos[:, ci] = op + ax * qi[:, None]
            quat[:, ci] = oq
        else:
            pos[:, ci] = op
            quat[:, ci] = oq
    del base
    if single:
        return pos[0], quat[0], jpos[0], jaxis[0]
    return pos, quat, jpos, jaxis


def forward_kinematics(model: RobotModel, q) -> list:
    """Poses of the end-effector links for one configuration q (dof,)."""
    pos, quat, _, _ = link_poses(model, np.asarray(q, dtype=np.float64).reshape(-1))
    out = []
    for li in model._ee_link_idx:
        out.append(Pose(pos[li], quat_normalize(quat[li])))
    return out


def ee_poses_batch(model: RobotModel, Q):
    """End-effector poses for Q (B, dof) -> pos (B, n_ee, 3), quat (B, n_ee, 4)."""
    pos, quat, _, _ = link_poses(model, np.atleast_2d(Q))
    idx = model._ee_link_idx
    p = pos[:, idx]
    r = quat[:, idx]
    n = np.linalg.norm(r, axis=-1, keepdims=True)
    r = r / n
    return p, np.where(r[..., :1] < 0, -r, r)


def jacobian_batch(model: RobotModel, Q, ee: str):
    """Geometric Jacobians (B, 6, dof) of one end effector, rows [v; omega]."""
    if ee not in model.end_effectors:
        raise RobotError(f"'{ee}' is not an end effector of this robot")
    Q = np.atleast_2d(_check_q(model, Q))
    B = Q.shape[0]
    pos, _, jpos, jaxis = link_poses(model, Q)
    e = model.end_effectors.index(ee)
    p_ee = pos[:, model._ee_link_idx[e]]
    J = np.zeros((B, 6, model.dof))
    path = model.on_path[e]
    for k, ji in enumerate(model.actuated):
        if not path[k]:
            continue  # off-path columns stay zero
        joint = model.joints[ji]
        a = jaxis[:, ji]
        if joint.kind == "revolute":
            J[:, :3, k] = np.cross(a, p_ee - jpos[:, ji])
            J[:, 3:, k] = a
        else:
            J[:, :3, k] = a
    return J


def jacobian(model: RobotModel, q, ee: str):
    """Geometric Jacobian (6, dof) at configuration q for end effector ee."""
    return jacobian_batch(model, np.asarray(q, dtype=np.float64).reshape(1, -1), ee)[0]


def manipulability_batch(model: RobotModel, Q, ee: str):
    """Yoshikawa-style measure for a batch: Gram determinant of the task map.

    Uses the full 6-row Jacobian when the end effector has >= 6 actuated
    joints on its path, otherwise the position rows only.  The determinant is
    taken on the smaller side of the (rows x on-path columns) submatrix, so
    chains with fewer joints than task rows still report a nonzero volume.
    """
    Q = np.atleast_2d(_check_q(model, Q))
    e = model.end_effectors.index(ee) if ee in model.end_effectors else None
    if e is None:
        raise RobotError(f"'{ee}' is not an end effector of this robot")
    n_path = int(model.on_path[e].sum())
    J = jacobian_batch(model, Q, ee)
    rows = 6 if n_path >= 6 else 3
    Jsub = J[:, :rows, :][:, :, model.on_path[e]]
    if n_path >= rows:
        G = Jsub @ np.swapaxes(Jsub, 1, 2)
    else:
        G = np.swapaxes(Jsub, 1, 2) @ Jsub
    det = np.linalg.det(G)
    return np.sqrt(np.maximum(det, 0.0))


def manipulability(model: RobotModel, q, ee: str) -> float:
    return float(manipulability_batch(model, np.asarray(q, dtype=np.float64).reshape(1, -1), ee)[0])


def total_manipulability_batch(model: RobotModel, Q):
    """Sum of the per-end-effector measures, shape (B,)."""
    Q = np.atleast_2d(_check_q(model, Q))
    out = np.zeros(Q.shape[0])
    for ee in model.end_effectors:
        out += manipulability_batch(model, Q, ee)
    return out


# ---------------------------------------------------------------------------
# collision and sampling

def self_collides_batch(model: RobotModel, Q):
    """Sphere-model self collision for Q (B, dof) -> bool (B,).

    Spheres on the same or directly connected links are never tested.
    """
    Q = np.atleast_2d(_check_q(model, Q))
    if len(model.collision_pairs) == 0:
        return np.zeros(Q.shape[0], dtype=bool)
    pos, quat, _, _ = link_poses(model, Q)
    lp = pos[:, model.sphere_link]          # (B, S, 3)
    lq = quat[:, model.sphere_link]
    centers = lp + quat_rotate(lq, np.broadcast_to(model.sphere_center, lp.shape))
    a = centers[:, model.collision_pairs[:, 0]]
    b = centers[:, model.collision_pairs[:, 1]]
    d2 = np.sum((a - b) ** 2, axis=-1)
    return np.any(d2 < model.pair_threshold ** 2, axis=-1)


def self_collides(model: RobotModel, q) -> bool:
    return bool(self_collides_batch(model, np.asarray(q, dtype=np.float64).reshape(1, -1))[0])


def sample_configs(model: RobotModel, rng: np.random.Generator, n: int):
    """Uniform configurations within joint limits, shape (n, dof).

    Raises RobotError if any actuated joint has no limits.
    """
    lo, hi = model.joint_limits
    if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
        k = int(np.flatnonzero(np.isnan(lo) | np.isnan(hi))[0])
        name = model.joints[model.actuated[k]].name
        raise RobotError(f"joint '{name}' has no limits, cannot sample")
    return rng.uniform(lo, hi, size=(n, model.dof))


def sample_config(model: RobotModel, rng: np.random.Generator):
    return sample_configs(model, rng, 1)[0]
