"""Noise-prediction network conditioned on end-effector goal tokens.

A small pre-norm transformer variant: the joint-vector state is a single
query that cross-attends into one token per goal slot.  There is no
self-attention.  Unspecified slots are swapped for a learned placeholder
token, which is what lets one checkpoint serve any subset of goals.

Forward and backward passes are written out by hand in numpy so that
gradients are exact, reproducible, and checkable against finite
differences tensor by tensor.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .datagen import NormStats, normalize_pos
from .kinematics import Pose, quat_normalize

TIME_DIM = 128
RMS_EPS = 1e-6
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class DenoiserError(Exception):
    pass


@dataclass(frozen=True)
class ArchConfig:
    """Network dimensions plus the goal-conditioning mode.

    mode "tokens" feeds one token per end effector and supports partial
    goals; "flat" concatenates every slot into a single token and demands
    all of them.
    """

    n_blocks: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 256
    mode: str = "tokens"

    def __post_init__(self):
        if min(self.n_blocks, self.n_heads, self.d_model, self.d_ff) < 1:
            raise DenoiserError("all architecture dimensions must be >= 1")
        if self.d_model % self.n_heads:
            raise DenoiserError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.mode not in ("tokens", "flat"):
            raise DenoiserError(f"unknown conditioning mode '{self.mode}'")


@dataclass
class GoalSet:
    """One optional target pose per end effector; None leaves a slot free."""

    slots: list

    def __post_init__(self):
        for s in self.slots:
            if s is not None and not isinstance(s, Pose):
                raise DenoiserError(f"goal slot must be a Pose or None, got {type(s)}")

    @classmethod
    def full(cls, poses):
        return cls(list(poses))

    @property
    def n_slots(self):
        return len(self.slots)

    def specified(self):
        return np.array([s is not None for s in self.slots], dtype=bool)


def goal_features(goals: GoalSet, stats: NormStats):
    """Per-slot feature rows [pos normalized | wxyz quat], plus the mask."""
    feats = np.zeros((goals.n_slots, 7))
    for i, s in enumerate(goals.slots):
        if s is None:
            continue
        feats[i, :3] = normalize_pos(s.position, stats)
        feats[i, 3:] = quat_normalize(s.quaternion)
    return feats, goals.specified()


def goal_features_batch(goals_list, stats: NormStats):
    rows = [goal_features(g, stats) for g in goals_list]
    return np.stack([r[0] for r in rows]), np.stack([r[1] for r in rows])


def pose_array_features(poses, stats: NormStats):
    """Features for an already-stacked (..., n_ee, 7) pose array."""
    poses = np.asarray(poses, dtype=np.float64)
    out = poses.copy()
    out[..., :3] = normalize_pos(poses[..., :3], stats)
    return out


# ---------------------------------------------------------------------------
# parameters

def sinusoid_embed(pos, dim):
    """Classic [sin | cos] embedding of scalar positions, shape (..., dim)."""
    pos = np.asarray(pos, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = pos[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def tensor_shapes(arch: ArchConfig, dof: int, n_ee: int) -> dict:
    """Single source of truth for the parameter inventory."""
    d, dff = arch.d_model, arch.d_ff
    shapes = {
        "stem_q.w": (dof, d), "stem_q.b": (d,),
        "stem_t.w": (TIME_DIM, d), "stem_t.b": (d,),
        "head.norm": (d,), "head.w": (d, dof), "head.b": (dof,),
    }
    if arch.mode == "tokens":
        shapes["goal_enc.w"] = (7, d)
        shapes["goal_enc.b"] = (d,)
        shapes["goal_empty"] = (d,)
        shapes["goal_pe"] = (n_ee, d)  # fixed, not trained
    else:
        shapes["goal_enc.w"] = (7 * n_ee, d)
        shapes["goal_enc.b"] = (d,)
    for i in range(arch.n_blocks):
        p = f"block{i}."
        shapes[p + "res.norm"] = (d,)
        shapes[p + "res.wh"] = (d, d)
        shapes[p + "res.wt"] = (d, d)
        shapes[p + "res.b"] = (d,)
        shapes[p + "attn.norm"] = (d,)
        for nm in ("wq", "wk", "wv", "wo"):
            shapes[p + "attn." + nm] = (d, d)
        for nm in ("bq", "bk", "bv", "bo"):
            shapes[p + "attn." + nm] = (d,)
        shapes[p + "ff.norm"] = (d,)
        shapes[p + "ff.w1"] = (d, dff)
        shapes[p + "ff.b1"] = (dff,)
        shapes[p + "ff.w2"] = (dff, d)
        shapes[p + "ff.b2"] = (d,)
    return shapes

FIXED_TENSORS = ("goal_pe",)


@dataclass
class DenoiserParams:
    arch: ArchConfig
    dof: int
    n_ee: int
    stats: NormStats
    tensors: dict = field(repr=False)

    @property
    def dtype(self):
        return self.tensors["stem_q.w"].dtype

    def n_parameters(self):
        return sum(v.size for v in self.tensors.values())

    def astype(self, dtype):
        return DenoiserParams(self.arch, self.dof, self.n_ee, self.stats,
                              {k: v.astype(dtype) for k, v in self.tensors.items()})

    def trainable(self):
        return [k for k in sorted(self.tensors) if k not in FIXED_TENSORS]


def init_params(arch: ArchConfig, dof: int, n_ee: int, stats: NormStats,
                seed: int) -> DenoiserParams:
    """Fan-in uniform weights, unit gains, zero biases and head, N(0, 0.02) empty token.

    Tensors are drawn in sorted-name order from a single stream so the
    result is a pure function of (arch, dof, n_ee, seed).
    """
    if dof < 1 or n_ee < 1:
        raise DenoiserError(f"need dof >= 1 and n_ee >= 1, got {dof}, {n_ee}")
    rng = np.random.default_rng(seed)
    shapes = tensor_shapes(arch, dof, n_ee)
    tensors = {}
    for name in sorted(shapes):
        shape = shapes[name]
        leaf = name.rsplit(".", 1)[-1]
        if name == "goal_pe":
            tensors[name] = sinusoid_embed(np.arange(n_ee), arch.d_model)
        elif name == "goal_empty":
            tensors[name] = 0.02 * rng.standard_normal(shape)
        elif name == "head.w":
            # zero head: an untrained net predicts zero noise exactly
            tensors[name] = np.zeros(shape)
        elif leaf in ("w", "wh", "wt", "wq", "wk", "wv", "wo", "w1", "w2"):
            bound = 1.0 / np.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
        elif leaf == "norm":
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return DenoiserParams(arch, dof, n_ee, stats, tensors)


# ---------------------------------------------------------------------------
# forward pieces

def _gelu(z):
    phi = 0.5 * (1.0 + erf(z * _INV_SQRT2))
    return z * phi, phi


def _gelu_grad(z, phi):
    return phi + z * np.exp(-0.5 * z * z) * _INV_SQRT2PI


def _rms_fwd(x, g):
    r = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + RMS_EPS)
    n = x / r
    return n * g, n, r


def _rms_bwd(dy, g, n, r):
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * n).sum(axis=axes)
    dn = dy * g
    dx = (dn - n * np.mean(dn * n, axis=-1, keepdims=True)) / r
    return dx, dg


def _encode_tokens(params, feats, mask):
    """(B, n_ee, 7) features -> (B, n_tok, d) conditioning tokens."""
    P = params.tensors
    dt = params.dtype
    B = feats.shape[0]
    if params.arch.mode == "tokens":
        enc = feats.reshape(B * params.n_ee, 7) @ P["goal_enc.w"] + P["goal_enc.b"]
        enc = enc.reshape(B, params.n_ee, -1)
        tok = np.where(mask[:, :, None], enc, P["goal_empty"].astype(dt))
        tok = tok + P["goal_pe"].astype(dt)[None]
    else:
        if not np.all(mask):
            raise DenoiserError("flat conditioning requires every goal slot")
        tok = (feats.reshape(B, 7 * params.n_ee) @ P["goal_enc.w"]
               + P["goal_enc.b"])[:, None, :]
    return tok


def _forward(params: DenoiserParams, qt, t, feats, mask, want_cache=False):
    """Noise estimate for a batch; all inputs already normalized.

    qt (B, dof), t (B,) one-based timesteps, feats (B, n_ee, 7),
    mask (B, n_ee) bool.  Returns (eps_hat, cache).
    """
    P = params.tensors
    dt = params.dtype
    arch = params.arch
    qt = np.asarray(qt, dtype=dt)
    feats = np.asarray(feats, dtype=dt)
    B = qt.shape[0]
    dh = arch.d_model // arch.n_heads
    scale = 1.0 / np.sqrt(dh)

    tok = _encode_tokens(params, feats, mask)
    N = tok.shape[1]
    st = sinusoid_embed(np.asarray(t, dtype=np.float64), TIME_DIM).astype(dt)
    temb = st @ P["stem_t.w"] + P["stem_t.b"]
    h = qt @ P["stem_q.w"] + P["stem_q.b"]

    blocks = []
    for i in range(arch.n_blocks):
        p = f"block{i}."
        c = {}
        u, c["n_res"], c["r_res"] = _rms_fwd(h, P[p + "res.norm"])
        c["u_res"] = u
        h = h + u @ P[p + "res.wh"] + temb @ P[p + "res.wt"] + P[p + "res.b"]

        u, c["n_at"], c["r_at"] = _rms_fwd(h, P[p + "attn.norm"])
        c["u_at"] = u
        qh = (u @ P[p + "attn.wq"] + P[p + "attn.bq"]).reshape(B, arch.n_heads, dh)
        kf = tok.reshape(B * N, -1)
        kh = (kf @ P[p + "attn.wk"] + P[p + "attn.bk"]).reshape(B, N, arch.n_heads, dh)
        vh = (kf @ P[p + "attn.wv"] + P[p + "attn.bv"]).reshape(B, N, arch.n_heads, dh)
        s = np.einsum("bhd,bnhd->bhn", qh, kh) * scale
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        w = e / e.sum(axis=-1, keepdims=True)
        a = np.einsum("bhn,bnhd->bhd", w, vh).reshape(B, arch.d_model)
        c.update(qh=qh, kh=kh, vh=vh, w=w, a=a)
        h = h + a @ P[p + "attn.wo"] + P[p + "attn.bo"]

        u, c["n_ff"], c["r_ff"] = _rms_fwd(h, P[p + "ff.norm"])
        c["u_ff"] = u
        z = u @ P[p + "ff.w1"] + P[p + "ff.b1"]
        gz, phi = _gelu(z)
        c["z"], c["phi"], c["gz"] = z, phi, gz
        h = h + gz @ P[p + "ff.w2"] + P[p + "ff.b2"]
        blocks.append(c)

    u, n_head, r_head = _rms_fwd(h, P["head.norm"])
    eps_hat = u @ P["head.w"] + P["head.b"]
    if not want_cache:
        return eps_hat, None
    cache = dict(qt=qt, st=st, temb=temb, tok=tok, feats=feats, mask=mask,
                 blocks=blocks, u_head=u, n_head=n_head, r_head=r_head, B=B, N=N,
                 scale=scale)
    return eps_hat, cache


def _backward(params: DenoiserParams, cache, d_eps):
    """Gradients for every trainable tensor given d(loss)/d(eps_hat)."""
    P = params.tensors
    arch = params.arch
    B, N = cache["B"], cache["N"]
    dh = arch.d_model // arch.n_heads
    g = {}

    d_eps = np.asarray(d_eps, dtype=params.dtype)
    g["head.w"] = cache["u_head"].T @ d_eps
    g["head.b"] = d_eps.sum(0)
    du = d_eps @ P["head.w"].T
    dhid, g["head.norm"] = _rms_bwd(du, P["head.norm"], cache["n_head"], cache["r_head"])

    dtemb = np.zeros_like(cache["temb"])
    dtok = np.zeros_like(cache["tok"])

    for i in reversed(range(arch.n_blocks)):
        p = f"block{i}."
        c = cache["blocks"][i]

        # feedforward
        g[p + "ff.w2"] = c["gz"].T @ dhid
        g[p + "ff.b2"] = dhid.sum(0)
        dgz = dhid @ P[p + "ff.w2"].T
        dz = dgz * _gelu_grad(c["z"], c["phi"])
        g[p + "ff.w1"] = c["u_ff"].T @ dz
        g[p + "ff.b1"] = dz.sum(0)
        du = dz @ P[p + "ff.w1"].T
        dx, g[p + "ff.norm"] = _rms_bwd(du, P[p + "ff.norm"], c["n_ff"], c["r_ff"])
        dhid = dhid + dx

        # attention
        da = dhid @ P[p + "attn.wo"].T
        g[p + "attn.wo"] = c["a"].T @ dhid
        g[p + "attn.bo"] = dhid.sum(0)
        da = da.reshape(B, arch.n_heads, dh)
        dw = np.einsum("bhd,bnhd->bhn", da, c["vh"])
        dv = np.einsum("bhn,bhd->bnhd", c["w"], da)
        ds = c["w"] * (dw - (dw * c["w"]).sum(-1, keepdims=True))
        ds = ds * cache["scale"]
        dqh = np.einsum("bhn,bnhd->bhd", ds, c["kh"]).reshape(B, arch.d_model)
        dk = np.einsum("bhn,bhd->bnhd", ds, c["qh"]).reshape(B * N, arch.d_model)
        dvf = dv.reshape(B * N, arch.d_model)
        kf = cache["tok"].reshape(B * N, arch.d_model)
        g[p + "attn.wq"] = c["u_at"].T @ dqh
        g[p + "attn.bq"] = dqh.sum(0)
        g[p + "attn.wk"] = kf.T @ dk
        g[p + "attn.bk"] = dk.sum(0)
        g[p + "attn.wv"] = kf.T @ dvf
        g[p + "attn.bv"] = dvf.sum(0)
        dtok += (dk @ P[p + "attn.wk"].T + dvf @ P[p + "attn.wv"].T).reshape(B, N, -1)
        du = dqh @ P[p + "attn.wq"].T
        dx, g[p + "attn.norm"] = _rms_bwd(du, P[p + "attn.norm"], c["n_at"], c["r_at"])
        dhid = dhid + dx

        # residual stem update
        g[p + "res.wh"] = c["u_res"].T @ dhid
        g[p + "res.wt"] = cache["temb"].T @ dhid
        g[p + "res.b"] = dhid.sum(0)
        dtemb += dhid @ P[p + "res.wt"].T
        du = dhid @ P[p + "res.wh"].T
        dx, g[p + "res.norm"] = _rms_bwd(du, P[p + "res.norm"], c["n_res"], c["r_res"])
        dhid = dhid + dx

    g["stem_q.w"] = cache["qt"].T @ dhid
    g["stem_q.b"] = dhid.sum(0)
    g["stem_t.w"] = cache["st"].T @ dtemb
    g["stem_t.b"] = dtemb.sum(0)

    mask = cache["mask"]
    feats = cache["feats"]
    if arch.mode == "tokens":
        denc = dtok * mask[:, :, None]
        g["goal_empty"] = (dtok * (~mask)[:, :, None]).sum(axis=(0, 1))
        ff = feats.reshape(B * params.n_ee, 7)
        df = denc.reshape(B * params.n_ee, -1)
        g["goal_enc.w"] = ff.T @ df
        g["goal_enc.b"] = df.sum(0)
    else:
        df = dtok[:, 0, :]
        g["goal_enc.w"] = feats.reshape(B, -1).T @ df
        g["goal_enc.b"] = df.sum(0)
    return g


# ---------------------------------------------------------------------------
# public ops

def encode_goals(params: DenoiserParams, goals: GoalSet):
    """Conditioning tokens (n_tok, d_model) for one goal set."""
    if goals.n_slots != params.n_ee:
        raise DenoiserError(f"goal set has {goals.n_slots} slots, model expects {params.n_ee}")
    feats, mask = goal_features(goals, params.stats)
    return _encode_tokens(params, feats[None].astype(params.dtype), mask[None])[0]


def predict_noise(params: DenoiserParams, q_t, goals: GoalSet, t: int):
    """Noise estimate for one normalized state q_t at one-based timestep t."""
    if t < 1:
        raise DenoiserError(f"timestep must be >= 1, got {t}")
    q_t = np.asarray(q_t, dtype=np.float64).reshape(1, -1)
    if q_t.shape[1] != params.dof:
        raise DenoiserError(f"state has {q_t.shape[1]} entries, model has dof {params.dof}")
    feats, mask = goal_features(goals, params.stats)
    eps, _ = _forward(params, q_t, np.array([t]), feats[None], mask[None])
    return eps[0].astype(np.float64)


def predict_noise_batch(params: DenoiserParams, qt, t, feats, mask):
    """Batched noise estimate; feats must already be normalized features."""
    eps, _ = _forward(params, qt, t, feats, mask)
    return eps


def _loss_core(params, q0, feats, mask, t, eps, abar):
    dt = params.dtype
    q0 = np.asarray(q0, dtype=dt)
    eps = np.asarray(eps, dtype=dt)
    ab = abar[np.asarray(t) - 1].astype(dt)[:, None]
    qt = np.sqrt(ab) * q0 + np.sqrt(1.0 - ab) * eps
    eps_hat, cache = _forward(params, qt, t, feats, mask, want_cache=True)
    resid = eps_hat - eps
    loss = float(np.mean(np.sum(resid.astype(np.float64) ** 2, axis=1)))
    d_eps = (2.0 / q0.shape[0]) * resid
    grads = _backward(params, cache, d_eps)
    return loss, grads


def loss_and_grads(params: DenoiserParams, q0, poses, schedule, rng,
                   p_drop: float = 0.2):
    """Training loss over one batch plus gradients for every trainable tensor.

    q0 (B, dof) normalized configurations, poses (B, n_ee, 7) raw pose rows.
    Draw order from rng is fixed: timesteps, noise, then slot dropout.
    In tokens mode each slot is independently hidden with probability
    p_drop; flat mode always sees every slot.
    """
    B = q0.shape[0]
    t = rng.integers(1, schedule.T + 1, size=B)
    eps = rng.standard_normal((B, params.dof))
    if params.arch.mode == "tokens" and p_drop > 0:
        mask = rng.random((B, params.n_ee)) >= p_drop
    else:
        mask = np.ones((B, params.n_ee), dtype=bool)
    feats = pose_array_features(poses, params.stats)
    return _loss_core(params, q0, feats, mask, t, eps, schedule.alpha_bar)


def loss_and_grads_fixed(params: DenoiserParams, q0, feats, mask, t, eps, schedule):
    """As loss_and_grads but with (t, eps, mask) supplied; for gradient checks."""
    return _loss_core(params, q0, feats, mask, np.asarray(t), eps, schedule.alpha_bar)


# ---------------------------------------------------------------------------
# checkpoint IO (magic IKDN, little-endian, float32 payload, crc32 footer)

CKPT_MAGIC = b"IKDN"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<4sIIIIIIIII")


def save_params(params: DenoiserParams, path):
    arch = params.arch
    entries = dict(params.tensors)
    s = params.stats
    entries["stats.q_lo"] = s.q_lo
    entries["stats.q_hi"] = s.q_hi
    entries["stats.pos_center"] = s.pos_center
    entries["stats.pos_scale"] = np.array([s.pos_scale])
    names = sorted(entries)
    blob = bytearray()
    blob += _CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, arch.n_blocks, arch.n_heads,
                            arch.d_model, arch.d_ff,
                            0 if arch.mode == "tokens" else 1,
                            params.dof, params.n_ee, len(names))
    for name in names:
        enc = name.encode()
        arr = entries[name]
        blob += struct.pack("<H", len(enc)) + enc
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
    for name in names:
        blob += np.ascontiguousarray(entries[name], dtype="<f4").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    with open(path, "wb") as f:
        f.write(bytes(blob))


def load_params(path) -> DenoiserParams:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _CKPT_HEAD.size + 4:
        raise DenoiserError(f"{path}: too short for a checkpoint")
    crc_stored, = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(raw[:-4]) != crc_stored:
        raise DenoiserError(f"{path}: checksum mismatch, file is corrupt")
    magic, version, n_blocks, n_heads, d_model, d_ff, mode_i, dof, n_ee, n_tensors = \
        _CKPT_HEAD.unpack_from(raw, 0)
    if magic != CKPT_MAGIC:
        raise DenoiserError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise DenoiserError(f"{path}: unsupported version {version}")
    arch = ArchConfig(n_blocks, n_heads, d_model, d_ff,
                      "tokens" if mode_i == 0 else "flat")
    off = _CKPT_HEAD.size
    metas = []
    for _ in range(n_tensors):
        ln, = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + ln].decode()
        off += ln
        nd, = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{nd}I", raw, off)
        off += 4 * nd
        metas.append((name, shape))
    entries = {}
    for name, shape in metas:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=n, offset=off)
        off += 4 * n
        entries[name] = arr.reshape(shape).astype(np.float64)
    if off != len(raw) - 4:
        raise DenoiserError(f"{path}: payload size disagrees with directory")

    expect = tensor_shapes(arch, dof, n_ee)
    tensors = {}
    for name, shape in expect.items():
        if name not in entries:
            raise DenoiserError(f"{path}: missing tensor '{name}'")
        if entries[name].shape != shape:
            raise DenoiserError(
                f"{path}: shape mismatch for '{name}': "
                f"{entries[name].shape} vs {shape}")
        tensors[name] = entries[name]
    for name in ("stats.q_lo", "stats.q_hi", "stats.pos_center", "stats.pos_scale"):
        if name not in entries:
            raise DenoiserError(f"{path}: missing tensor '{name}'")
    stats = NormStats(entries["stats.q_lo"], entries["stats.q_hi"],
                      entries["stats.pos_center"], float(entries["stats.pos_scale"][0]))
    extra = set(entries) - set(expect) - {"stats.q_lo", "stats.q_hi",
                                          "stats.pos_center", "stats.pos_scale"}
    if extra:
        raise DenoiserError(f"{path}: unexpected tensors {sorted(extra)}")
    return DenoiserParams(arch, dof, n_ee, stats, tensors)


def ensure_model_match(params: DenoiserParams, model):
    """Shape-compatibility gate between a checkpoint and a robot."""
    if params.dof != model.dof or params.n_ee != model.n_ee:
        raise DenoiserError(
            f"shape mismatch: checkpoint is ({params.dof} dof, {params.n_ee} ee), "
            f"robot '{model.name}' is ({model.dof} dof, {model.n_ee} ee)")
