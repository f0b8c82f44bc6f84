"""Differentiable networks: frozen per-frame base models, the shared
temporal motion module, their composition, and the flow-conditional
discriminator.

Architecture at desk scale:

* Base model: a per-frame two-hidden-layer network. The first hidden state
  receives a projected sinusoidal time embedding and a learned condition
  embedding; frames never interact inside the base model.
* Motion module: one residual temporal-mixing block inserted after the
  base's first hidden layer. The block mixes hidden channels across frames
  (a full frames-by-frames learned matrix per channel), adds its own
  projections of the time features and the condition token, applies the
  nonlinearity, and mixes across frames again before the residual add.
  The output mixing matrices start at zero, so a freshly initialised
  composition reproduces the base model bit-exactly.
* Discriminator: the same encoder shape as the student (through the second
  hidden layer), made flow-conditional by adding a learned per-flow
  embedding to the time embedding, plus two fully connected heads. The
  pair head consumes the channel-concatenated features of two independent
  backbone passes; the single head consumes one pass.

Parameters are stored as float32 arrays (the checkpoint element type) and
upcast to float64 inside every forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .schedule import NoiseSchedule, add_noise, substitute_terminal_noise

__all__ = [
    "NetDims",
    "BaseParams",
    "MotionParams",
    "StudentBundle",
    "DiscriminatorParams",
    "forward_student",
    "forward_disc_conditional",
    "forward_disc_relaxed",
    "student_eps",
    "disc_pair_prob",
    "disc_single_prob",
    "Adam",
    "pretrain_base",
    "pretrain_motion",
]

BASE_KEYS = ("w1", "b1", "time_w", "cond_emb", "w2", "b2", "w3", "b3")
MOTION_KEYS = ("mix", "tproj", "cproj", "mix_out")
DISC_BACKBONE_KEYS = ("w1", "b1", "time_w", "cond_emb", "w2", "b2") + MOTION_KEYS
DISC_HEAD_PAIR_KEYS = ("hp1_w", "hp1_b", "hp2_w", "hp2_b")
DISC_HEAD_SINGLE_KEYS = ("hs1_w", "hs1_b", "hs2_w", "hs2_b")


@dataclass(frozen=True)
class NetDims:
    """Shared width configuration for every network in a run."""

    frames: int = 8
    frame_dim: int = 2
    hidden: int = 16
    time_dim: int = 16
    head_hidden: int = 32
    vocab: int = 8  # condition tokens 0..vocab-1; vocab itself is the null token

    @property
    def null_token(self) -> int:
        return self.vocab


def _f32(arrs: dict) -> dict:
    return {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in arrs.items()}


@dataclass
class BaseParams:
    """Frozen per-frame base model for one style."""

    style_id: int
    dims: NetDims
    data: dict = field(repr=False)

    def copy(self) -> "BaseParams":
        return BaseParams(self.style_id, self.dims, {k: v.copy() for k, v in self.data.items()})


@dataclass
class MotionParams:
    """Shared trainable temporal-mixing parameters."""

    dims: NetDims
    data: dict = field(repr=False)

    def copy(self) -> "MotionParams":
        return MotionParams(self.dims, {k: v.copy() for k, v in self.data.items()})


@dataclass
class StudentBundle:
    """Composition of a frozen base model with the shared motion module."""

    base: BaseParams
    motion: MotionParams

    @property
    def dims(self) -> NetDims:
        return self.base.dims


@dataclass
class DiscriminatorParams:
    """Flow-conditional discriminator: shared backbone plus two heads."""

    dims: NetDims
    num_flows: int
    data: dict = field(repr=False)

    def copy(self) -> "DiscriminatorParams":
        return DiscriminatorParams(self.dims, self.num_flows,
                                   {k: v.copy() for k, v in self.data.items()})


def init_base(style_id: int, dims: NetDims, rng: np.random.Generator) -> BaseParams:
    d, h, e, v = dims.frame_dim, dims.hidden, dims.time_dim, dims.vocab
    scale = 1.0
    data = {
        "w1": rng.normal(0.0, scale / np.sqrt(d), (d, h)),
        "b1": np.zeros(h),
        "time_w": rng.normal(0.0, scale / np.sqrt(e), (e, h)),
        "cond_emb": rng.normal(0.0, 0.1, (v + 1, h)),
        "w2": rng.normal(0.0, scale / np.sqrt(h), (h, h)),
        "b2": np.zeros(h),
        "w3": rng.normal(0.0, scale / np.sqrt(h), (h, d)),
        "b3": np.zeros(d),
    }
    return BaseParams(style_id, dims, _f32(data))


def init_motion(dims: NetDims, rng: np.random.Generator | None = None,
                out_scale: float = 0.0) -> MotionParams:
    """Motion block with zero output mixing by default (base-only start).

    The inner layers are always non-zero so gradients reach every motion
    parameter from the first step.
    """
    rng = rng if rng is not None else np.random.default_rng(1729)
    h, f, e, v = dims.hidden, dims.frames, dims.time_dim, dims.vocab
    mix_out = (rng.normal(0.0, out_scale, (h, f, f)) if out_scale > 0.0
               else np.zeros((h, f, f)))
    return MotionParams(dims, _f32({
        "mix": rng.normal(0.0, 0.3, (h, f, f)),
        "tproj": rng.normal(0.0, 0.3, (e, h)),
        "cproj": rng.normal(0.0, 0.3, (v + 1, h)),
        "mix_out": mix_out,
    }))


# Final head layers start near (not exactly at) zero: pre-sigmoid scores of
# a few 1e-2 keep the first logged discriminator loss within 1e-3 of
# 2*ln(2) while letting gradients reach the earlier layers immediately.
HEAD_OUT_INIT = 0.001


def init_discriminator(dims: NetDims, num_flows: int, rng: np.random.Generator,
                       backbone_from: StudentBundle | None = None) -> DiscriminatorParams:
    """Backbone copied from a pretrained student; heads start near zero."""
    h, e, f = dims.hidden, dims.time_dim, dims.frames
    g = dims.head_hidden
    if backbone_from is not None:
        bdata = {k: backbone_from.base.data[k].copy()
                 for k in DISC_BACKBONE_KEYS if k not in MOTION_KEYS}
        bdata.update({k: backbone_from.motion.data[k].copy() for k in MOTION_KEYS})
    else:
        tmp = init_base(-1, dims, rng)
        bdata = {k: tmp.data[k] for k in DISC_BACKBONE_KEYS if k not in MOTION_KEYS}
        bdata.update(init_motion(dims, rng).data)
    data = dict(bdata)
    data["flow_emb"] = np.zeros((num_flows, e), dtype=np.float32)
    data.update(_f32({
        "hp1_w": rng.normal(0.0, 1.0 / np.sqrt(2 * h * f), (2 * h * f, g)),
        "hp1_b": np.zeros(g),
        "hp2_w": rng.normal(0.0, HEAD_OUT_INIT, (g, 1)),
        "hp2_b": np.zeros(1),
        "hs1_w": rng.normal(0.0, 1.0 / np.sqrt(h * f), (h * f, g)),
        "hs1_b": np.zeros(g),
        "hs2_w": rng.normal(0.0, HEAD_OUT_INIT, (g, 1)),
        "hs2_b": np.zeros(1),
    }))
    return DiscriminatorParams(dims, num_flows, data)


def reset_single_head(disc: DiscriminatorParams, rng: np.random.Generator) -> None:
    """Fresh single-pass head; the trained backbone is kept."""
    h, f, g = disc.dims.hidden, disc.dims.frames, disc.dims.head_hidden
    disc.data["hs1_w"] = np.ascontiguousarray(
        rng.normal(0.0, 1.0 / np.sqrt(h * f), (h * f, g)), dtype=np.float32)
    disc.data["hs1_b"] = np.zeros(g, dtype=np.float32)
    disc.data["hs2_w"] = np.ascontiguousarray(
        rng.normal(0.0, HEAD_OUT_INIT, (g, 1)), dtype=np.float32)
    disc.data["hs2_b"] = np.zeros(1, dtype=np.float32)


# -- time and condition features ----------------------------------------


@lru_cache(maxsize=8)
def _sinusoid_table(T: int, dim: int) -> np.ndarray:
    """Sinusoidal features for integer timesteps -1..T-1, indexed by t + 1."""
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    t = np.arange(-1, T, dtype=np.float64)
    ang = t[:, None] * freqs[None, :]
    table = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    table.setflags(write=False)
    return table


def time_features(t, T: int, dim: int) -> np.ndarray:
    """(B, dim) or (dim,) sinusoidal embedding of integer timesteps."""
    return _sinusoid_table(T, dim)[np.asarray(t) + 1]


def _check_tokens(tokens, dims: NetDims):
    tokens = np.asarray(tokens)
    if np.any(tokens < 0) or np.any(tokens > dims.vocab):
        raise ValueError(f"unknown condition token (vocab={dims.vocab}, null={dims.vocab})")
    return tokens


# -- forward passes ------------------------------------------------------


def _expand_frame_axis(v):
    return ad.reshape(v, (ad.value_of(v).shape[0], 1, -1))


def _encode(params, x, tfeat, tokens, motion):
    """Shared encoder: per-frame affine + embeddings, motion block, layer 2.

    `params`/`motion` values may be Var or ndarray; `x` may be Var or
    ndarray; `tfeat` may be Var (discriminator flow conditioning).
    Returns (B, F, hidden) features.
    """
    temb = _expand_frame_axis(ad.matmul(tfeat, params["time_w"]))
    cemb = _expand_frame_axis(ad.take_rows(params["cond_emb"], tokens))
    h = ad.matmul(x, params["w1"]) + params["b1"] + temb + cemb
    h = ad.silu(h)
    if motion is not None:
        z = ad.temporal_mix(motion["mix"], h)
        z = z + _expand_frame_axis(ad.matmul(tfeat, motion["tproj"]))
        z = ad.silu(z + _expand_frame_axis(ad.take_rows(motion["cproj"], tokens)))
        h = h + ad.temporal_mix(motion["mix_out"], z)
    return ad.silu(ad.matmul(h, params["w2"]) + params["b2"])


def student_eps(base_arrays, motion_arrays, x, t, tokens, T: int, dims: NetDims):
    """Noise prediction of the composed model. Accepts Var or ndarray params.

    x: (B, F, D); t: scalar or (B,) ints; tokens: (B,) ints.
    """
    tokens = _check_tokens(tokens, dims)
    tfeat = time_features(t, T, dims.time_dim)
    if tfeat.ndim == 1:
        tfeat = np.broadcast_to(tfeat, (ad.value_of(x).shape[0], dims.time_dim))
    h = _encode(base_arrays, x, tfeat, tokens, motion_arrays)
    return ad.matmul(h, base_arrays["w3"]) + base_arrays["b3"]


def forward_student(bundle: StudentBundle, x_t, t, tokens, sched: NoiseSchedule):
    """Inference-mode noise prediction as a plain float64 array."""
    x_t = np.asarray(x_t, dtype=np.float64)
    squeeze = x_t.ndim == 2
    if squeeze:
        x_t = x_t[None]
    tokens = np.atleast_1d(np.asarray(tokens))
    out = student_eps(bundle.base.data, bundle.motion.data, x_t, t, tokens,
                      sched.T, bundle.dims)
    return out[0] if squeeze else out


def _disc_features(disc_arrays, x, t, tokens, flow_idx, T: int, dims: NetDims):
    tfeat = np.asarray(time_features(t, T, dims.time_dim), dtype=np.float64)
    if tfeat.ndim == 1:
        tfeat = np.broadcast_to(tfeat, (ad.value_of(x).shape[0], dims.time_dim))
    flow_rows = ad.take_rows(disc_arrays["flow_emb"],
                             np.full(ad.value_of(x).shape[0], flow_idx, dtype=np.intp))
    tfeat = flow_rows + tfeat
    motion = {k: disc_arrays[k] for k in MOTION_KEYS}
    h = _encode(disc_arrays, x, tfeat, tokens, motion)
    return ad.reshape(h, (ad.value_of(h).shape[0], dims.frames * dims.hidden))


def _head(arrays, feats, w1, b1, w2, b2):
    z = ad.silu(ad.matmul(feats, arrays[w1]) + arrays[b1])
    score = ad.matmul(z, arrays[w2]) + arrays[b2]
    return ad.reshape(score, (ad.value_of(score).shape[0],))


def disc_pair_prob(disc_arrays, x_t, x_next, t, t_next, tokens, flow_idx,
                   T: int, dims: NetDims, num_flows: int):
    """Probability that (x_t -> x_next) is a teacher transition.

    Two independent backbone passes share parameters; their features are
    concatenated along the channel axis before the pair head.
    """
    if not (0 <= flow_idx < num_flows):
        raise ValueError(f"unregistered flow index {flow_idx}")
    tokens = _check_tokens(tokens, dims)
    f_next = _disc_features(disc_arrays, x_next, t_next, tokens, flow_idx, T, dims)
    f_cur = _disc_features(disc_arrays, x_t, t, tokens, flow_idx, T, dims)
    feats = ad.concat_last([f_next, f_cur])
    score = _head(disc_arrays, feats, "hp1_w", "hp1_b", "hp2_w", "hp2_b")
    return ad.sigmoid(score)


def disc_single_prob(disc_arrays, x_next, t_next, tokens, flow_idx,
                     T: int, dims: NetDims, num_flows: int):
    """Probability from the relaxed (single-pass) head."""
    if not (0 <= flow_idx < num_flows):
        raise ValueError(f"unregistered flow index {flow_idx}")
    tokens = _check_tokens(tokens, dims)
    feats = _disc_features(disc_arrays, x_next, t_next, tokens, flow_idx, T, dims)
    score = _head(disc_arrays, feats, "hs1_w", "hs1_b", "hs2_w", "hs2_b")
    return ad.sigmoid(score)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 2 else (x, False)


def forward_disc_conditional(disc: DiscriminatorParams, x_t, x_next, t, t_next,
                             tokens, flow_idx: int, sched: NoiseSchedule):
    """Inference-mode trajectory-conditional discriminator probability."""
    if not np.all(np.asarray(t_next) < np.asarray(t)):
        raise ValueError("t_next must precede t")
    x_t, squeeze = _as_batch(x_t)
    x_next, _ = _as_batch(x_next)
    tokens = np.atleast_1d(np.asarray(tokens))
    p = disc_pair_prob(disc.data, x_t, x_next, t, t_next, tokens, flow_idx,
                       sched.T, disc.dims, disc.num_flows)
    return float(p[0]) if squeeze else p


def forward_disc_relaxed(disc: DiscriminatorParams, x_next, t_next, tokens,
                         flow_idx: int, sched: NoiseSchedule):
    """Inference-mode relaxed discriminator probability."""
    x_next, squeeze = _as_batch(x_next)
    tokens = np.atleast_1d(np.asarray(tokens))
    p = disc_single_prob(disc.data, x_next, t_next, tokens, flow_idx,
                         sched.T, disc.dims, disc.num_flows)
    return float(p[0]) if squeeze else p


# -- optimisation --------------------------------------------------------


class Adam:
    """Adam with float64 moments; parameters are stored back as float32."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name in sorted(grads):
            g = np.asarray(grads[name], dtype=np.float64)
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            new = params[name].astype(np.float64) - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            params[name] = new.astype(np.float32)


# -- pretraining ---------------------------------------------------------


def _denoise_loss(base_arrays, motion_arrays, x0, tokens, t, eps, sched, dims):
    x_t = add_noise(x0, eps, t, sched)
    x_t = substitute_terminal_noise(x_t, eps, t, sched)
    pred = student_eps(base_arrays, motion_arrays, x_t, t, tokens, sched.T, dims)
    return ad.mean_all(ad.square(pred - eps))


def _draw_batch(dataset, batch: int, rng: np.random.Generator, dims: NetDims,
                sched: NoiseSchedule, cond_dropout: float):
    idx = rng.integers(0, len(dataset.clips), size=batch)
    x0 = dataset.clips[idx].astype(np.float64)
    tokens = dataset.conditions[idx].astype(np.intp)
    if cond_dropout > 0.0:
        drop = rng.random(batch) < cond_dropout
        tokens = np.where(drop, dims.null_token, tokens)
    t = rng.integers(0, sched.T, size=batch)
    eps = rng.standard_normal(x0.shape)
    return x0, tokens, t, eps


def _decayed(lr: float, step: int, steps: int) -> float:
    # Exponential decay to lr / 10 over the run; flattens the late loss.
    return lr * 0.1 ** (step / max(steps - 1, 1))


def pretrain_base(dataset, sched: NoiseSchedule, dims: NetDims, style_id: int,
                  steps: int, seed, lr: float = 3e-3, batch: int = 128,
                  cond_dropout: float = 0.15):
    """Denoising pretraining of one frozen-to-be base model.

    Returns (params, loss_history).
    """
    if len(dataset.clips) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(seed)
    base = init_base(style_id, dims, rng)
    opt = Adam(lr)
    history = []
    for step in range(steps):
        x0, tokens, t, eps = _draw_batch(dataset, batch, rng, dims, sched, cond_dropout)
        pvars = {k: ad.Var(base.data[k]) for k in BASE_KEYS}
        loss = _denoise_loss(pvars, None, x0, tokens, t, eps, sched, dims)
        ad.backward(loss)
        opt.lr = _decayed(lr, step, steps)
        opt.step(base.data, {k: pvars[k].grad for k in BASE_KEYS})
        history.append(float(loss.value))
    return base, history


def pretrain_motion(base: BaseParams, dataset, sched: NoiseSchedule,
                    steps: int, seed, lr: float = 3e-3, batch: int = 128,
                    cond_dropout: float = 0.15):
    """Train the temporal module against correlated clips; base stays frozen.

    Returns (motion, loss_history).
    """
    if len(dataset.clips) == 0:
        raise ValueError("empty dataset")
    dims = base.dims
    rng = np.random.default_rng(seed)
    motion = init_motion(dims, rng)
    opt = Adam(lr)
    history = []
    for step in range(steps):
        x0, tokens, t, eps = _draw_batch(dataset, batch, rng, dims, sched, cond_dropout)
        mvars = {k: ad.Var(motion.data[k]) for k in MOTION_KEYS}
        loss = _denoise_loss(base.data, mvars, x0, tokens, t, eps, sched, dims)
        ad.backward(loss)
        opt.lr = _decayed(lr, step, steps)
        opt.step(motion.data, {k: mvars[k].grad for k in MOTION_KEYS})
        history.append(float(loss.value))
    return motion, history
