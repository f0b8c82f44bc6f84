"""Distillation losses and the progressive stage machine.

A stage teaches the student to cover ``n`` teacher strides in one step:
the teacher traverses ``n = from_steps / to_steps`` strides of
``s = T / from_steps`` timesteps while the student takes a single stride of
``n * s``. The first stage matches trajectories under mean squared error
with the teacher guided at scale 7.5; later stages train adversarially,
first with the trajectory-conditional discriminator head and then with the
relaxed single-pass head (fresh head, same backbone). After every stage the
student is promoted to teacher.

Training timesteps are drawn from the stage's source grid (the
``from_steps`` discretisation), restricted to points whose full student
stride stays inside the schedule, so every student jump is realisable by
the teacher.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .checkpoint import checkpoint_save
from .nets import (
    Adam,
    BASE_KEYS,
    MOTION_KEYS,
    DiscriminatorParams,
    MotionParams,
    StudentBundle,
    disc_pair_prob,
    disc_single_prob,
    init_discriminator,
    reset_single_head,
    student_eps,
)
from .ranks import (
    GradAccumulator,
    RankAssignment,
    ReductionSpec,
    accumulate_and_update,
    all_reduce_shared,
    run_ranks,
)
from .schedule import NoiseSchedule, add_noise, substitute_terminal_noise
from .solvers import euler_solve

__all__ = [
    "StageConfig",
    "DistillPlan",
    "default_plan",
    "RankWorker",
    "DistillContext",
    "DistillDivergence",
    "mse_distill_step",
    "adversarial_step",
    "run_stage",
    "run_progressive",
    "stage_strides",
    "stage_timesteps",
]

PROB_CLAMP = 1e-6

# Traversals during training clamp the predicted clean sample well outside
# the data range; scale-7.5 guidance diverges on a few trajectories without
# it. Teacher targets and the student's trained stride use the same clamp,
# so a student identical to its teacher at n = 1 reproduces it exactly.
# Inference-time sampling stays unclamped.
TEACHER_X0_CLIP = 4.0

LOSS_KINDS = ("mse_cfg", "adversarial")
PHASES = ("trajectory_conditional", "relaxed")


@dataclass(frozen=True)
class StageConfig:
    """One progressive stage (steps ``from_steps`` down to ``to_steps``)."""

    from_steps: int
    to_steps: int
    loss_kind: str
    iterations: int
    micro_batch: int = 16
    grad_accum: int = 4
    lr_student: float = 1e-3
    lr_disc: float = 2e-3
    cfg_scale: float = 0.0
    phase: str | None = None  # restricts an adversarial stage to one phase

    def __post_init__(self):
        if self.from_steps <= self.to_steps:
            raise ValueError("from_steps must exceed to_steps")
        if self.from_steps % self.to_steps != 0:
            raise ValueError("from_steps must be divisible by to_steps")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss_kind!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.micro_batch < 1 or self.grad_accum < 1:
            raise ValueError("micro_batch and grad_accum must be >= 1")
        if self.phase is not None and self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}")

    @property
    def name(self) -> str:
        return f"{self.from_steps}to{self.to_steps}"

    def phases(self) -> tuple:
        if self.loss_kind != "adversarial":
            return (None,)
        return (self.phase,) if self.phase is not None else PHASES


@dataclass(frozen=True)
class DistillPlan:
    """Chained stages: each stage's output step count feeds the next."""

    stages: tuple

    def __post_init__(self):
        if not self.stages:
            raise ValueError("empty plan")
        for a, b in zip(self.stages, self.stages[1:]):
            if a.to_steps != b.from_steps:
                raise ValueError(
                    f"broken chain: stage {a.name} feeds {b.name}")


def default_plan(iterations: int, micro_batch: int = 16, grad_accum: int = 4,
                 lr_student: float = 1e-3, lr_disc: float = 2e-3,
                 include_one_step: bool = False,
                 mse_iterations: int | None = None) -> DistillPlan:
    """128 -> 32 -> 8 -> 4 -> 2 (optionally -> 1, which is experimental:
    the one-step epsilon formulation is known to be noisy)."""
    common = dict(micro_batch=micro_batch, grad_accum=grad_accum,
                  lr_student=lr_student, lr_disc=lr_disc)
    stages = [
        StageConfig(128, 32, "mse_cfg", mse_iterations or iterations,
                    cfg_scale=7.5, **common),
        StageConfig(32, 8, "adversarial", iterations, **common),
        StageConfig(8, 4, "adversarial", iterations, **common),
        StageConfig(4, 2, "adversarial", iterations, **common),
    ]
    if include_one_step:
        stages.append(StageConfig(2, 1, "adversarial", iterations, **common))
    return DistillPlan(tuple(stages))


def stage_strides(stage: StageConfig, T: int) -> tuple:
    """(n, s): teacher takes n strides of s timesteps; student takes n*s."""
    if T % stage.from_steps != 0:
        raise ValueError(
            f"schedule length {T} is not divisible by from_steps {stage.from_steps}")
    s = T // stage.from_steps
    n = stage.from_steps // stage.to_steps
    return n, s


def stage_timesteps(stage: StageConfig, T: int) -> np.ndarray:
    """Source-grid timesteps whose full student stride fits the schedule."""
    n, s = stage_strides(stage, T)
    grid = T - 1 - s * np.arange(stage.from_steps)
    return grid[grid - n * s >= -1]


class DistillDivergence(RuntimeError):
    """Raised when a stage produces a non-finite loss; carries a dump path."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


@dataclass
class RankWorker:
    """One logical data-parallel worker: frozen base + dataset + flow index."""

    assignment: RankAssignment
    base: "BaseParams"
    dataset: "ClipDataset"
    flow_idx: int
    rng: np.random.Generator | None = None

    def draw_batch(self, stage: StageConfig, t_grid: np.ndarray) -> dict:
        rng = self.rng
        idx = rng.integers(0, len(self.dataset.clips), size=stage.micro_batch)
        x0 = self.dataset.clips[idx].astype(np.float64)
        tokens = self.dataset.conditions[idx].astype(np.intp)
        t = t_grid[rng.integers(0, len(t_grid), size=stage.micro_batch)]
        eps = rng.standard_normal(x0.shape)
        return {"x0": x0, "tokens": tokens, "t": t, "eps": eps}


@dataclass
class DistillContext:
    """Everything a stage needs besides the motion parameters."""

    sched: NoiseSchedule
    dims: "NetDims"
    workers: list
    pretrained: StudentBundle  # discriminator backbone initialiser
    seed: int
    worker_mode: str = "sequential"
    workdir: str | None = None

    @property
    def num_flows(self) -> int:
        return max(w.flow_idx for w in self.workers) + 1


def _predictor(base_data, motion_arrays, T, dims):
    def f(x, t, tokens):
        return student_eps(base_data, motion_arrays, x, t, tokens, T, dims)
    return f


def _prepare_inputs(batch, stage: StageConfig, sched: NoiseSchedule):
    n, s = stage_strides(stage, sched.T)
    t = np.asarray(batch["t"])
    allowed = stage_timesteps(stage, sched.T)
    if not np.all(np.isin(t, allowed)):
        raise ValueError(f"timesteps misaligned with stage {stage.name} grid")
    x_t = add_noise(batch["x0"], batch["eps"], t, sched)
    x_t = substitute_terminal_noise(x_t, batch["eps"], t, sched)
    return x_t, t, n, s


def mse_distill_step(base, teacher_motion, motion, batch, stage: StageConfig,
                     sched: NoiseSchedule, dims) -> tuple:
    """Trajectory-matching loss and motion gradients for one micro-batch.

    The teacher target is computed without a tape, so it is a detached
    constant; gradients exist only for the motion parameters.
    """
    x_t, t, n, s = _prepare_inputs(batch, stage, sched)
    tokens = batch["tokens"]
    teacher_f = _predictor(base.data, teacher_motion.data, sched.T, dims)
    target = euler_solve(teacher_f, x_t, t, tokens, n, s, sched,
                         w=stage.cfg_scale, null_token=dims.null_token,
                         x0_clip=TEACHER_X0_CLIP)
    mvars = {k: ad.Var(motion.data[k]) for k in MOTION_KEYS}
    student_f = _predictor(base.data, mvars, sched.T, dims)
    pred = euler_solve(student_f, x_t, t, tokens, 1, n * s, sched, w=0.0,
                       x0_clip=TEACHER_X0_CLIP)
    loss = ad.mean_all(ad.square(pred - target))
    ad.backward(loss)
    grads = {k: mvars[k].grad for k in MOTION_KEYS}
    return float(loss.value), grads


def _nonsat_losses(p_real, p_fake):
    lo, hi = PROB_CLAMP, 1.0 - PROB_CLAMP
    l_d = -ad.mean_all(ad.log(ad.clamp(p_real, lo, hi))) \
        - ad.mean_all(ad.log(1.0 - ad.clamp(p_fake, lo, hi)))
    l_g = -ad.mean_all(ad.log(ad.clamp(p_fake, lo, hi)))
    return l_d, l_g


def adversarial_step(base, teacher_motion, motion, disc: DiscriminatorParams,
                     batch, stage: StageConfig, phase: str, flow_idx: int,
                     sched: NoiseSchedule, dims, side: str) -> tuple:
    """Non-saturating adversarial losses for one micro-batch.

    ``side`` selects which parameters receive gradients this iteration:
    the discriminator sees the student's stride as a detached sample, the
    student differentiates through the (frozen this iteration)
    discriminator. Returns (l_d, l_g, grads).
    """
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    x_t, t, n, s = _prepare_inputs(batch, stage, sched)
    tokens = batch["tokens"]
    t_next = t - n * s

    teacher_f = _predictor(base.data, teacher_motion.data, sched.T, dims)
    real_next = euler_solve(teacher_f, x_t, t, tokens, n, s, sched,
                            w=stage.cfg_scale, null_token=dims.null_token,
                            x0_clip=TEACHER_X0_CLIP)

    def pair_prob(disc_arrays, x_next):
        if phase == "trajectory_conditional":
            return disc_pair_prob(disc_arrays, x_t, x_next, t, t_next, tokens,
                                  flow_idx, sched.T, dims, disc.num_flows)
        return disc_single_prob(disc_arrays, x_next, t_next, tokens, flow_idx,
                                sched.T, dims, disc.num_flows)

    if side == "disc":
        student_f = _predictor(base.data, motion.data, sched.T, dims)
        fake_next = euler_solve(student_f, x_t, t, tokens, 1, n * s, sched,
                                w=0.0, x0_clip=TEACHER_X0_CLIP)
        dvars = {k: ad.Var(disc.data[k]) for k in disc.data}
        p_real = pair_prob(dvars, real_next)
        p_fake = pair_prob(dvars, fake_next)
        l_d, l_g = _nonsat_losses(p_real, p_fake)
        ad.backward(l_d)
        grads = {k: (dvars[k].grad if dvars[k].grad is not None
                     else np.zeros_like(disc.data[k], dtype=np.float64))
                 for k in dvars}
        return float(l_d.value), float(ad.value_of(l_g)), grads

    if side == "student":
        mvars = {k: ad.Var(motion.data[k]) for k in MOTION_KEYS}
        student_f = _predictor(base.data, mvars, sched.T, dims)
        fake_next = euler_solve(student_f, x_t, t, tokens, 1, n * s, sched,
                                w=0.0, x0_clip=TEACHER_X0_CLIP)
        p_fake = pair_prob(disc.data, fake_next)
        p_real = pair_prob(disc.data, real_next)
        l_d, l_g = _nonsat_losses(p_real, p_fake)
        ad.backward(l_g)
        grads = {k: mvars[k].grad for k in MOTION_KEYS}
        return float(ad.value_of(l_d)), float(l_g.value), grads

    raise ValueError(f"unknown side {side!r}")


def rank_micro_step(worker: RankWorker, motion, teacher_motion, disc,
                    stage: StageConfig, phase, side: str,
                    sched: NoiseSchedule, dims, t_grid) -> tuple:
    """One rank's gradient contribution plus its local losses.

    Gradients are emitted only for the side being updated; base parameters
    never receive an entry.
    """
    batch = worker.draw_batch(stage, t_grid)
    if stage.loss_kind == "mse_cfg":
        loss, grads = mse_distill_step(worker.base, teacher_motion, motion,
                                       batch, stage, sched, dims)
        return grads, {"mse": loss}
    l_d, l_g, grads = adversarial_step(worker.base, teacher_motion, motion,
                                       disc, batch, stage, phase,
                                       worker.flow_idx, sched, dims, side)
    return grads, {"l_d": l_d, "l_g": l_g}


def _dump_diagnostics(ctx: DistillContext, stage: StageConfig, phase, iteration,
                      motion, disc, losses) -> str | None:
    if ctx.workdir is None:
        return None
    os.makedirs(ctx.workdir, exist_ok=True)
    path = os.path.join(ctx.workdir, f"diverged_{stage.name}.json")
    state = {
        "stage": stage.name,
        "phase": phase,
        "iteration": iteration,
        "losses": losses,
    }
    with open(path, "w") as fh:
        json.dump(state, fh, indent=2)
    checkpoint_save(dict(motion.data),
                    os.path.join(ctx.workdir, f"diverged_{stage.name}_motion.ckpt"))
    if disc is not None:
        checkpoint_save(dict(disc.data),
                        os.path.join(ctx.workdir, f"diverged_{stage.name}_disc.ckpt"))
    return path


def _stage_rng(seed: int, stage: StageConfig, phase_idx: int, *tail) -> np.random.Generator:
    return np.random.default_rng(
        [seed, stage.from_steps, stage.to_steps, phase_idx, *tail])


def _motion_spec(ctx: DistillContext) -> ReductionSpec:
    order = tuple(w.assignment.rank for w in ctx.workers)
    return ReductionSpec(MOTION_KEYS, BASE_KEYS, order)


def _disc_spec(ctx: DistillContext, disc: DiscriminatorParams) -> ReductionSpec:
    # Every discriminator parameter syncs across ranks; flow embedding rows
    # simply receive zero gradient from ranks assigned to other flows.
    order = tuple(w.assignment.rank for w in ctx.workers)
    return ReductionSpec(tuple(disc.data.keys()), (), order)


def _run_phase(stage: StageConfig, phase, ctx: DistillContext,
               motion: MotionParams, teacher_motion: MotionParams,
               disc, history: list) -> None:
    phase_idx = 0 if phase in (None, PHASES[0]) else 1
    for w in ctx.workers:
        w.rng = _stage_rng(ctx.seed, stage, phase_idx, w.assignment.rank)
    t_grid = stage_timesteps(stage, ctx.sched.T)
    opt_student = Adam(stage.lr_student)
    opt_disc = Adam(stage.lr_disc) if disc is not None else None
    motion_spec = _motion_spec(ctx)
    disc_spec = _disc_spec(ctx, disc) if disc is not None else None

    for it in range(stage.iterations):
        if stage.loss_kind == "mse_cfg":
            side = "student"
        else:
            side = "disc" if it % 2 == 0 else "student"
        accum = GradAccumulator(stage.grad_accum)
        step_losses: list = []
        for _ in range(stage.grad_accum):
            results = run_ranks(
                lambda w: rank_micro_step(w, motion, teacher_motion, disc,
                                          stage, phase, side, ctx.sched,
                                          ctx.dims, t_grid),
                ctx.workers, ctx.worker_mode)
            reduced = all_reduce_shared(
                [grads for grads, _ in results],
                motion_spec if side == "student" else disc_spec)
            accum.add(reduced)
            step_losses.extend(loss for _, loss in results)
        mean_losses = {k: float(np.mean([d[k] for d in step_losses]))
                       for k in step_losses[0]}
        if not all(np.isfinite(v) for v in mean_losses.values()):
            dump = _dump_diagnostics(ctx, stage, phase, it, motion, disc, mean_losses)
            raise DistillDivergence(
                f"non-finite loss at stage {stage.name} iteration {it}", dump)
        if side == "student":
            accumulate_and_update(opt_student, motion.data, accum)
        else:
            accumulate_and_update(opt_disc, disc.data, accum)
        history.append({"stage": stage.name, "phase": phase or "mse",
                        "iteration": it, "side": side, **mean_losses})


def run_stage(stage: StageConfig, ctx: DistillContext,
              teacher_motion: MotionParams) -> tuple:
    """Train one stage; returns (distilled motion, per-iteration history).

    Adversarial stages run the trajectory-conditional phase and then the
    relaxed phase with a fresh relaxed head on the trained backbone.
    """
    motion = teacher_motion.copy()
    history: list = []
    if stage.loss_kind == "mse_cfg":
        _run_phase(stage, None, ctx, motion, teacher_motion, None, history)
        return motion, history

    disc = init_discriminator(ctx.dims, ctx.num_flows,
                              _stage_rng(ctx.seed, stage, 0, 104729),
                              backbone_from=ctx.pretrained)
    for phase in stage.phases():
        if phase == "relaxed":
            reset_single_head(disc, _stage_rng(ctx.seed, stage, 1, 104729))
        _run_phase(stage, phase, ctx, motion, teacher_motion, disc, history)
    return motion, history


def run_progressive(plan: DistillPlan, ctx: DistillContext,
                    init_motion: MotionParams, config_hash: str = "") -> tuple:
    """Run all stages, promoting each student to teacher.

    Returns (final motion, {stage name: motion}, history). When the context
    has a workdir, per-stage checkpoints are written there.
    """
    teacher = init_motion
    per_stage: dict = {}
    history: list = []
    for stage in plan.stages:
        motion, stage_hist = run_stage(stage, ctx, teacher)
        history.extend(stage_hist)
        per_stage[stage.name] = motion
        if ctx.workdir is not None:
            os.makedirs(ctx.workdir, exist_ok=True)
            checkpoint_save(
                dict(motion.data),
                os.path.join(ctx.workdir, f"motion_{stage.name}.ckpt"),
                meta={"stage": stage.name, "seed": ctx.seed,
                      "config_hash": config_hash or "unset"})
        teacher = motion
    return teacher, per_stage, history
