import numpy as np
import pytest

import flowdistill as fd
from flowdistill.datagen import style_by_name
from flowdistill.distill import (
    DistillContext,
    PROB_CLAMP,
    RankWorker,
    StageConfig,
    adversarial_step,
    mse_distill_step,
    run_stage,
    stage_strides,
    stage_timesteps,
)
from flowdistill.nets import init_discriminator
from flowdistill.ranks import build_assignment


@pytest.fixture(scope="module")
def sched():
    return fd.build_schedule(128, 0.002, 0.0985703125)


@pytest.fixture(scope="module")
def dims():
    return fd.NetDims()


@pytest.fixture(scope="module")
def setup(sched, dims):
    rng = np.random.default_rng(0)
    base = fd.init_base(0, dims, rng)
    motion = fd.init_motion(dims, rng, out_scale=0.05)
    ds = fd.sample_ground_truth(style_by_name("default"), 512, 1,
                                frames=dims.frames, frame_dim=dims.frame_dim,
                                vocab=dims.vocab)
    return base, motion, ds


def _batch(ds, stage, sched, rng, n=8):
    grid = stage_timesteps(stage, sched.T)
    idx = rng.integers(0, len(ds.clips), n)
    return {
        "x0": ds.clips[idx].astype(np.float64),
        "tokens": ds.conditions[idx].astype(np.intp),
        "t": grid[rng.integers(0, len(grid), n)],
        "eps": rng.standard_normal((n, ds.clips.shape[1], ds.clips.shape[2])),
    }


def test_stage_config_validation():
    with pytest.raises(ValueError):
        StageConfig(8, 8, "mse_cfg", 1)
    with pytest.raises(ValueError):
        StageConfig(8, 3, "mse_cfg", 1)
    with pytest.raises(ValueError):
        StageConfig(8, 4, "nope", 1)
    with pytest.raises(ValueError):
        StageConfig(8, 4, "adversarial", 1, phase="sideways")


def test_plan_chaining_validation():
    good = fd.default_plan(5)
    assert [s.name for s in good.stages] == ["128to32", "32to8", "8to4", "4to2"]
    with pytest.raises(ValueError, match="chain"):
        fd.DistillPlan((StageConfig(128, 32, "mse_cfg", 1),
                        StageConfig(16, 8, "adversarial", 1)))


def test_stage_grids(sched):
    n, s = stage_strides(StageConfig(128, 32, "mse_cfg", 1), sched.T)
    assert (n, s) == (4, 1)
    grid = stage_timesteps(StageConfig(4, 2, "adversarial", 1), sched.T)
    assert sorted(grid.tolist()) == [63, 95, 127]
    grid = stage_timesteps(StageConfig(2, 1, "adversarial", 1), sched.T)
    assert grid.tolist() == [127]
    with pytest.raises(ValueError, match="divisible"):
        stage_strides(StageConfig(96, 32, "mse_cfg", 1), sched.T)


class _DegenerateStage(StageConfig):
    # Bypass validation to express the n = 1 corner (from == to), which the
    # plan invariants forbid but the loss identity is stated for.
    def __post_init__(self):
        pass


def test_mse_loss_zero_when_student_is_teacher_single_stride(sched, dims, setup):
    # Identical parameters and n = 1 make teacher and student the same
    # one-step map, so the loss is exactly zero.
    base, motion, ds = setup
    st = _DegenerateStage(32, 32, "mse_cfg", 1, cfg_scale=0.0)
    batch = _batch(ds, st, sched, np.random.default_rng(2))
    loss, grads = mse_distill_step(base, motion, motion, batch, st, sched, dims)
    assert loss == 0.0
    for key in grads:
        np.testing.assert_array_equal(grads[key], 0.0)


def test_mse_loss_nonnegative_generic(sched, dims, setup):
    base, motion, ds = setup
    st = StageConfig(32, 8, "mse_cfg", 1, cfg_scale=0.0)
    batch = _batch(ds, st, sched, np.random.default_rng(2))
    loss, grads = mse_distill_step(base, motion, motion, batch, st, sched, dims)
    assert loss > 0.0
    from flowdistill.nets import MOTION_KEYS
    assert set(grads) == set(MOTION_KEYS)


def test_mse_gradients_only_for_motion_and_base_untouched(sched, dims, setup):
    base, motion, ds = setup
    rng = np.random.default_rng(3)
    st = StageConfig(32, 8, "mse_cfg", 1, cfg_scale=7.5)
    before = {k: v.copy() for k, v in base.data.items()}
    batch = _batch(ds, st, sched, rng)
    loss, grads = mse_distill_step(base, motion, motion, batch, st, sched, dims)
    assert np.isfinite(loss) and loss >= 0.0
    from flowdistill.nets import MOTION_KEYS
    assert set(grads) == set(MOTION_KEYS)
    for key, val in base.data.items():
        assert np.array_equal(val, before[key])


def test_mse_target_detached_from_student(sched, dims, setup):
    # Gradients must treat the teacher trajectory as a constant: using the
    # same motion object for teacher and student must equal using a copy.
    base, motion, ds = setup
    rng = np.random.default_rng(4)
    st = StageConfig(32, 8, "mse_cfg", 1, cfg_scale=0.0)
    batch = _batch(ds, st, sched, rng)
    loss_a, grads_a = mse_distill_step(base, motion, motion, batch, st, sched, dims)
    loss_b, grads_b = mse_distill_step(base, motion.copy(), motion, batch, st, sched, dims)
    assert loss_a == loss_b
    for key in grads_a:
        assert np.array_equal(grads_a[key], grads_b[key]), key


def test_misaligned_timestep_rejected(sched, dims, setup):
    base, motion, ds = setup
    st = StageConfig(32, 8, "mse_cfg", 1)
    batch = _batch(ds, st, sched, np.random.default_rng(5), n=4)
    batch["t"] = np.array([126, 127, 127, 127])  # 126 not on the 32-step grid
    with pytest.raises(ValueError, match="misaligned"):
        mse_distill_step(base, motion, motion, batch, st, sched, dims)


def test_adversarial_losses_at_fresh_heads(sched, dims, setup):
    # Zero-initialised head output 0 -> p = 0.5 -> L_D = 2 ln 2, L_G = ln 2.
    base, motion, ds = setup
    disc = init_discriminator(dims, 1, np.random.default_rng(6),
                              backbone_from=fd.StudentBundle(base, motion))
    st = StageConfig(32, 8, "adversarial", 1, cfg_scale=0.0)
    batch = _batch(ds, st, sched, np.random.default_rng(7), n=16)
    from flowdistill.nets import MOTION_KEYS
    l_d, l_g, grads = adversarial_step(base, motion, motion, disc, batch, st,
                                       "trajectory_conditional", 0, sched, dims,
                                       side="disc")
    assert abs(l_d - 2 * np.log(2.0)) < 1e-3
    assert abs(l_g - np.log(2.0)) < 0.02
    assert set(grads) == set(disc.data)
    l_d2, l_g2, grads2 = adversarial_step(base, motion, motion, disc, batch, st,
                                          "relaxed", 0, sched, dims, side="student")
    assert abs(l_d2 - 2 * np.log(2.0)) < 1e-3
    assert set(grads2) == set(MOTION_KEYS)


def test_adversarial_probabilities_clamped(sched, dims, setup):
    # A huge head bias saturates the sigmoid; the loss must stay finite.
    base, motion, ds = setup
    disc = init_discriminator(dims, 1, np.random.default_rng(8),
                              backbone_from=fd.StudentBundle(base, motion))
    disc.data["hp2_b"] = np.array([60.0], dtype=np.float32)
    disc.data["hs2_b"] = np.array([-60.0], dtype=np.float32)
    st = StageConfig(32, 8, "adversarial", 1, cfg_scale=0.0)
    batch = _batch(ds, st, sched, np.random.default_rng(9), n=4)
    for phase in ("trajectory_conditional", "relaxed"):
        for side in ("disc", "student"):
            l_d, l_g, _ = adversarial_step(base, motion, motion, disc, batch, st,
                                           phase, 0, sched, dims, side=side)
            assert np.isfinite(l_d) and np.isfinite(l_g)
    assert np.isfinite(np.log(PROB_CLAMP))


def _tiny_ctx(sched, dims, seed=0, workers_mode="sequential", tmpdir=None):
    rng = np.random.default_rng(100)
    bases = {}
    datasets = {}
    for name in ("default", "real_a"):
        style = style_by_name(name)
        bases[name] = fd.init_base(style.style_id, dims, rng)
        datasets[name] = fd.sample_ground_truth(style, 256, style.style_id + 50,
                                                frames=dims.frames,
                                                frame_dim=dims.frame_dim,
                                                vocab=dims.vocab)
    motion = fd.init_motion(dims, rng, out_scale=0.05)
    assignment = build_assignment([
        {"rank": 0, "style": "default", "dataset": "real"},
        {"rank": 1, "style": "real_a", "dataset": "real"},
    ], known_datasets={"real"})
    workers = [
        RankWorker(assignment[0], bases["default"], datasets["default"], 0),
        RankWorker(assignment[1], bases["real_a"], datasets["real_a"], 1),
    ]
    ctx = DistillContext(sched=sched, dims=dims, workers=workers,
                         pretrained=fd.StudentBundle(bases["default"], motion),
                         seed=seed, worker_mode=workers_mode,
                         workdir=str(tmpdir) if tmpdir else None)
    return ctx, motion


def test_zero_iteration_stage_returns_input_unchanged(sched, dims):
    ctx, motion = _tiny_ctx(sched, dims)
    st = StageConfig(32, 8, "adversarial", 0, micro_batch=4, grad_accum=1)
    out, history = run_stage(st, ctx, motion)
    assert history == []
    for key in motion.data:
        assert np.array_equal(out.data[key], motion.data[key])


def test_run_stage_freezes_bases_and_produces_finite_history(sched, dims):
    ctx, motion = _tiny_ctx(sched, dims)
    before = [{k: v.copy() for k, v in w.base.data.items()} for w in ctx.workers]
    st = StageConfig(32, 8, "adversarial", 6, micro_batch=4, grad_accum=2)
    out, history = run_stage(st, ctx, motion)
    assert len(history) == 12  # two phases
    for rec in history:
        assert np.isfinite(rec["l_d"]) and np.isfinite(rec["l_g"])
    sides = [rec["side"] for rec in history[:6]]
    assert sides == ["disc", "student"] * 3
    for w, saved in zip(ctx.workers, before):
        for key, val in saved.items():
            assert np.array_equal(w.base.data[key], val)
    assert not np.array_equal(out.data["mix_out"], motion.data["mix_out"])


def test_run_stage_deterministic_and_thread_equivalent(sched, dims):
    st = StageConfig(32, 8, "adversarial", 4, micro_batch=4, grad_accum=2)
    outs = []
    for mode in ("sequential", "sequential", "threads"):
        ctx, motion = _tiny_ctx(sched, dims, workers_mode=mode)
        out, _ = run_stage(st, ctx, motion)
        outs.append(out.data["mix_out"].copy())
    assert np.array_equal(outs[0], outs[1])
    assert np.array_equal(outs[0], outs[2])


def test_progressive_promotes_teacher_and_checkpoints(sched, dims, tmp_path):
    ctx, motion = _tiny_ctx(sched, dims, tmpdir=tmp_path)
    plan = fd.DistillPlan((
        StageConfig(32, 8, "mse_cfg", 2, micro_batch=4, grad_accum=1, cfg_scale=7.5),
        StageConfig(8, 4, "adversarial", 2, micro_batch=4, grad_accum=1),
    ))
    final, per_stage, history = fd.run_progressive(plan, ctx, motion, config_hash="h")
    assert list(per_stage) == ["32to8", "8to4"]
    assert final is per_stage["8to4"]
    from flowdistill.checkpoint import checkpoint_load
    from flowdistill.nets import MOTION_KEYS as MK
    arrays, meta = checkpoint_load(tmp_path / "motion_32to8.ckpt", expect=MK)
    assert np.array_equal(arrays["mix"], per_stage["32to8"].data["mix"])
    assert meta["config_hash"] == "h"


def test_single_stage_plan_equals_run_stage(sched, dims):
    st = StageConfig(32, 8, "adversarial", 3, micro_batch=4, grad_accum=1)
    ctx1, motion1 = _tiny_ctx(sched, dims)
    direct, _ = run_stage(st, ctx1, motion1)
    ctx2, motion2 = _tiny_ctx(sched, dims)
    final, _, _ = fd.run_progressive(fd.DistillPlan((st,)), ctx2, motion2)
    assert np.array_equal(direct.data["mix"], final.data["mix"])


def test_nan_loss_aborts_with_dump(sched, dims, tmp_path, monkeypatch):
    ctx, motion = _tiny_ctx(sched, dims, tmpdir=tmp_path)
    st = StageConfig(32, 8, "mse_cfg", 3, micro_batch=4, grad_accum=1)

    import flowdistill.distill as dist

    def poisoned(*args, **kwargs):
        return float("nan"), {k: np.zeros_like(v, dtype=np.float64)
                               for k, v in motion.data.items()}

    monkeypatch.setattr(dist, "mse_distill_step", poisoned)
    with pytest.raises(fd.DistillDivergence) as err:
        run_stage(st, ctx, motion)
    assert err.value.dump_path is not None
    assert (tmp_path / "diverged_32to8.json").exists()
    assert (tmp_path / "diverged_32to8_motion.ckpt").exists()
