"""End-to-end workflows over a run directory.

Layout of a workspace::

    <root>/
      checkpoints/base_<style>.ckpt      pretrained per-style base models
      checkpoints/motion_pretrained.ckpt pretrained shared motion module
      checkpoints/<arm>/motion_<stage>.ckpt   distilled per-stage outputs
      data/<name>.ds                     training datasets
      reports/*.csv, *.json              evaluation outputs

Every checkpoint records the config hash; loading under a different
configuration is an error.
"""
from __future__ import annotations

import os

import numpy as np

from .checkpoint import checkpoint_load, checkpoint_save
from .config import config_hash, dims_from_config, plan_from_config, schedule_from_config
from .datagen import (
    ClipDataset,
    STYLES,
    flip_augment,
    generate_distill_dataset,
    load_dataset,
    pool_by_group,
    sample_ground_truth,
    save_dataset,
    style_by_name,
)
from .distill import DistillContext, RankWorker, run_progressive
from .nets import (
    BASE_KEYS,
    BaseParams,
    MOTION_KEYS,
    MotionParams,
    StudentBundle,
    pretrain_base,
    pretrain_motion,
)
from .ranks import build_assignment
from .evalmetrics import EvalReport, run_cross_ablation, run_main_comparison

__all__ = [
    "Workspace",
    "STEP_TO_STAGE",
]

# Which stage output serves each inference step count.
STEP_TO_STAGE = {32: "128to32", 8: "32to8", 4: "8to4", 2: "4to2", 1: "2to1"}

_DATASET_BUILDS = {
    "real": ("default",),
    "gen_realistic": ("real_a", "real_b"),
    "gen_anime": ("anime_a", "anime_b", "anime_c"),
}


class Workspace:
    """Caches pretrained models, datasets, and distilled checkpoints."""

    def __init__(self, cfg: dict, root: str):
        self.cfg = cfg
        self.root = root
        self.hash = config_hash(cfg)
        self.sched = schedule_from_config(cfg)
        self.dims = dims_from_config(cfg)
        os.makedirs(os.path.join(root, "checkpoints"), exist_ok=True)
        os.makedirs(os.path.join(root, "data"), exist_ok=True)
        os.makedirs(os.path.join(root, "reports"), exist_ok=True)

    # -- paths ----------------------------------------------------------

    def ckpt_path(self, name: str, arm: str | None = None) -> str:
        parts = [self.root, "checkpoints"]
        if arm:
            parts.append(arm)
        return os.path.join(*parts, f"{name}.ckpt")

    def data_path(self, name: str) -> str:
        return os.path.join(self.root, "data", f"{name}.ds")

    def report_path(self, name: str) -> str:
        return os.path.join(self.root, "reports", name)

    def _check_hash(self, meta: dict, path: str) -> None:
        if meta.get("config_hash") not in (None, "unset", self.hash):
            raise ValueError(
                f"{path}: checkpoint was produced under config "
                f"{meta.get('config_hash')}, current config is {self.hash}")

    def _save_params(self, data: dict, path: str, **meta) -> None:
        os.makedirs(os.path.dirname(path), exist_ok=True)
        checkpoint_save(dict(data), path, meta={"config_hash": self.hash, **meta})

    # -- pretraining ------------------------------------------------------

    def ground_truth(self, style_name: str, n: int | None = None) -> ClipDataset:
        style = style_by_name(style_name)
        n = n or self.cfg["data"]["ground_truth_clips"]
        return sample_ground_truth(style, n, self._seed("gt", style.style_id),
                                   frames=self.dims.frames,
                                   frame_dim=self.dims.frame_dim,
                                   vocab=self.dims.vocab)

    def _seed(self, tag: str, *extra) -> list:
        tags = {"gt": 11, "gen": 13, "base": 17, "motion": 19, "distill": 23}
        return [self.cfg["seed"], tags[tag], *extra]

    def pretrain_bases(self, styles=None, progress=None) -> dict:
        """Pretrain (or load cached) base models for the given styles."""
        pt = self.cfg["pretrain"]
        out = {}
        for style in styles or [s.name for s in STYLES]:
            spec = style_by_name(style)
            path = self.ckpt_path(f"base_{style}")
            if os.path.exists(path):
                arrays, meta = checkpoint_load(path, expect=BASE_KEYS)
                self._check_hash(meta, path)
                out[style] = BaseParams(spec.style_id, self.dims, arrays)
                continue
            if progress:
                progress(f"pretraining base model for style {style}")
            ds = self.ground_truth(style)
            base, _ = pretrain_base(ds, self.sched, self.dims, spec.style_id,
                                    pt["base_steps"],
                                    self._seed("base", spec.style_id),
                                    lr=pt["lr"], batch=pt["batch"],
                                    cond_dropout=pt["cond_dropout"])
            self._save_params(base.data, path, style=style)
            out[style] = base
        return out

    def pretrain_shared_motion(self, default_base: BaseParams, progress=None) -> MotionParams:
        path = self.ckpt_path("motion_pretrained")
        if os.path.exists(path):
            arrays, meta = checkpoint_load(path, expect=MOTION_KEYS)
            self._check_hash(meta, path)
            return MotionParams(self.dims, arrays)
        if progress:
            progress("pretraining shared motion module")
        pt = self.cfg["pretrain"]
        ds = self.ground_truth("default")
        motion, _ = pretrain_motion(default_base, ds, self.sched,
                                    pt["motion_steps"], self._seed("motion"),
                                    lr=pt["lr"], batch=pt["batch"],
                                    cond_dropout=pt["cond_dropout"])
        self._save_params(motion.data, path)
        return motion

    def pretrained_bundles(self, styles=None, progress=None) -> dict:
        bases = self.pretrain_bases(styles, progress=progress)
        motion = self.pretrain_shared_motion(
            bases.get("default") or self.pretrain_bases(["default"])["default"],
            progress=progress)
        return {name: StudentBundle(base, motion) for name, base in bases.items()}

    # -- datasets ---------------------------------------------------------

    def build_datasets(self, bundles: dict, progress=None) -> dict:
        """Training datasets keyed by the rank table's dataset ids."""
        data_cfg = self.cfg["data"]
        out = {}
        for name, style_names in _DATASET_BUILDS.items():
            path = self.data_path(name)
            if os.path.exists(path):
                out[name] = load_dataset(path)
                continue
            if progress:
                progress(f"building dataset {name}")
            if name == "real":
                ds = self.ground_truth("default")
            else:
                parts = []
                for style_name in style_names:
                    spec = style_by_name(style_name)
                    parts.append(generate_distill_dataset(
                        bundles[style_name], self.sched, spec,
                        data_cfg["generated_clips"],
                        self._seed("gen", spec.style_id),
                        steps=data_cfg["gen_steps"], w=data_cfg["gen_cfg"]))
                ds = pool_by_group(parts)
            ds = flip_augment(ds)
            save_dataset(ds, path)
            out[name] = ds
        return out

    # -- distillation -------------------------------------------------------

    def _context(self, bundles: dict, datasets: dict, arm: str,
                 n_ranks: int | None, seed: int) -> DistillContext:
        rows = self.cfg["ranks"] if arm == "cross" else [
            {"rank": 0, "style": "default", "dataset": "real"}]
        assignment = build_assignment(rows, n_ranks=n_ranks,
                                      known_datasets=set(datasets))
        flow_styles = sorted({a.style for a in assignment},
                             key=lambda s: style_by_name(s).style_id)
        flow_idx = {s: i for i, s in enumerate(flow_styles)}
        workers = [
            RankWorker(a, bundles[a.style].base, datasets[a.dataset],
                       flow_idx[a.style])
            for a in assignment
        ]
        return DistillContext(
            sched=self.sched, dims=self.dims, workers=workers,
            pretrained=bundles["default"], seed=seed,
            worker_mode=self.cfg["workers"],
            workdir=os.path.join(self.root, "checkpoints", arm))

    def distill_arm(self, arm: str, bundles: dict, datasets: dict,
                    n_ranks: int | None = None, seed: int | None = None,
                    progress=None) -> dict:
        """Run the progressive plan for one arm; returns motion by stage name."""
        plan = plan_from_config(self.cfg)
        seed = self.cfg["seed"] if seed is None else seed
        cached = {}
        complete = True
        for stage in plan.stages:
            path = self.ckpt_path(f"motion_{stage.name}", arm=arm)
            if os.path.exists(path):
                arrays, meta = checkpoint_load(path, expect=MOTION_KEYS)
                self._check_hash(meta, path)
                if int(meta.get("seed", seed)) != seed:
                    complete = False
                    break
                cached[stage.name] = MotionParams(self.dims, arrays)
            else:
                complete = False
                break
        if complete:
            return cached
        if progress:
            progress(f"distilling arm {arm!r} (seed {seed})")
        ctx = self._context(bundles, datasets, arm, n_ranks, seed)
        motion0 = bundles["default"].motion
        _, per_stage, _ = run_progressive(plan, ctx, motion0,
                                          config_hash=self.hash)
        return per_stage

    def motions_by_steps(self, per_stage: dict) -> dict:
        out = {}
        for steps, stage_name in STEP_TO_STAGE.items():
            if stage_name in per_stage:
                out[steps] = per_stage[stage_name]
        return out

    # -- evaluation ---------------------------------------------------------

    def evaluate_main(self, bundles: dict, per_stage: dict,
                      seed: int | None = None) -> EvalReport:
        ev = self.cfg["eval"]
        seed = self.cfg["seed"] if seed is None else seed
        report = run_main_comparison(
            bundles, self.motions_by_steps(per_stage), self.sched,
            ev["styles"], ev["step_counts"], seed, ev["n_conditions"],
            ref_steps=ev["ref_steps"], ref_cfg=ev["ref_cfg"])
        report.metadata["config_hash"] = self.hash
        return report

    def evaluate_ablation(self, bundles: dict, cross_stages: dict,
                          single_stages: dict, styles: list,
                          seed: int | None = None, steps: int = 4) -> dict:
        ev = self.cfg["eval"]
        seed = self.cfg["seed"] if seed is None else seed
        reports = run_cross_ablation(
            bundles, self.motions_by_steps(cross_stages),
            self.motions_by_steps(single_stages), self.sched, styles,
            seed, ev["n_conditions"], steps=steps,
            ref_steps=ev["ref_steps"], ref_cfg=ev["ref_cfg"])
        for rep in reports.values():
            rep.metadata["config_hash"] = self.hash
        return reports
