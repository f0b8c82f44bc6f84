"""Command-line interface.

Subcommands: ``pretrain``, ``gen-data``, ``distill``, ``sample``, ``eval``,
``ablate``, ``gradcheck``. All take ``--config`` (a JSON file path or the
literal ``default``) and ``--seed``; results land under ``--workdir``.
Reports are CSV plus a JSON file of plot-ready series.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import config_hash, dims_from_config, load_config, schedule_from_config
from .datagen import style_by_name
from .gradchecks import REL_TOL, gradcheck_battery
from .runner import STEP_TO_STAGE, Workspace
from .solvers import sample as sample_one


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowdistill",
        description="Desk-scale progressive adversarial distillation of toy "
                    "video diffusion models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default="default",
                       help="JSON config path, or 'default'")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--workdir", default="runs/default",
                       help="run directory for checkpoints, data, reports")

    common(sub.add_parser("pretrain", help="pretrain base models and the motion module"))
    common(sub.add_parser("gen-data", help="generate teacher datasets"))

    p = sub.add_parser("distill", help="run the progressive distillation plan")
    common(p)
    p.add_argument("--ranks", type=int, default=None,
                   help="override worker count (replicates the rank table)")
    p.add_argument("--arm", choices=["cross", "single"], default="cross")

    p = sub.add_parser("sample", help="sample clips from a distilled student")
    common(p)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--style", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=1)

    common(sub.add_parser("eval", help="evaluate distilled students against the teacher"))
    common(sub.add_parser("ablate", help="compare cross-model vs single-model distillation"))
    common(sub.add_parser("gradcheck", help="finite-difference checks of every loss"))
    return parser


def _resolve(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg, Workspace(cfg, args.workdir)


def _progress(msg: str) -> None:
    print(f"[flowdistill] {msg}", flush=True)


def _write_report(report, csv_path: str, plot_path: str) -> None:
    tmp = csv_path + ".tmp"
    report.to_csv(tmp)
    os.replace(tmp, csv_path)
    series: dict = {}
    for row in report.rows:
        series.setdefault(row["style"], {"steps": [], "metric": []})
        series[row["style"]]["steps"].append(row["steps"])
        series[row["style"]]["metric"].append(row["metric"])
    with open(plot_path, "w") as fh:
        json.dump({"series": series, "metadata": report.metadata}, fh, indent=2)


def _require_checkpoints(ws: Workspace, arm: str, cfg) -> None:
    from .distill import default_plan  # stage names only
    for steps in cfg["eval"]["step_counts"]:
        stage = STEP_TO_STAGE[steps]
        path = ws.ckpt_path(f"motion_{stage}", arm=arm)
        if not os.path.exists(path):
            raise FileNotFoundError(
                f"missing distilled checkpoint {path}; run `flowdistill "
                f"distill` first")


def cmd_pretrain(args) -> int:
    cfg, ws = _resolve(args)
    bundles = ws.pretrained_bundles(progress=_progress)
    _progress(f"pretrained {len(bundles)} styles into {ws.root}/checkpoints")
    return 0


def cmd_gen_data(args) -> int:
    cfg, ws = _resolve(args)
    bundles = ws.pretrained_bundles(progress=_progress)
    datasets = ws.build_datasets(bundles, progress=_progress)
    for name, ds in datasets.items():
        _progress(f"dataset {name}: {len(ds)} clips ({ds.provenance})")
    return 0


def cmd_distill(args) -> int:
    cfg, ws = _resolve(args)
    bundles = ws.pretrained_bundles(progress=_progress)
    datasets = ws.build_datasets(bundles, progress=_progress)
    per_stage = ws.distill_arm(args.arm, bundles, datasets,
                               n_ranks=args.ranks, progress=_progress)
    _progress(f"distilled stages: {', '.join(per_stage)}")
    return 0


def cmd_sample(args) -> int:
    cfg, ws = _resolve(args)
    style = style_by_name(args.style)
    sched = schedule_from_config(cfg)
    stage = STEP_TO_STAGE.get(args.steps)
    bundles = ws.pretrained_bundles(styles=[args.style, "default"],
                                    progress=_progress)
    if stage is not None and os.path.exists(ws.ckpt_path(f"motion_{stage}", arm="cross")):
        from .checkpoint import checkpoint_load
        from .nets import MOTION_KEYS, MotionParams, StudentBundle

        arrays, meta = checkpoint_load(ws.ckpt_path(f"motion_{stage}", arm="cross"),
                                       expect=MOTION_KEYS)
        ws._check_hash(meta, ws.ckpt_path(f"motion_{stage}", arm="cross"))
        bundle = StudentBundle(bundles[args.style].base,
                               MotionParams(ws.dims, arrays))
        w = 0.0
        _progress(f"sampling with the {args.steps}-step distilled student")
    else:
        bundle = bundles[args.style]
        w = cfg["eval"]["ref_cfg"]
        _progress("no distilled checkpoint found; sampling the guided teacher")
    rng = np.random.default_rng(cfg["seed"])
    clips = []
    for i in range(args.count):
        token = int(rng.integers(0, ws.dims.vocab))
        clip = sample_one(bundle, sched, args.steps, token,
                          int(rng.integers(0, 2 ** 63 - 1)), w=w)
        clips.append({"token": token, "frames": clip.tolist()})
    with open(args.out, "w") as fh:
        json.dump({"style": args.style, "steps": args.steps, "clips": clips}, fh)
    _progress(f"wrote {args.count} clip(s) to {args.out}")
    return 0


def cmd_eval(args) -> int:
    cfg, ws = _resolve(args)
    _require_checkpoints(ws, "cross", cfg)
    bundles = ws.pretrained_bundles(progress=_progress)
    datasets = ws.build_datasets(bundles, progress=_progress)
    per_stage = ws.distill_arm("cross", bundles, datasets, progress=_progress)
    report = ws.evaluate_main(bundles, per_stage)
    _write_report(report, ws.report_path("main.csv"), ws.report_path("main_plot.json"))
    for row in report.rows:
        _progress(f"{row['style']:>12} {row['steps']:>2} steps: "
                  f"energy distance {row['metric']:.4f}")
    _progress(f"report written to {ws.report_path('main.csv')}")
    return 0


def cmd_ablate(args) -> int:
    cfg, ws = _resolve(args)
    bundles = ws.pretrained_bundles(progress=_progress)
    datasets = ws.build_datasets(bundles, progress=_progress)
    cross = ws.distill_arm("cross", bundles, datasets, progress=_progress)
    single = ws.distill_arm("single", bundles, datasets, progress=_progress)
    styles = [s for s in ("default", "real_a", "real_b", "anime_a", "anime_b",
                          "anime_c", "unseen_near", "unseen_far")]
    reports = ws.evaluate_ablation(bundles, cross, single, styles)
    for arm, report in reports.items():
        _write_report(report, ws.report_path(f"ablation_{arm}.csv"),
                      ws.report_path(f"ablation_{arm}_plot.json"))
    for style in styles:
        c = reports["cross"].cell(style, 4)
        s = reports["single"].cell(style, 4)
        verdict = "cross<=single" if c <= s else "single<cross"
        _progress(f"{style:>12}: cross {c:.4f} vs single {s:.4f} ({verdict})")
    return 0


def cmd_gradcheck(args) -> int:
    cfg, _ = _resolve(args)
    sched = schedule_from_config(cfg)
    dims = dims_from_config(cfg)
    results = gradcheck_battery(sched, dims, seed=cfg["seed"] + 7)
    ok = True
    for res in results:
        status = "ok" if res["passed"] else "FAIL"
        _progress(f"{res['name']:<32} {res['n_params']:>6} params  "
                  f"max rel err {res['max_rel_err']:.2e}  [{status}]")
        ok = ok and res["passed"]
    _progress(f"tolerance {REL_TOL:g}: {'all passed' if ok else 'FAILURES'}")
    return 0 if ok else 1


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "gen-data": cmd_gen_data,
    "distill": cmd_distill,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
