"""Command-line entry point.

Subcommands: ``gen-data`` (write a scenario dataset), ``train`` (run the
optimizer and save checkpoints), ``eval`` (metric tables + figures),
``predict`` (export one scene's forecast as JSON + an overlay figure), and
``gradcheck`` (finite-difference self-check). Every command exits 0 on
success and nonzero on any failure; all file formats are documented in
docs/file_formats.md.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import Dataset, generate_dataset, load_manifest
from .encoder import focal_to_world
from .gradcheck import registered_cases, run_cases
from .plots import render_forecast_overlay, render_metric_bars, render_training_curves
from .scenario import (
    gt_future_world,
    load_scenario,
    scene_frame,
    to_scene_input,
)
from .tensor import no_grad
from .train import Trainer, cv_report, ensemble_evaluate, evaluate, load_model
from .metrics import MetricReport, compute_report

LOG_NAME = "train.log"


def _load_config(path: str = None) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def _parse_ks(text: str):
    try:
        ks = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise ValueError(f"--k expects comma-separated integers, got {text!r}")
    if not ks:
        raise ValueError("--k needs at least one value")
    return ks


def _report_csv_lines(reports: dict) -> list:
    """One table across sources: source,split,metric,k,value."""
    lines = ["source,split,metric,k,value"]
    for source, rep in reports.items():
        for (metric, k), value in sorted(rep.rows.items()):
            lines.append(f"{source},{rep.split},{metric},{k},{value:.9f}")
    return lines


def cmd_gen_data(args) -> int:
    cfg = _load_config(args.config)
    n = args.n if args.n is not None else cfg.data.n_scenarios
    seed = args.seed if args.seed is not None else cfg.data.gen_seed
    manifest_path = generate_dataset(args.out, n=n, seed=seed, config=cfg.data.gen)
    manifest = load_manifest(manifest_path)
    counts = {split: len(manifest.split_entries(split))
              for split in ("train", "val", "test")}
    print(f"wrote {n} scenarios to {args.out}")
    print(f"manifest {manifest_path} "
          f"(train {counts['train']}, val {counts['val']}, test {counts['test']})")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.warmup_epochs is not None:
        cfg.train.warmup_epochs = args.warmup_epochs
    if args.no_clip:
        cfg.train.clip_norm = None
    manifest = args.manifest or cfg.data.manifest
    if not manifest:
        print("error: no dataset; pass --manifest or set data.manifest",
              file=sys.stderr)
        return 1
    cfg.data.manifest = str(manifest)

    train_ds = Dataset.from_manifest(manifest, "train")
    val_ds = Dataset.from_manifest(manifest, "val")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")

    with open(out / LOG_NAME, "w", encoding="utf-8") as log_fh:
        def log_fn(line):
            print(line)
            log_fh.write(line + "\n")
            log_fh.flush()

        trainer = Trainer(cfg, train_ds, val_ds, str(out), log_fn=log_fn)
        if args.resume:
            trainer.resume(args.resume)
        try:
            result = trainer.train(until_epoch=args.until_epoch)
        except FloatingPointError as err:
            print(f"error: {err}", file=sys.stderr)
            return 1

    if result.log_lines:
        render_training_curves(out / "training_curves.svg", result.log_lines)
    print(f"best val minADE {result.best_val:.6f} ({result.best_path})")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    manifest = args.manifest or cfg.data.manifest
    if not manifest:
        print("error: no dataset; pass --manifest or set data.manifest",
              file=sys.stderr)
        return 1
    dataset = Dataset.from_manifest(manifest, args.split)
    ks = _parse_ks(args.k)

    reports = {}
    if args.stub_gt:
        # Harness sanity mode: the ground truth as a single sure forecast.
        gt_list = [e.gt for e in dataset.examples]
        trajs = [g[None] for g in gt_list]
        probs = [np.ones(1)] * len(dataset)
        reports["stub_gt"] = compute_report(trajs, probs, gt_list, ks=(1,),
                                            split=args.split)
    elif args.ensemble:
        models = [load_model(p) for p in args.ensemble]
        reports["ensemble"] = ensemble_evaluate(
            models, dataset, ks=ks, split=args.split,
            n_clusters=args.clusters, seed=args.seed or 0)
    else:
        model = load_model(args.checkpoint)
        reports["model"] = evaluate(model, dataset, ks=ks, split=args.split)
    reports["cv"] = cv_report(dataset, split=args.split)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_lines = _report_csv_lines(reports)
    (out / "metrics.csv").write_text("\n".join(csv_lines) + "\n",
                                     encoding="utf-8")
    summary = {source: rep.to_dict() for source, rep in reports.items()}
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1)
    render_metric_bars(out / "metric_bars.svg", reports)
    for line in csv_lines:
        print(line)
    return 0


def cmd_predict(args) -> int:
    scenario = load_scenario(args.scene)
    focal_id = args.focal or scenario.focal_ids[0]
    model = load_model(args.checkpoint)
    scene, _ = to_scene_input(scenario, focal_id)
    with no_grad():
        forecast = model(scene.map[None], scene.map_mask[None],
                         scene.agents[None], scene.agent_mask[None])
    trajs = forecast.trajectories.data[0].astype(np.float64)
    probs = forecast.probabilities.data[0].astype(np.float64)

    origin, theta = scene_frame(scenario, focal_id)
    trajs_world = focal_to_world(trajs, origin, theta)
    gt_world = gt_future_world(scenario, focal_id)
    hist = scenario.agent(focal_id).states[:scenario.history_steps]
    hist_world = hist[hist[:, 5] > 0.5, :2]
    polylines = [(p.kind, p.points) for p in scenario.polylines]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": 1,
        "scene": str(args.scene),
        "focal_id": focal_id,
        "dt": scenario.dt,
        "probabilities": probs.tolist(),
        "trajectories": trajs_world.tolist(),
        "gt": gt_world.tolist(),
        "history": hist_world.tolist(),
        "map": [{"kind": kind, "points": np.asarray(pts).tolist()}
                for kind, pts in polylines],
    }
    with open(out / "forecast.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh)

    if not args.no_figure:
        bbox = render_forecast_overlay(
            out / "forecast.svg", polylines, trajs_world, probs,
            gt=gt_world, history=hist_world,
            title=f"{Path(args.scene).name} focal {focal_id}")
        print(f"overlay extent x [{bbox[0]:.1f}, {bbox[1]:.1f}] "
              f"y [{bbox[2]:.1f}, {bbox[3]:.1f}]")
    print(f"wrote forecast for {focal_id} "
          f"({trajs.shape[0]} modes, prob sum {probs.sum():.6f})")
    return 0


def cmd_gradcheck(args) -> int:
    names = args.blocks or None
    results = run_cases(names=names, tolerance=args.tolerance, seed=args.seed or 0)
    failed = 0
    for name, report in results:
        worst = max(r.rel_err for r in report.results)
        status = "ok" if report.passed else "FAIL"
        print(f"{status:4s} {name}: worst rel err {worst:.3e} "
              f"({len(report.results)} tensors)")
        if not report.passed:
            failed += 1
            for line in report.lines():
                if line.startswith("FAIL"):
                    print("  " + line)
    print(f"{len(results) - failed}/{len(results)} cases passed "
          f"({len(registered_cases())} registered)")
    return 0 if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modecast",
        description="Multimodal trajectory forecasting on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a scenario dataset")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--n", type=int, default=None, help="number of scenarios")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="RunConfig JSON path")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", default=None, help="RunConfig JSON path")
    p.add_argument("--manifest", default=None, help="dataset manifest path")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--warmup-epochs", type=int, default=None)
    p.add_argument("--until-epoch", type=int, default=None,
                   help="stop after this epoch, keeping the full-run schedule")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--no-clip", action="store_true",
                   help="disable gradient-norm clipping")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or ensemble")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", default=None)
    src.add_argument("--ensemble", nargs="+", default=None,
                     help="checkpoints pooled by trajectory clustering")
    src.add_argument("--stub-gt", action="store_true",
                     help="sanity mode: score the ground truth against itself")
    p.add_argument("--manifest", default=None, help="dataset manifest path")
    p.add_argument("--config", default=None, help="RunConfig JSON path")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--k", default="1,6", help="comma-separated k values")
    p.add_argument("--clusters", type=int, default=6,
                   help="ensemble cluster count")
    p.add_argument("--seed", type=int, default=None, help="ensemble seed")
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="export one scene's forecast")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scenario JSON path")
    p.add_argument("--focal", default=None, help="focal agent id")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--no-figure", action="store_true",
                   help="skip the overlay figure")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference self-check")
    p.add_argument("--blocks", nargs="*", default=None,
                   help="subset of registered cases")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
