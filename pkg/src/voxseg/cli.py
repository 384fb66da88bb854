"""Command-line orchestration.

Subcommands: ``synth`` (phantom datasets), ``preprocess`` (resample to the
working spacing), ``train`` (fold loop + artifacts), ``infer`` (single
volume), ``eval`` (metrics CSV + TKV scatter), ``gradcheck`` (gradient
suite).

Exit codes: 0 success, 1 check/runtime failure, 2 configuration or usage
error, 3 numeric failure during training.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import checks
from .config import PRESET_NAMES, load_config, preset
from .dataset import load_sample, read_manifest, write_manifest
from .errors import (ConfigError, HeaderError, IntegrityError, NumericError,
                     ShapeError)
from .inference import DEFAULT_CROP, predict_volume
from .metrics import (TkvResult, CaseRow, case_row, compute_tkv, dice_report,
                      summarize_tkv, write_metrics_csv)
from .network import load_checkpoint
from .phantom import PhantomSpec, generate_phantom_pair
from .plots import scatter_svg
from .preprocess import TARGET_SPACING, resample_sample
from .train import run_training
from .volume import read_volume, write_volume

EXIT_OK = 0
EXIT_CHECK_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxseg",
        description="Volumetric multi-task segmentation: synthetic phantoms, "
                    "training, inference, evaluation, gradient checks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate paired phantom datasets")
    p_synth.add_argument("--count", type=int, default=4,
                         help="number of phantom pairs (kidney + liver case each)")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True, help="output directory")
    p_synth.add_argument("--dims", type=int, nargs=3, default=(32, 32, 32),
                         metavar=("Z", "Y", "X"))
    p_synth.add_argument("--spacing", type=float, default=TARGET_SPACING)
    p_synth.add_argument("--kidney-radii", type=float, nargs=2,
                         default=(5.5, 9.0), metavar=("LO", "HI"))
    p_synth.add_argument("--liver-radii", type=float, nargs=2,
                         default=(8.0, 13.0), metavar=("LO", "HI"))
    p_synth.add_argument("--lumpiness", type=float, default=0.0)
    p_synth.add_argument("--noise", type=float, default=8.0)
    p_synth.set_defaults(func=cmd_synth)

    p_prep = sub.add_parser("preprocess",
                            help="resample manifest cases to a working spacing")
    p_prep.add_argument("--manifest", required=True)
    p_prep.add_argument("--out", required=True)
    p_prep.add_argument("--spacing", type=float, default=TARGET_SPACING)
    p_prep.set_defaults(func=cmd_preprocess)

    p_train = sub.add_parser("train", help="run training per a JSON config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--seed", type=int, default=None,
                         help="override the config's run seed")
    p_train.add_argument("--out", default=None,
                         help="override the config's output directory")
    p_train.set_defaults(func=cmd_train)

    p_preset = sub.add_parser("preset", help="print a preset config tree")
    p_preset.add_argument("name", choices=PRESET_NAMES)
    p_preset.set_defaults(func=cmd_preset)

    p_infer = sub.add_parser("infer", help="segment one volume")
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--image", required=True)
    p_infer.add_argument("--task", required=True)
    p_infer.add_argument("--out", required=True,
                         help="output label volume path (.mha/.mhd)")
    p_infer.add_argument("--crop", type=int, nargs=3, default=DEFAULT_CROP,
                         metavar=("Z", "Y", "X"))
    p_infer.add_argument("--spacing", type=float, default=TARGET_SPACING)
    p_infer.set_defaults(func=cmd_infer)

    p_eval = sub.add_parser("eval",
                            help="evaluate a checkpoint over a manifest")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--manifest", required=True)
    p_eval.add_argument("--out", required=True, help="output directory")
    p_eval.add_argument("--crop", type=int, nargs=3, default=DEFAULT_CROP,
                        metavar=("Z", "Y", "X"))
    p_eval.add_argument("--spacing", type=float, default=TARGET_SPACING)
    p_eval.set_defaults(func=cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="run the gradient-check suite")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--shapes", type=int, default=checks.SHAPES_PER_CHECK,
                        help="random shapes per primitive")
    p_grad.add_argument("--inject-fault", default=None, metavar="NAME",
                        help="test fixture: corrupt the named check's backward")
    p_grad.set_defaults(func=cmd_gradcheck)
    return parser


def cmd_synth(args) -> int:
    if args.count < 0:
        raise ConfigError(f"--count must be >= 0, got {args.count}")
    os.makedirs(args.out, exist_ok=True)
    records = []
    for i in range(args.count):
        spec = PhantomSpec(seed=args.seed + i, dims=tuple(args.dims),
                           spacing=args.spacing,
                           kidney_radii_mm=tuple(args.kidney_radii),
                           liver_radii_mm=tuple(args.liver_radii),
                           lumpiness=args.lumpiness, noise_hu=args.noise)
        for sample in generate_phantom_pair(spec):
            image_name = f"{sample.case_id}_img.mha"
            mask_name = f"{sample.case_id}_msk.mha"
            write_volume(sample.image, os.path.join(args.out, image_name))
            write_volume(sample.mask, os.path.join(args.out, mask_name))
            records.append({"case_id": sample.case_id, "image": image_name,
                            "mask": mask_name, "task": sample.task})
    manifest = os.path.join(args.out, "manifest.jsonl")
    write_manifest(records, manifest)
    print(f"wrote {len(records)} cases ({args.count} pairs) to {args.out}")
    print(f"manifest: {manifest}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    records = read_manifest(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(args.out, exist_ok=True)
    out_records = []
    for record in records:
        sample = load_sample(record, base)
        resampled = resample_sample(sample, args.spacing)
        image_name = f"{sample.case_id}_img.mha"
        mask_name = f"{sample.case_id}_msk.mha"
        write_volume(resampled.image, os.path.join(args.out, image_name))
        write_volume(resampled.mask, os.path.join(args.out, mask_name))
        out_records.append({"case_id": sample.case_id, "image": image_name,
                            "mask": mask_name, "task": sample.task})
    manifest = os.path.join(args.out, "manifest.jsonl")
    write_manifest(out_records, manifest)
    print(f"resampled {len(out_records)} cases to {args.spacing} mm -> {args.out}")
    return EXIT_OK


def cmd_preset(args) -> int:
    import json
    print(json.dumps(preset(args.name), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = os.path.abspath(args.out)
    config = load_config(args.config, overrides=overrides or None)
    run = run_training(config)
    for fold in run.folds:
        final = (f", final val dice {fold.convergence.points[-1][1]:.4f}"
                 if fold.convergence.points else "")
        print(f"fold {fold.fold}: {fold.steps} steps, "
              f"checkpoint {fold.checkpoint_path}{final}")
    print(f"metrics: {run.metrics_csv}")
    if run.convergence_svg_path:
        print(f"convergence: {run.convergence_svg_path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    net = load_checkpoint(args.checkpoint)
    try:
        net.task(args.task)
    except KeyError:
        raise ConfigError(
            f"task {args.task!r} not in checkpoint "
            f"(has: {', '.join(t.name for t in net.tasks)})")
    image = read_volume(args.image)
    labels = predict_volume(net, image, args.task, crop=tuple(args.crop),
                            target_spacing=args.spacing)
    write_volume(labels, args.out)
    print(f"wrote labels {labels.dims} to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load_checkpoint(args.checkpoint)
    records = read_manifest(args.manifest)
    base = os.path.dirname(os.path.abspath(args.manifest))
    os.makedirs(args.out, exist_ok=True)

    rows, results, skipped = [], [], 0
    for record in records:
        if record["task"] != "kidney":
            continue
        try:
            sample = load_sample(record, base)
        except (OSError, HeaderError, IntegrityError) as err:
            print(f"warning: skipping {record['case_id']}: {err}",
                  file=sys.stderr)
            skipped += 1
            continue
        pred = predict_volume(net, sample.image, "kidney",
                              crop=tuple(args.crop),
                              target_spacing=args.spacing)
        report = dice_report(pred, sample.mask, class_ids=(1, 2))
        tkv = TkvResult(sample.case_id, compute_tkv(pred),
                        compute_tkv(sample.mask))
        rows.append(case_row(sample.case_id, 0, report, tkv))
        results.append(tkv)
    if not rows:
        raise ConfigError("eval: no kidney cases could be evaluated")

    summary = summarize_tkv(results)
    mean = lambda field: float(np.mean([getattr(r, field) for r in rows]))
    rows.append(CaseRow("mean", 0, mean("dice_left"), mean("dice_right"),
                        mean("dice_mean"), mean("tkv_pred_mm3"),
                        mean("tkv_gt_mm3"),
                        float(np.mean([r.percent_error for r in results
                                       if r.tkv_gt_mm3 > 0]))))
    rows.append(CaseRow("mape", 0, mean("dice_left"), mean("dice_right"),
                        mean("dice_mean"), mean("tkv_pred_mm3"),
                        mean("tkv_gt_mm3"), summary.mape))

    csv_path = os.path.join(args.out, "metrics.csv")
    write_metrics_csv(rows, csv_path)
    svg_path = os.path.join(args.out, "tkv_scatter.svg")
    scatter_svg(results, svg_path)

    n_cases = len(rows) - 2
    print(f"evaluated {n_cases} kidney cases ({skipped} skipped)")
    print(f"mean dice left {rows[-2].dice_left:.4f} right {rows[-2].dice_right:.4f} "
          f"mean {rows[-2].dice_mean:.4f}")
    print(f"TKV MAPE {summary.mape:.3f}% over {summary.n_used} cases "
          f"({summary.n_excluded} excluded for zero ground truth)")
    print(f"metrics: {csv_path}")
    print(f"scatter: {svg_path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        results, elapsed = checks.timed_suite(seed=args.seed,
                                              shapes_per_check=args.shapes,
                                              fault=args.inject_fault)
    except ValueError as err:
        raise ConfigError(str(err))
    print(checks.format_report(results, elapsed))
    return EXIT_OK if checks.suite_passed(results) else EXIT_CHECK_FAILURE


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, HeaderError, IntegrityError, ShapeError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CHECK_FAILURE


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
