"""Training runs: the fold loop, the paired two-task epoch schedule,
stitched full-volume validation at a fixed epoch interval, and
deterministic artifacts (per-fold checkpoint + convergence CSV, one
combined metrics CSV and convergence SVG).

Conventions:
- folds are planned over the FIRST configured task's cases (the
  cross-validated cohort); cases of any other task always train;
- the convergence metric is the mean foreground dice of the first task
  over its validation cases (for the kidney task that is the mean of the
  left and right kidney dice);
- the metrics CSV reports kidney-task validation cases (its schema names
  the two kidney classes and TKV).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig
from .dataset import (Sample, epoch_pairs, load_sample, plan_folds,
                      read_manifest, sample_seed)
from .errors import ConfigError, NumericError
from .inference import predict_volume
from .losses import LossConfig
from .metrics import (ConvergenceLog, TkvResult, case_row, compute_tkv,
                      dice_report, dice_score, write_metrics_csv)
from .network import MultiTaskNet, build_multitask_net, save_checkpoint
from .optim import Adam, train_step
from .plots import convergence_svg
from .preprocess import augment, crop_z, normalize_intensity, resample_sample

KIDNEY = "kidney"


@dataclass
class FoldArtifacts:
    fold: int
    checkpoint_path: str
    convergence: ConvergenceLog
    rows: list  # metrics CaseRow per validation kidney case
    steps: int


@dataclass
class RunArtifacts:
    out_dir: str
    folds: list = field(default_factory=list)
    metrics_csv: str = ""
    convergence_svg_path: str = ""


def _net_seed(run_seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([run_seed, fold, 91]).generate_state(1)[0])


def _working_sample(sample: Sample, target_spacing: float) -> Sample:
    """Resampled-to-working-grid sample with a normalized image."""
    resampled = resample_sample(sample, target_spacing)
    return Sample(image=normalize_intensity(resampled.image),
                  mask=resampled.mask, task=sample.task,
                  case_id=sample.case_id)


def _epoch_schedule(primary_ids, secondary_ids, seed: int, epoch: int) -> list:
    """Pairs of (primary case id, secondary case id or None) for one epoch."""
    if primary_ids and secondary_ids:
        return epoch_pairs(primary_ids, secondary_ids, seed, epoch)
    rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 0]))
    order = [primary_ids[i] for i in rng.permutation(len(primary_ids))]
    return [(case, None) for case in order]


def _batch(sample: Sample) -> tuple:
    image = sample.image.data[None, None].astype(np.float32)
    labels = sample.mask.data[None].astype(np.int64)
    return image, labels


def _validation_dice(net: MultiTaskNet, samples: dict, val_ids, task_name: str,
                     num_classes: int, crop, target_spacing: float) -> float:
    scores = []
    for case_id in val_ids:
        sample = samples[case_id]
        pred = predict_volume(net, sample.image, task_name, crop=crop,
                              target_spacing=target_spacing)
        fg = [dice_score(pred, sample.mask, c) for c in range(1, num_classes)]
        scores.append(float(np.mean(fg)))
    return float(np.mean(scores)) if scores else float("nan")


def _metrics_rows(net: MultiTaskNet, samples: dict, val_ids, fold: int,
                  crop, target_spacing: float) -> list:
    rows = []
    for case_id in val_ids:
        sample = samples[case_id]
        if sample.task != KIDNEY:
            continue
        pred = predict_volume(net, sample.image, KIDNEY, crop=crop,
                              target_spacing=target_spacing)
        report = dice_report(pred, sample.mask, class_ids=(1, 2))
        tkv = TkvResult(case_id, compute_tkv(pred), compute_tkv(sample.mask))
        rows.append(case_row(case_id, fold, report, tkv))
    return rows


def _train_fold(config: TrainConfig, fold: int, samples: dict,
                train_ids: list, val_ids: list, out_dir: str) -> FoldArtifacts:
    tasks = config.network.task_specs()
    if len(tasks) > 2:
        raise ConfigError("the training loop schedules at most two tasks")
    net = build_multitask_net(config.network.depth, config.network.base_channels,
                              tasks, seed=_net_seed(config.seed, fold))
    adam = Adam(lr=config.optimizer.lr, beta1=config.optimizer.betas[0],
                beta2=config.optimizer.betas[1], eps=config.optimizer.eps)
    loss_cfg: LossConfig = config.loss.loss_config()
    crop = tuple(config.data.crop)
    spacing = config.data.target_spacing

    primary = tasks[0].name
    ids_by_task = {t.name: [c for c in train_ids if samples[c].task == t.name]
                   for t in tasks}
    if not ids_by_task[primary]:
        raise ConfigError(f"fold {fold}: no training cases for task {primary!r}")
    secondary = tasks[1].name if len(tasks) == 2 else None
    if secondary and not ids_by_task[secondary]:
        raise ConfigError(f"fold {fold}: no training cases for task {secondary!r}")

    working = {c: _working_sample(samples[c], spacing) for c in train_ids}
    val_primary = [c for c in val_ids if samples[c].task == primary]

    convergence = ConvergenceLog()
    max_steps = config.schedule.max_steps
    step = 0
    stop = False
    for epoch in range(1, config.schedule.epochs + 1):
        pairs = _epoch_schedule(ids_by_task[primary],
                                ids_by_task[secondary] if secondary else None,
                                config.seed, epoch)
        for pair in pairs:
            crops_by_slot = []
            for case_id in pair:
                if case_id is None:
                    continue
                sample = working[case_id]
                if config.data.augment:
                    sample = augment(sample,
                                     sample_seed(config.seed, case_id, epoch),
                                     max_angle_deg=config.data.max_angle_deg,
                                     scale_range=config.data.scale_range)
                crops_by_slot.append(crop_z(sample, target=crop, z_overlap=0))
            n_steps = max(len(c) for c in crops_by_slot)
            for i in range(n_steps):
                batches = [_batch(crops[i % len(crops)])
                           for crops in crops_by_slot]
                second = batches[1] if len(batches) == 2 else None
                metrics = train_step(net, batches[0], second, loss_cfg, adam)
                step += 1
                if not math.isfinite(metrics.total_loss):
                    raise NumericError(
                        f"non-finite loss at fold {fold} epoch {epoch} step {step} "
                        f"(cases {', '.join(c for c in pair if c)})")
                if max_steps and step >= max_steps:
                    stop = True
                    break
            if stop:
                break
        if stop or epoch % config.schedule.eval_interval == 0 \
                or epoch == config.schedule.epochs:
            if val_primary:
                dice = _validation_dice(net, samples, val_primary, primary,
                                        tasks[0].num_classes, crop, spacing)
                convergence.append(epoch, dice)
        if stop:
            break

    fold_dir = os.path.join(out_dir, f"fold{fold}")
    os.makedirs(fold_dir, exist_ok=True)
    ckpt_path = os.path.join(fold_dir, "checkpoint.bin")
    save_checkpoint(net, ckpt_path)
    convergence.write_csv(os.path.join(fold_dir, "convergence.csv"))
    rows = _metrics_rows(net, samples, val_ids, fold, crop, spacing)
    return FoldArtifacts(fold=fold, checkpoint_path=ckpt_path,
                         convergence=convergence, rows=rows, steps=step)


def run_training(config: TrainConfig) -> RunArtifacts:
    """Execute every fold of a config and write all artifacts under its
    output directory. Deterministic: same config + seed, same bytes."""
    config.validate()
    records = read_manifest(config.data.manifest)
    task_names = [t["name"] for t in config.network.tasks]
    records = [r for r in records if r["task"] in task_names]
    if not records:
        raise ConfigError("no manifest cases match the configured tasks")
    base_dir = os.path.dirname(os.path.abspath(config.data.manifest))
    samples = {r["case_id"]: load_sample(r, base_dir) for r in records}

    primary = task_names[0]
    primary_ids = sorted(c for c, s in samples.items() if s.task == primary)
    other_ids = sorted(c for c, s in samples.items() if s.task != primary)
    if config.folds.k == 1:
        splits = [(primary_ids + other_ids, primary_ids)]
    else:
        plan = plan_folds(primary_ids, k=config.folds.k, seed=config.folds.seed)
        splits = []
        for fold in range(config.folds.k):
            train_primary, val_primary = plan.split(fold)
            splits.append((train_primary + other_ids, val_primary))

    os.makedirs(config.out_dir, exist_ok=True)
    run = RunArtifacts(out_dir=config.out_dir)
    all_rows = []
    series = {}
    for fold, (train_ids, val_ids) in enumerate(splits):
        artifacts = _train_fold(config, fold, samples, train_ids, val_ids,
                                config.out_dir)
        run.folds.append(artifacts)
        all_rows.extend(artifacts.rows)
        if artifacts.convergence.points:
            series[f"fold{fold}"] = artifacts.convergence.points

    run.metrics_csv = os.path.join(config.out_dir, "metrics.csv")
    write_metrics_csv(all_rows, run.metrics_csv)
    if series:
        run.convergence_svg_path = os.path.join(config.out_dir, "convergence.svg")
        convergence_svg(series, run.convergence_svg_path)
    return run
