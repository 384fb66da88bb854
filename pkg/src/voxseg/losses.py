"""Segmentation losses: multi-class soft dice, bootstrapped (hard-example)
cross-entropy, and the multi-task mean.

Both losses are composed from tape primitives, so their backward passes come
for free from the engine. Voxel selection for the bootstrapped loss happens
outside the tape: the chosen mask enters the graph as a constant, so no
gradient flows through the selection rule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, clamp_min, mean_of, mul, reshape, safe_div, scale, tlog, tsum
from .errors import ConfigError, ShapeError

DICE = "dice"
BOOTSTRAP_CE = "bootstrap_ce"
LOG_CLAMP = 1e-12


@dataclass
class LossConfig:
    kind: str = BOOTSTRAP_CE
    bootstrap_fraction: float = 0.1  # the K/N ratio
    dice_smoothing: float = 0.0

    def __post_init__(self):
        if self.kind not in (DICE, BOOTSTRAP_CE):
            raise ConfigError(f"loss kind must be '{DICE}' or '{BOOTSTRAP_CE}', got {self.kind!r}")
        if not (0.0 < self.bootstrap_fraction <= 1.0):
            raise ConfigError(f"bootstrap_fraction must be in (0, 1], got {self.bootstrap_fraction}")
        if not (math.isfinite(self.dice_smoothing) and self.dice_smoothing >= 0.0):
            raise ConfigError(f"dice_smoothing must be finite and >= 0, got {self.dice_smoothing}")


@dataclass
class BootstrapSelection:
    """The K hardest voxels (lowest true-class probability) of one batch."""

    selected: np.ndarray  # sorted voxel indices, exactly K of them
    threshold: float  # the (K+1)-th smallest probability, +inf when K == N
    k: int = field(init=False)

    def __post_init__(self):
        self.k = int(self.selected.size)


def _onehot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """(B, Z, Y, X) integer labels -> (B, C, Z, Y, X) one-hot float array."""
    eye = np.eye(num_classes, dtype=np.float64)
    return np.ascontiguousarray(eye[labels].transpose(0, 4, 1, 2, 3))


def dice_loss(probs, target_onehot, smoothing: float = 0.0, validate: bool = False) -> Tensor:
    """Negated mean soft dice over classes:

        L = -(1/C) sum_c (2 sum_i p_ic g_ic + s) / (sum_i p_ic + sum_i g_ic + s)

    With s = 0 a class whose denominator vanishes contributes 0; a class
    absent from the ground truth then contributes 0 *and* passes zero
    gradient even when the prediction puts mass on it (the documented
    instability that motivates the bootstrapped loss).
    """
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    g = np.asarray(target_onehot.data if isinstance(target_onehot, Tensor) else target_onehot,
                   dtype=np.float64)
    if probs.data.ndim != 5 or g.ndim != 5:
        raise ShapeError(f"dice_loss: expected rank-5 tensors, got {probs.data.shape} and {g.shape}")
    if probs.data.shape != g.shape:
        raise ShapeError(f"dice_loss: probs shape {probs.data.shape} != target shape {g.shape}")
    if validate:
        if not np.isin(g, (0.0, 1.0)).all():
            raise ValueError("dice_loss: target entries must be 0 or 1")
        if not np.allclose(g.sum(axis=1), 1.0):
            raise ValueError("dice_loss: target channel sums must equal 1 (one-hot)")
    c = probs.data.shape[1]
    spatial = (0, 2, 3, 4)

    inter = tsum(mul(probs, g.astype(probs.dtype)), axes=spatial)  # [C]
    psum = tsum(probs, axes=spatial)  # [C]
    gsum = g.sum(axis=spatial)  # constant [C]
    num = scale(inter, 2.0) + float(smoothing)
    den = psum + (gsum + smoothing).astype(probs.dtype)
    per_class = safe_div(num, den)
    return scale(tsum(per_class), -1.0 / c)


def bootstrap_select(true_class_probs, fraction: float) -> BootstrapSelection:
    """Pick exactly K = max(1, floor(fraction * N)) voxels with the smallest
    true-class probability; boundary ties go to the lower voxel index. The
    reported threshold is the (K+1)-th smallest probability (+inf if K = N).
    """
    p = np.asarray(true_class_probs.data if isinstance(true_class_probs, Tensor)
                   else true_class_probs, dtype=np.float64).ravel()
    n = p.size
    if n < 1:
        raise ShapeError("bootstrap_select: empty probability vector")
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"bootstrap_select: fraction must be in (0, 1], got {fraction}")
    k = max(1, int(math.floor(fraction * n)))
    order = np.argsort(p, kind="stable")
    selected = np.sort(order[:k])
    threshold = float(p[order[k]]) if k < n else math.inf
    return BootstrapSelection(selected=selected, threshold=threshold)


def true_class_probs(probs, target_labels: np.ndarray) -> Tensor:
    """Gather p_{i, y_i} per voxel: (B, C, Z, Y, X) probs and (B, Z, Y, X)
    integer labels -> flat [N] tensor, differentiable w.r.t. probs."""
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    labels = np.asarray(target_labels.data if isinstance(target_labels, Tensor)
                        else target_labels)
    if probs.data.ndim != 5:
        raise ShapeError(f"true_class_probs: expected rank-5 probs, got {probs.data.shape}")
    b, c = probs.data.shape[:2]
    expect = (b,) + probs.data.shape[2:]
    if labels.shape != expect:
        raise ShapeError(f"true_class_probs: labels shape {labels.shape} != {expect}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ValueError(f"true_class_probs: labels must be integers, got {labels.dtype}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(
            f"true_class_probs: labels must lie in [0, {c}), got range "
            f"[{labels.min()}, {labels.max()}]")
    onehot = _onehot(labels, c).astype(probs.dtype)
    gathered = tsum(mul(probs, onehot), axes=(1,))  # [B, Z, Y, X]
    return reshape(gathered, (labels.size,))


def bootstrap_ce_loss(probs, target_labels, fraction: float = 0.1) -> Tensor:
    """Cross-entropy averaged over only the K hardest voxels:

        L = -(1/K) sum_{i in selected} log p_{i, y_i}

    Selection is computed on the raw probabilities and enters the graph as a
    constant mask, so no gradient flows through the choice of voxels.
    """
    flat = true_class_probs(probs, target_labels)
    selection = bootstrap_select(flat.data, fraction)
    mask = np.zeros(flat.data.size, dtype=flat.dtype)
    mask[selection.selected] = 1.0
    logp = tlog(clamp_min(flat, LOG_CLAMP))
    return scale(tsum(mul(logp, mask)), -1.0 / selection.k)


def multitask_loss(task_losses) -> Tensor:
    """Arithmetic mean of the per-task scalar losses."""
    return mean_of(list(task_losses))


def loss_for(config: LossConfig, probs, target_labels: np.ndarray, num_classes: int) -> Tensor:
    """Dispatch on LossConfig: integer labels in, scalar loss node out."""
    if config.kind == DICE:
        labels = np.asarray(target_labels)
        return dice_loss(probs, _onehot(labels, num_classes), config.dice_smoothing)
    return bootstrap_ce_loss(probs, target_labels, config.bootstrap_fraction)
