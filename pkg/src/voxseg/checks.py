"""The gradient-check suite: every differentiable network primitive and
both loss functions, finite-differenced at 64-bit over randomized small
shapes, reporting the max relative error per primitive.

Probe design note: each check reduces the primitive's output with a
random weighted sum (not a plain sum or sum of squares). A plain sum can
cancel gradient coordinates to ~0 (batchnorm is the worst case), pushing
the true gradient below the finite-difference rounding floor eps*|f|/h
and producing spurious relative-error failures. Weighted probes keep
every gradient coordinate O(1).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, gradcheck, graph_of, mul, tsum
from .losses import bootstrap_ce_loss, dice_loss
from .ops import (BatchNormState, batchnorm, concat_channel, conv3d,
                  crop_spatial, maxpool3d, pad_spatial, relu,
                  softmax_channel, upconv3d)

TOLERANCE = 1e-4
SHAPES_PER_CHECK = 10


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    n_shapes: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


_FAULT_ACTIVE = False


def _faulty(y: Tensor) -> Tensor:
    """Identity forward with a deliberately wrong backward (fault fixture)."""
    g = graph_of(y)
    if g is None:
        return y

    def bwd(gy):
        return (gy * 1.01,)

    return g.record(y.data.copy(), [y], bwd)


def _fault_hook(y: Tensor) -> Tensor:
    return _faulty(y) if _FAULT_ACTIVE else y


def _make_probe(rng):
    """Random-weighted linear reduction to a scalar. The weight seed is
    frozen up front so every finite-difference evaluation of the same
    objective sees identical weights."""
    seed = int(rng.integers(2 ** 63))

    def probe(y: Tensor) -> Tensor:
        w = np.random.default_rng(seed).standard_normal(y.data.shape)
        return tsum(mul(_fault_hook(y), w))

    return probe


def _distinct(rng, shape, gap: float = 0.1) -> np.ndarray:
    """Values pairwise separated by >= gap, so window maxima cannot flip
    under the +-step finite-difference perturbations."""
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * gap).reshape(shape)


def _check_conv3d(rng) -> float:
    b, cin, cout = rng.integers(1, 3), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    z, y, x = (int(rng.integers(3, 6)) for _ in range(3))
    xs = rng.standard_normal((b, cin, z, y, x))
    k = rng.standard_normal((cout, cin, 3, 3, 3)) * 0.5
    bias = rng.standard_normal(cout)
    padding = "same" if rng.uniform() < 0.5 else "valid"

    probe = _make_probe(rng)

    def f(xt, kt, bt):
        return probe(conv3d(xt, kt, bt, padding=padding))

    return gradcheck(f, [xs, k, bias])


def _check_maxpool3d(rng) -> float:
    b, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    z, y, x = (2 * int(rng.integers(1, 3)) for _ in range(3))
    xs = _distinct(rng, (b, c, z, y, x))

    probe = _make_probe(rng)

    def f(xt):
        return probe(maxpool3d(xt))

    return gradcheck(f, [xs])


def _check_upconv3d(rng) -> float:
    b, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    z, y, x = (int(rng.integers(1, 4)) for _ in range(3))
    xs = rng.standard_normal((b, cin, z, y, x))
    k = rng.standard_normal((cin, cout, 2, 2, 2)) * 0.5
    bias = rng.standard_normal(cout)

    probe = _make_probe(rng)

    def f(xt, kt, bt):
        return probe(upconv3d(xt, kt, bt))

    return gradcheck(f, [xs, k, bias])


def _check_batchnorm(rng) -> float:
    b, c = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    z, y, x = (int(rng.integers(2, 5)) for _ in range(3))
    xs = rng.standard_normal((b, c, z, y, x))
    gamma = rng.standard_normal(c) * 0.5 + 1.0
    beta = rng.standard_normal(c)
    mode = "train" if rng.uniform() < 0.7 else "eval"
    state0 = BatchNormState(mean=rng.standard_normal(c),
                            var=rng.uniform(0.5, 2.0, size=c))

    probe = _make_probe(rng)

    def f(xt, gt, bt):
        state = BatchNormState(mean=state0.mean.copy(), var=state0.var.copy())
        return probe(batchnorm(xt, gt, bt, state, mode=mode))

    return gradcheck(f, [xs, gamma, beta])


def _check_relu(rng) -> float:
    shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), 3, 3, 3)
    # keep values away from the kink at 0, where the subgradient is not
    # finite-difference checkable
    xs = rng.standard_normal(shape)
    xs = np.where(np.abs(xs) < 0.05, 0.5, xs)

    probe = _make_probe(rng)

    def f(xt):
        return probe(relu(xt))

    return gradcheck(f, [xs])


def _check_softmax_channel(rng) -> float:
    c = int(rng.integers(2, 5))
    shape = (int(rng.integers(1, 3)), c, 2, 3, 2)
    xs = rng.standard_normal(shape) * 2.0

    probe = _make_probe(rng)

    def f(xt):
        return probe(softmax_channel(xt))

    return gradcheck(f, [xs])


def _check_concat_channel(rng) -> float:
    b = int(rng.integers(1, 3))
    z, y, x = 2, 3, 2
    a = rng.standard_normal((b, int(rng.integers(1, 3)), z, y, x))
    c = rng.standard_normal((b, int(rng.integers(1, 3)), z, y, x))

    probe = _make_probe(rng)

    def f(at, ct):
        return probe(concat_channel(at, ct))

    return gradcheck(f, [a, c])


def _check_pad_crop(rng) -> float:
    shape = (1, int(rng.integers(1, 3)), 3, 4, 3)
    xs = rng.standard_normal(shape)
    pad = tuple(int(p) for p in rng.integers(0, 3, size=3))

    probe = _make_probe(rng)

    def f(xt):
        padded = pad_spatial(xt, pad)
        return probe(crop_spatial(padded, shape[2:]))

    return gradcheck(f, [xs])


def _simplex_probs(rng, shape) -> np.ndarray:
    raw = rng.uniform(0.2, 1.0, size=shape)
    return raw / raw.sum(axis=1, keepdims=True)


def _check_dice_loss(rng) -> float:
    c = int(rng.integers(2, 4))
    shape = (int(rng.integers(1, 3)), c, 2, 3, 2)
    probs = _simplex_probs(rng, shape)
    labels = rng.integers(0, c, size=(shape[0],) + shape[2:])
    onehot = np.moveaxis(np.eye(c)[labels], -1, 1)
    smoothing = float(rng.choice([0.0, 1.0]))

    def f(pt):
        return _fault_hook(dice_loss(pt, onehot, smoothing=smoothing))

    return gradcheck(f, [probs])


def _check_bootstrap_ce_loss(rng) -> float:
    c = int(rng.integers(2, 4))
    n = int(rng.integers(4, 9))
    shape = (1, c, 1, 1, n)
    # true-class probabilities spaced ~0.1 apart so the hard-voxel
    # selection cannot flip under the +-1e-5 FD perturbation
    base = (rng.permutation(n).astype(np.float64) + 1.0) / (n + 2.0)
    probs = np.empty(shape)
    labels = rng.integers(0, c, size=(1, 1, 1, n))
    for i in range(n):
        rest = rng.uniform(0.2, 1.0, size=c)
        rest[labels[0, 0, 0, i]] = 0.0
        rest *= (1.0 - base[i]) / rest.sum()
        rest[labels[0, 0, 0, i]] = base[i]
        probs[0, :, 0, 0, i] = rest
    fraction = float(rng.choice([0.25, 0.5, 1.0]))

    def f(pt):
        return _fault_hook(bootstrap_ce_loss(pt, labels, fraction=fraction))

    return gradcheck(f, [probs])


CHECKS = (
    ("conv3d", _check_conv3d),
    ("maxpool3d", _check_maxpool3d),
    ("upconv3d", _check_upconv3d),
    ("batchnorm", _check_batchnorm),
    ("relu", _check_relu),
    ("softmax_channel", _check_softmax_channel),
    ("concat_channel", _check_concat_channel),
    ("pad_crop_spatial", _check_pad_crop),
    ("dice_loss", _check_dice_loss),
    ("bootstrap_ce_loss", _check_bootstrap_ce_loss),
)


def run_suite(seed: int = 0, shapes_per_check: int = SHAPES_PER_CHECK,
              tolerance: float = TOLERANCE, fault: str | None = None) -> list:
    """One CheckResult per primitive/loss. ``fault`` names a check whose
    objective gets a deliberately wrong backward injected — the fixture
    proving the suite can fail."""
    names = [name for name, _ in CHECKS]
    if fault is not None and fault not in names:
        raise ValueError(f"unknown fault target {fault!r}; choose from {names}")
    results = []
    for index, (name, check) in enumerate(CHECKS):
        rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        worst = 0.0
        for shape_i in range(shapes_per_check):
            if fault == name:
                err = _run_faulted(check, rng)
            else:
                err = check(rng)
            worst = max(worst, err)
        results.append(CheckResult(name=name, max_rel_err=worst,
                                   n_shapes=shapes_per_check,
                                   tolerance=tolerance))
    return results


def _run_faulted(check, rng) -> float:
    """Re-run a check with the wrong-backward fault switched on."""
    global _FAULT_ACTIVE
    _FAULT_ACTIVE = True
    try:
        return check(rng)
    finally:
        _FAULT_ACTIVE = False


def format_report(results, elapsed_s: float | None = None) -> str:
    lines = ["gradient check suite (64-bit, central differences)"]
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"  {r.name:<{width}}  max rel err {r.max_rel_err:.3e}  "
                     f"over {r.n_shapes} shapes  [{status}]")
    overall = all(r.passed for r in results)
    summary = "all checks passed" if overall else "CHECK FAILURES PRESENT"
    if elapsed_s is not None:
        summary += f" ({elapsed_s:.1f}s)"
    lines.append(summary)
    return "\n".join(lines)


def suite_passed(results) -> bool:
    return all(r.passed for r in results)


def timed_suite(seed: int = 0, shapes_per_check: int = SHAPES_PER_CHECK,
                fault: str | None = None) -> tuple:
    start = time.perf_counter()
    results = run_suite(seed=seed, shapes_per_check=shapes_per_check,
                        fault=fault)
    return results, time.perf_counter() - start
