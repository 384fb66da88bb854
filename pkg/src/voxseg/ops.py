"""Differentiable 3D network primitives.

All operations take activations in (batch, channel, z, y, x) layout and
record themselves on the graph of their bound operands; called on constants
they evaluate eagerly and record nothing. Convolutions are implemented as
cross-correlations lowered to GEMMs via ``sliding_window_view`` +
``tensordot``; each backward rule is the hand-derived adjoint of that
lowering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, _bound, _lift, graph_of
from .errors import ShapeError

PAD_SAME = "same"
PAD_VALID = "valid"


def _require_rank(x: Tensor, rank: int, op: str) -> None:
    if x.data.ndim != rank:
        raise ShapeError(f"{op}: expected rank-{rank} tensor, got shape {x.data.shape}")


# ---------------------------------------------------------------------------
# convolution


def conv3d(x, kernel, bias, padding: str = PAD_SAME) -> Tensor:
    """Cross-correlation of a (B, Cin, Z, Y, X) input with a
    (Cout, Cin, kz, ky, kx) kernel plus a per-channel bias.

    Same-padding (zeros) preserves the spatial extents and requires odd
    kernel extents; valid padding shrinks each extent by k-1.
    """
    x, kernel, bias = _lift(x), _lift(kernel), _lift(bias)
    _require_rank(x, 5, "conv3d input")
    _require_rank(kernel, 5, "conv3d kernel")
    co, ci, kz, ky, kx = kernel.data.shape
    if x.data.shape[1] != ci:
        raise ShapeError(
            f"conv3d: input has {x.data.shape[1]} channels, kernel expects {ci}")
    if bias.data.shape != (co,):
        raise ShapeError(f"conv3d: bias shape {bias.data.shape} != ({co},)")
    if padding == PAD_SAME:
        if kz % 2 == 0 or ky % 2 == 0 or kx % 2 == 0:
            raise ShapeError(f"conv3d: same-padding requires odd kernel extents, got {(kz, ky, kx)}")
        pads = (kz // 2, ky // 2, kx // 2)
    elif padding == PAD_VALID:
        pads = (0, 0, 0)
    else:
        raise ShapeError(f"conv3d: unknown padding {padding!r}")
    pz, py, px = pads

    xp = np.pad(x.data, ((0, 0), (0, 0), (pz, pz), (py, py), (px, px))) \
        if any(pads) else x.data
    if xp.shape[2] < kz or xp.shape[3] < ky or xp.shape[4] < kx:
        raise ShapeError(
            f"conv3d: spatial extents {x.data.shape[2:]} smaller than kernel {(kz, ky, kx)}")

    # windows: (B, Cin, Z', Y', X', kz, ky, kx); contraction over Cin and taps.
    windows = sliding_window_view(xp, (kz, ky, kx), axis=(2, 3, 4))
    out = np.tensordot(windows, kernel.data, axes=((1, 5, 6, 7), (1, 2, 3, 4)))
    out = np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))
    out += bias.data[None, :, None, None, None]

    g = graph_of(x, kernel, bias)
    if g is None:
        return Tensor(out)
    parents = _bound(g, (x, kernel, bias))
    k_data = kernel.data
    in_shape = x.data.shape

    def bwd(gy):
        grads = []
        for t in parents:
            if t is bias:
                grads.append(gy.sum(axis=(0, 2, 3, 4)))
            elif t is kernel:
                grads.append(np.tensordot(gy, windows, axes=((0, 2, 3, 4), (0, 2, 3, 4))))
            else:
                # full correlation of gy with the spatially flipped kernel,
                # then crop the padding margins back off.
                kf = k_data[:, :, ::-1, ::-1, ::-1]
                gp = np.pad(gy, ((0, 0), (0, 0), (kz - 1, kz - 1),
                                 (ky - 1, ky - 1), (kx - 1, kx - 1)))
                gwin = sliding_window_view(gp, (kz, ky, kx), axis=(2, 3, 4))
                dxp = np.tensordot(gwin, kf, axes=((1, 5, 6, 7), (0, 2, 3, 4)))
                dxp = dxp.transpose(0, 4, 1, 2, 3)
                grads.append(np.ascontiguousarray(
                    dxp[:, :, pz:pz + in_shape[2], py:py + in_shape[3], px:px + in_shape[4]]))
        return tuple(grads)

    return g.record(out, parents, bwd)


def upconv3d(x, kernel, bias) -> Tensor:
    """Stride-2 transposed convolution with a (Cin, Cout, 2, 2, 2) kernel;
    spatial extents exactly double. Windows never overlap at stride 2, so
    the forward is a tensordot followed by an interleaving reshape.
    """
    x, kernel, bias = _lift(x), _lift(kernel), _lift(bias)
    _require_rank(x, 5, "upconv3d input")
    _require_rank(kernel, 5, "upconv3d kernel")
    ci, co = kernel.data.shape[:2]
    if kernel.data.shape[2:] != (2, 2, 2):
        raise ShapeError(f"upconv3d: kernel spatial extents must be (2,2,2), got {kernel.data.shape[2:]}")
    if x.data.shape[1] != ci:
        raise ShapeError(f"upconv3d: input has {x.data.shape[1]} channels, kernel expects {ci}")
    if bias.data.shape != (co,):
        raise ShapeError(f"upconv3d: bias shape {bias.data.shape} != ({co},)")
    b, _, z, y, xx = x.data.shape

    # (B,Ci,Z,Y,X) x (Ci,Co,2,2,2) -> (B,Z,Y,X,Co,2,2,2) -> interleave taps.
    t = np.tensordot(x.data, kernel.data, axes=((1,), (0,)))
    out = t.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(b, co, 2 * z, 2 * y, 2 * xx)
    out = np.ascontiguousarray(out)
    out += bias.data[None, :, None, None, None]

    g = graph_of(x, kernel, bias)
    if g is None:
        return Tensor(out)
    parents = _bound(g, (x, kernel, bias))
    x_data, k_data = x.data, kernel.data

    def bwd(gy):
        gw = gy.reshape(b, co, z, 2, y, 2, xx, 2).transpose(0, 2, 4, 6, 1, 3, 5, 7)
        # gw: (B,Z,Y,X,Co,2,2,2), aligned with the forward tensordot output.
        grads = []
        for t_ in parents:
            if t_ is bias:
                grads.append(gy.sum(axis=(0, 2, 3, 4)))
            elif t_ is kernel:
                grads.append(np.tensordot(x_data, gw, axes=((0, 2, 3, 4), (0, 1, 2, 3))))
            else:
                dx = np.tensordot(gw, k_data, axes=((4, 5, 6, 7), (1, 2, 3, 4)))
                grads.append(np.ascontiguousarray(dx.transpose(0, 4, 1, 2, 3)))
        return tuple(grads)

    return g.record(out, parents, bwd)


# ---------------------------------------------------------------------------
# pooling


def maxpool3d(x, window: int = 2) -> Tensor:
    """Non-overlapping 2x2x2 max pooling; each spatial extent must be even.
    Backward routes the gradient to the first maximal element of each window
    in (z, y, x) scan order."""
    x = _lift(x)
    _require_rank(x, 5, "maxpool3d input")
    if window != 2:
        raise ShapeError(f"maxpool3d: only window=2 is supported, got {window}")
    b, c, z, y, xx = x.data.shape
    if z % 2 or y % 2 or xx % 2:
        raise ShapeError(f"maxpool3d: spatial extents must be even, got {(z, y, xx)}")
    zh, yh, xh = z // 2, y // 2, xx // 2

    win = (x.data.reshape(b, c, zh, 2, yh, 2, xh, 2)
           .transpose(0, 1, 2, 4, 6, 3, 5, 7)
           .reshape(b, c, zh, yh, xh, 8))
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    g = graph_of(x)
    if g is None:
        return Tensor(out)

    def bwd(gy):
        gwin = np.zeros_like(win)
        np.put_along_axis(gwin, idx[..., None], gy[..., None], axis=-1)
        gx = (gwin.reshape(b, c, zh, yh, xh, 2, 2, 2)
              .transpose(0, 1, 2, 5, 3, 6, 4, 7)
              .reshape(b, c, z, y, xx))
        return (np.ascontiguousarray(gx),)

    return g.record(out, [x], bwd)


# ---------------------------------------------------------------------------
# normalization and activations


@dataclass
class BatchNormState:
    """Per-channel running statistics updated by exponential moving average
    in train mode and consumed in eval mode."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def identity(cls, channels: int, dtype=np.float32, momentum: float = 0.1) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


def batchnorm(x, gamma, beta, state: BatchNormState, mode: str = "train",
              eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over (B, Z, Y, X) with learned scale and
    shift. Train mode normalizes by batch statistics (biased variance) and
    updates the running statistics; eval mode normalizes by the running
    statistics."""
    x, gamma, beta = _lift(x), _lift(gamma), _lift(beta)
    _require_rank(x, 5, "batchnorm input")
    c = x.data.shape[1]
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(
            f"batchnorm: gamma/beta shapes {gamma.data.shape}/{beta.data.shape} != ({c},)")
    if state.mean.shape != (c,) or state.var.shape != (c,):
        raise ShapeError(f"batchnorm: running stats sized {state.mean.shape}, expected ({c},)")
    if mode not in ("train", "eval"):
        raise ShapeError(f"batchnorm: mode must be 'train' or 'eval', got {mode!r}")
    axes = (0, 2, 3, 4)
    n = x.data.size // c
    if n == 0:
        raise ShapeError("batchnorm: empty channel reduction")

    if mode == "train":
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # biased, matching the normalization
        m = state.momentum
        state.mean = ((1.0 - m) * state.mean + m * mu).astype(state.mean.dtype)
        state.var = ((1.0 - m) * state.var + m * var).astype(state.var.dtype)
    else:
        mu, var = state.mean, state.var

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None, None]) * inv[None, :, None, None, None]
    out = gamma.data[None, :, None, None, None] * xhat + beta.data[None, :, None, None, None]

    g = graph_of(x, gamma, beta)
    if g is None:
        return Tensor(out)
    parents = _bound(g, (x, gamma, beta))
    gamma_data = gamma.data
    train_mode = mode == "train"

    def bwd(gy):
        grads = []
        for t in parents:
            if t is beta:
                grads.append(gy.sum(axis=axes))
            elif t is gamma:
                grads.append((gy * xhat).sum(axis=axes))
            else:
                gxhat = gy * gamma_data[None, :, None, None, None]
                if train_mode:
                    mean_g = gxhat.mean(axis=axes, keepdims=True)
                    mean_gx = (gxhat * xhat).mean(axis=axes, keepdims=True)
                    dx = inv[None, :, None, None, None] * (gxhat - mean_g - xhat * mean_gx)
                else:
                    dx = gxhat * inv[None, :, None, None, None]
                grads.append(dx)
        return tuple(grads)

    return g.record(out, parents, bwd)


def relu(x) -> Tensor:
    """Elementwise max(0, x); subgradient 0 at x = 0."""
    x = _lift(x)
    out = np.maximum(x.data, 0)
    g = graph_of(x)
    if g is None:
        return Tensor(out)
    mask = x.data > 0

    def bwd(gy):
        return (gy * mask,)

    return g.record(out, [x], bwd)


def softmax_channel(x) -> Tensor:
    """Per-voxel softmax over the channel axis with max-subtraction."""
    x = _lift(x)
    _require_rank(x, 5, "softmax_channel input")
    if x.data.shape[1] < 2:
        raise ShapeError(f"softmax_channel: needs >= 2 channels, got {x.data.shape[1]}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=1, keepdims=True)

    g = graph_of(x)
    if g is None:
        return Tensor(p)

    def bwd(gy):
        return (p * (gy - (p * gy).sum(axis=1, keepdims=True)),)

    return g.record(p, [x], bwd)


# ---------------------------------------------------------------------------
# channel plumbing


def concat_channel(a, b) -> Tensor:
    """Concatenate two activations along the channel axis; backward splits
    the gradient back into the two channel ranges."""
    a, b = _lift(a), _lift(b)
    _require_rank(a, 5, "concat_channel")
    _require_rank(b, 5, "concat_channel")
    sa, sb = a.data.shape, b.data.shape
    if sa[0] != sb[0] or sa[2:] != sb[2:]:
        raise ShapeError(f"concat_channel: non-channel extents differ, {sa} vs {sb}")
    ca = sa[1]
    out = np.concatenate([a.data, b.data], axis=1)

    g = graph_of(a, b)
    if g is None:
        return Tensor(out)
    parents = _bound(g, (a, b))

    def bwd(gy):
        return tuple(np.ascontiguousarray(gy[:, :ca] if t is a else gy[:, ca:])
                     for t in parents)

    return g.record(out, parents, bwd)


def pad_spatial(x, pad) -> Tensor:
    """Zero-pad the three spatial axes at their high ends by (pz, py, px);
    used to fit arbitrary crop extents to the network's pooling divisor."""
    x = _lift(x)
    _require_rank(x, 5, "pad_spatial")
    pz, py, px = (int(p) for p in pad)
    if min(pz, py, px) < 0:
        raise ShapeError(f"pad_spatial: negative pad {pad}")
    if pz == py == px == 0:
        return x
    out = np.pad(x.data, ((0, 0), (0, 0), (0, pz), (0, py), (0, px)))

    g = graph_of(x)
    if g is None:
        return Tensor(out)
    _, _, z, y, w = x.data.shape

    def bwd(gy):
        return (np.ascontiguousarray(gy[:, :, :z, :y, :w]),)

    return g.record(out, [x], bwd)


def crop_spatial(x, dims) -> Tensor:
    """Keep the leading (z, y, x) extents of each spatial axis; the inverse
    of pad_spatial. Backward scatters into a zero-padded gradient."""
    x = _lift(x)
    _require_rank(x, 5, "crop_spatial")
    z, y, w = (int(d) for d in dims)
    _, _, sz, sy, sw = x.data.shape
    if not (0 < z <= sz and 0 < y <= sy and 0 < w <= sw):
        raise ShapeError(
            f"crop_spatial: target {dims} invalid for spatial {(sz, sy, sw)}")
    if (z, y, w) == (sz, sy, sw):
        return x
    out = np.ascontiguousarray(x.data[:, :, :z, :y, :w])

    g = graph_of(x)
    if g is None:
        return Tensor(out)
    shape = x.data.shape

    def bwd(gy):
        gx = np.zeros(shape, dtype=gy.dtype)
        gx[:, :, :z, :y, :w] = gy
        return (gx,)

    return g.record(out, [x], bwd)


def slice_channels(x, start: int, stop: int) -> Tensor:
    """Channel range [start, stop); the complementary inverse of
    concat_channel."""
    x = _lift(x)
    _require_rank(x, 5, "slice_channels")
    c = x.data.shape[1]
    if not (0 <= start < stop <= c):
        raise ShapeError(f"slice_channels: range [{start}, {stop}) invalid for {c} channels")
    out = np.ascontiguousarray(x.data[:, start:stop])

    g = graph_of(x)
    if g is None:
        return Tensor(out)
    shape = x.data.shape

    def bwd(gy):
        gx = np.zeros(shape, dtype=gy.dtype)
        gx[:, start:stop] = gy
        return (gx,)

    return g.record(out, [x], bwd)
