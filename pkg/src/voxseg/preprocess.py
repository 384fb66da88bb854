"""Preprocessing: isotropic resampling, intensity normalization, z-tiled
cropping with y/x centring, and rotation/scale augmentation.

All geometric transforms align voxel centres between corner-aligned grids,
so resampling a volume onto its own spacing is the identity bit-for-bit.
Images interpolate trilinearly; label masks use nearest-neighbour so no new
class ids can appear.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .dataset import Sample
from .volume import Volume

TARGET_SPACING = 1.5
HU_WINDOW = (-200.0, 500.0)
TRILINEAR = "trilinear"
NEAREST = "nearest"


def _output_dims(dims, spacing, target: float) -> tuple:
    return tuple(max(1, int(math.floor(d * s / target + 0.5)))
                 for d, s in zip(dims, spacing))


def resample_isotropic(volume: Volume, target_spacing: float = TARGET_SPACING,
                       interp: str = TRILINEAR) -> Volume:
    """Resample onto an isotropic grid of the requested spacing. Output
    extents are round(dims * spacing / target), at least 1; edges clamp."""
    if interp not in (TRILINEAR, NEAREST):
        raise ValueError(f"interp must be '{TRILINEAR}' or '{NEAREST}', got {interp!r}")
    if target_spacing <= 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    out_dims = _output_dims(volume.dims, volume.spacing, target_spacing)

    # voxel centres of corner-aligned grids:
    #   in_coord = (out_idx + 0.5) * (target / in_spacing) - 0.5
    axes = [(np.arange(n) + 0.5) * (target_spacing / s) - 0.5
            for n, s in zip(out_dims, volume.spacing)]
    grid = np.meshgrid(*axes, indexing="ij")
    order = 1 if interp == TRILINEAR else 0
    resampled = ndimage.map_coordinates(volume.data, grid, order=order,
                                        mode="nearest", output=volume.data.dtype)
    origin = tuple(o - 0.5 * s + 0.5 * target_spacing
                   for o, s in zip(volume.origin, volume.spacing))
    return Volume(resampled, spacing=(target_spacing,) * 3, origin=origin)


def resample_sample(sample: Sample, target_spacing: float = TARGET_SPACING) -> Sample:
    return Sample(image=resample_isotropic(sample.image, target_spacing, TRILINEAR),
                  mask=resample_isotropic(sample.mask, target_spacing, NEAREST),
                  task=sample.task, case_id=sample.case_id)


def resample_to(volume: Volume, dims, spacing, origin,
                interp: str = TRILINEAR) -> Volume:
    """Resample onto an explicit target grid (extents, spacing, origin in
    the same physical frame); the return-trip companion of
    resample_isotropic, used to map predicted labels back onto the grid of
    the original image. Resampling onto the volume's own grid is the
    identity bit-for-bit."""
    if interp not in (TRILINEAR, NEAREST):
        raise ValueError(f"interp must be '{TRILINEAR}' or '{NEAREST}', got {interp!r}")
    axes = [(float(oo) + np.arange(n) * float(so) - float(oi)) / float(si)
            for n, so, oo, si, oi in zip(dims, spacing, origin,
                                         volume.spacing, volume.origin)]
    grid = np.meshgrid(*axes, indexing="ij")
    order = 1 if interp == TRILINEAR else 0
    data = ndimage.map_coordinates(volume.data, grid, order=order,
                                   mode="nearest", output=volume.data.dtype)
    return Volume(data, spacing=tuple(float(s) for s in spacing),
                  origin=tuple(float(o) for o in origin))


def normalize_intensity(volume: Volume, window: tuple = HU_WINDOW) -> Volume:
    """Clamp to the HU window and map it affinely onto [0, 1]."""
    lo, hi = window
    if not hi > lo:
        raise ValueError(f"window must satisfy hi > lo, got {window}")
    data = np.clip(volume.data.astype(np.float32), lo, hi)
    data = (data - lo) / np.float32(hi - lo)
    return Volume(data.astype(np.float32), spacing=volume.spacing, origin=volume.origin)


# ---------------------------------------------------------------------------
# cropping


@dataclass
class CropWindow:
    """Placement of one crop: per-axis source range and its destination
    range inside the (padded) target-shaped crop."""

    src: tuple  # ((z0, z1), (y0, y1), (x0, x1)) in the source volume
    dst: tuple  # same ranges inside the crop array

    @property
    def z_start(self) -> int:
        return self.src[0][0]


def _axis_window(extent: int, target: int):
    """Centre-crop when too big, centre-pad when too small (one window)."""
    if extent >= target:
        start = (extent - target) // 2
        return (start, start + target), (0, target)
    pad = (target - extent) // 2
    return (0, extent), (pad, pad + extent)


def _z_starts(extent: int, target: int, overlap: int) -> list:
    if extent <= target:
        return [0]
    stride = max(1, target - overlap)
    starts = list(range(0, extent - target + 1, stride))
    if starts[-1] != extent - target:
        starts.append(extent - target)  # final window flush with the end
    return starts


def plan_crops(dims, target, z_overlap: int = 0) -> list:
    """Tile the z axis (with the given voxel overlap) and centre y/x."""
    tz, ty, tx = target
    wy, dy = _axis_window(dims[1], ty)
    wx, dx = _axis_window(dims[2], tx)
    windows = []
    for z0 in _z_starts(dims[0], tz, z_overlap):
        if dims[0] >= tz:
            wz, dz = (z0, z0 + tz), (0, tz)
        else:
            wz, dz = _axis_window(dims[0], tz)
        windows.append(CropWindow(src=(wz, wy, wx), dst=(dz, dy, dx)))
    return windows


def extract_crop(data: np.ndarray, window: CropWindow, target,
                 fill=0) -> np.ndarray:
    out = np.full(tuple(target), fill, dtype=data.dtype)
    (sz, ez), (sy, ey), (sx, ex) = window.src
    (dz, fz), (dy, fy), (dx, fx) = window.dst
    out[dz:fz, dy:fy, dx:fx] = data[sz:ez, sy:ey, sx:ex]
    return out


def crop_z(sample: Sample, target=(144, 250, 250), z_overlap: int = 0) -> list:
    """Split one sample into z-tiles of the target shape; y/x are centre
    cropped or zero padded. Crops may legitimately contain no foreground."""
    dims = sample.image.dims
    crops = []
    for i, window in enumerate(plan_crops(dims, target, z_overlap)):
        image = Volume(extract_crop(sample.image.data, window, target),
                       spacing=sample.image.spacing, origin=sample.image.origin)
        mask = Volume(extract_crop(sample.mask.data, window, target),
                      spacing=sample.mask.spacing, origin=sample.mask.origin)
        crops.append(Sample(image=image, mask=mask, task=sample.task,
                            case_id=f"{sample.case_id}#z{window.z_start}"))
    return crops


# ---------------------------------------------------------------------------
# augmentation


def apply_augment(sample: Sample, angle_deg: float, scale: float) -> Sample:
    """Rotate about the z axis and scale isotropically about the volume
    centre; trilinear for the image, nearest for the mask."""
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    # affine_transform maps output index -> input index: inverse transform
    rot = np.array([[1.0, 0.0, 0.0],
                    [0.0, c, s],
                    [0.0, -s, c]]) / scale
    centre = (np.asarray(sample.image.dims) - 1) / 2.0
    offset = centre - rot @ centre

    def warp(vol: Volume, order: int) -> Volume:
        data = ndimage.affine_transform(vol.data, rot, offset=offset, order=order,
                                        mode="constant", cval=0,
                                        output=vol.data.dtype)
        return Volume(data, spacing=vol.spacing, origin=vol.origin)

    return Sample(image=warp(sample.image, 1), mask=warp(sample.mask, 0),
                  task=sample.task, case_id=sample.case_id)


def augment(sample: Sample, rng_seed: int, max_angle_deg: float = 10.0,
            scale_range: tuple = (0.9, 1.1)) -> Sample:
    """Seed-deterministic random rotation/scale draw."""
    rng = np.random.default_rng(rng_seed)
    angle = float(rng.uniform(-max_angle_deg, max_angle_deg))
    scale = float(rng.uniform(*scale_range))
    return apply_augment(sample, angle, scale)
