"""Full-volume inference: resample to the working spacing, normalize,
tile the z axis with 50% overlapping crops, run eval-mode forwards,
stitch by averaging logits where tiles overlap, take the per-voxel
argmax, and map the labels back onto the input grid (nearest), so the
output label volume always matches the input dims exactly.
"""

from __future__ import annotations

import numpy as np

from .network import MultiTaskNet, forward_fitted
from .preprocess import (NEAREST, TARGET_SPACING, extract_crop,
                         normalize_intensity, plan_crops, resample_isotropic,
                         resample_to)
from .volume import Volume

DEFAULT_CROP = (144, 250, 250)


def stitched_logits(net: MultiTaskNet, normalized: Volume, task: str,
                    crop=DEFAULT_CROP, z_overlap: int | None = None) -> np.ndarray:
    """(num_classes, z, y, x) averaged logits over the normalized volume.
    Overlap defaults to half the crop depth; every voxel is covered by at
    least one tile, overlapped voxels average their tiles' logits."""
    spec = net.task(task)
    if z_overlap is None:
        z_overlap = crop[0] // 2
    windows = plan_crops(normalized.dims, crop, z_overlap=z_overlap)
    logit_sum = np.zeros((spec.num_classes,) + normalized.dims, dtype=np.float32)
    count = np.zeros(normalized.dims, dtype=np.float32)
    for w in windows:
        tile = extract_crop(normalized.data, w, crop)[None, None]
        logits = forward_fitted(net, None, tile, task, mode="eval").data[0]
        (sz, ez), (sy, ey), (sx, ex) = w.src
        (dz, fz), (dy, fy), (dx, fx) = w.dst
        logit_sum[:, sz:ez, sy:ey, sx:ex] += logits[:, dz:fz, dy:fy, dx:fx]
        count[sz:ez, sy:ey, sx:ex] += 1.0
    return logit_sum / count


def predict_volume(net: MultiTaskNet, image: Volume, task: str,
                   crop=DEFAULT_CROP, target_spacing: float = TARGET_SPACING,
                   z_overlap: int | None = None) -> Volume:
    """Label volume for one task on the input image's own grid."""
    resampled = resample_isotropic(image, target_spacing)
    normalized = normalize_intensity(resampled)
    logits = stitched_logits(net, normalized, task, crop=crop,
                             z_overlap=z_overlap)
    labels = np.argmax(logits, axis=0).astype(np.uint8)
    working = Volume(labels, spacing=resampled.spacing, origin=resampled.origin)
    return resample_to(working, image.dims, image.spacing, image.origin,
                       interp=NEAREST)
