"""Deterministic synthetic phantoms: lumpy-ellipsoid "kidneys" and a
"liver" on a noisy CT-like intensity grid, with known analytic geometry.

Each call yields two distinct cases. The kidney-task case labels {0, left
kidney, right kidney} and leaves its liver-intensity region as background;
the liver-task case labels {0, liver} and leaves its kidney-intensity blobs
as background. That asymmetry reproduces the inconsistent background-class
definition that motivates sharing only the encoder between tasks.

Intensity cue: the left and right kidneys get different HU bands, since a
translation-equivariant network cannot tell apart two identical-looking
objects by position alone. Both bands sit outside the background bulk (one
dark, one bright) rather than between background and liver: a mid-band
class is prone to losing every ReLU feature to the two extremes during a
short training run, after which no gradient path can revive it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import Sample
from .errors import ConfigError
from .volume import Volume

HU_BACKGROUND = -60.0
HU_LEFT_KIDNEY = -180.0
HU_RIGHT_KIDNEY = 260.0
HU_LIVER = 380.0

BG, LEFT_KIDNEY, RIGHT_KIDNEY = 0, 1, 2
LIVER = 1


@dataclass
class PhantomSpec:
    """Everything that determines one generated pair, seed included."""

    seed: int = 0
    dims: tuple = (32, 32, 32)
    spacing: float = 1.5
    kidney_radii_mm: tuple = (5.5, 9.0)
    liver_radii_mm: tuple = (8.0, 13.0)
    center_jitter_mm: float = 2.0
    lumpiness: float = 0.0
    contact_prob: float = 0.3
    noise_hu: float = 8.0

    def __post_init__(self):
        if any(d < 4 for d in self.dims):
            raise ConfigError(f"grid dims too small: {self.dims}")
        if self.spacing <= 0:
            raise ConfigError(f"spacing must be positive, got {self.spacing}")
        for name, (lo, hi) in (("kidney", self.kidney_radii_mm),
                               ("liver", self.liver_radii_mm)):
            if not (0 < lo <= hi):
                raise ConfigError(f"{name} radius range invalid: ({lo}, {hi})")
            if 2 * hi >= min(self.dims) * self.spacing:
                raise ConfigError(
                    f"{name} radius {hi} mm cannot fit a "
                    f"{min(self.dims) * self.spacing} mm grid")
        if not (0.0 <= self.contact_prob <= 1.0):
            raise ConfigError(f"contact_prob must be in [0, 1], got {self.contact_prob}")
        if self.lumpiness < 0 or self.noise_hu < 0:
            raise ConfigError("lumpiness and noise_hu must be >= 0")


@dataclass
class Ellipsoid:
    center_mm: tuple  # (z, y, x)
    radii_mm: tuple  # (rz, ry, rx)

    @property
    def analytic_volume_mm3(self) -> float:
        rz, ry, rx = self.radii_mm
        return 4.0 / 3.0 * math.pi * rz * ry * rx


@dataclass
class PhantomGeometry:
    left_kidney: Ellipsoid
    right_kidney: Ellipsoid
    kidney_case_liver: Ellipsoid
    contact: bool
    liver: Ellipsoid
    liver_case_blobs: list = field(default_factory=list)


def _draw_ellipsoid(rng, spec: PhantomSpec, frac_center, radii_range) -> Ellipsoid:
    extent = tuple(n * spec.spacing for n in spec.dims)
    radii = tuple(float(rng.uniform(*radii_range)) for _ in range(3))
    center = []
    for axis in range(3):
        c = frac_center[axis] * extent[axis] + float(
            rng.uniform(-spec.center_jitter_mm, spec.center_jitter_mm))
        # clamp so the ellipsoid always fits the grid interior
        lo = radii[axis] - 0.5 * spec.spacing
        hi = extent[axis] - radii[axis] - 0.5 * spec.spacing
        center.append(float(min(max(c, lo), hi)))
    return Ellipsoid(center_mm=tuple(center), radii_mm=radii)


def draw_geometry(spec: PhantomSpec) -> PhantomGeometry:
    """The exact shapes a seed produces; pure function of the PhantomSpec."""
    rng_k = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    rng_l = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))

    left = _draw_ellipsoid(rng_k, spec, (0.50, 0.42, 0.27), spec.kidney_radii_mm)
    right = _draw_ellipsoid(rng_k, spec, (0.50, 0.42, 0.73), spec.kidney_radii_mm)
    liver_blob = _draw_ellipsoid(rng_k, spec, (0.48, 0.72, 0.66), spec.liver_radii_mm)
    contact = bool(rng_k.uniform() < spec.contact_prob)
    if contact:
        # slide the liver blob until it just touches the right kidney
        direction = np.asarray(liver_blob.center_mm) - np.asarray(right.center_mm)
        norm = float(np.linalg.norm(direction))
        if norm > 0:
            gap = 0.98 * (max(right.radii_mm) + max(liver_blob.radii_mm))
            centre = np.asarray(right.center_mm) + direction / norm * gap
            extent = np.asarray(spec.dims) * spec.spacing
            lo = np.asarray(liver_blob.radii_mm) - 0.5 * spec.spacing
            hi = extent - np.asarray(liver_blob.radii_mm) - 0.5 * spec.spacing
            liver_blob = Ellipsoid(tuple(np.clip(centre, lo, hi)),
                                   liver_blob.radii_mm)

    liver = _draw_ellipsoid(rng_l, spec, (0.50, 0.55, 0.62), spec.liver_radii_mm)
    blobs = [_draw_ellipsoid(rng_l, spec, (0.50, 0.40, 0.22), spec.kidney_radii_mm),
             _draw_ellipsoid(rng_l, spec, (0.50, 0.40, 0.80), spec.kidney_radii_mm)]
    return PhantomGeometry(left_kidney=left, right_kidney=right,
                           kidney_case_liver=liver_blob, contact=contact,
                           liver=liver, liver_case_blobs=blobs)


def _inside(coords, ellipsoid: Ellipsoid, lumpiness: float) -> np.ndarray:
    """Boolean mask of voxel centres inside a (possibly lumpy) ellipsoid."""
    dz = coords[0] - ellipsoid.center_mm[0]
    dy = coords[1] - ellipsoid.center_mm[1]
    dx = coords[2] - ellipsoid.center_mm[2]
    rz, ry, rx = ellipsoid.radii_mm
    rho = np.sqrt((dz / rz) ** 2 + (dy / ry) ** 2 + (dx / rx) ** 2)
    if lumpiness == 0.0:
        return rho <= 1.0
    phi = np.arctan2(dy, dx)
    psi = np.arctan2(dz, np.hypot(dy, dx))
    bump = 1.0 + lumpiness * np.sin(3.0 * phi) * np.cos(2.0 * psi + 0.7)
    return rho <= bump


def _grid_mm(spec: PhantomSpec):
    axes = [np.arange(n, dtype=np.float64) * spec.spacing for n in spec.dims]
    return np.meshgrid(*axes, indexing="ij")


def generate_phantom_pair(spec: PhantomSpec) -> tuple:
    """(kidney-task Sample, liver-task Sample), bit-identical per spec."""
    geom = draw_geometry(spec)
    coords = _grid_mm(spec)
    spacing = (spec.spacing,) * 3

    noise_k = np.random.default_rng(np.random.SeedSequence([spec.seed, 2]))
    noise_l = np.random.default_rng(np.random.SeedSequence([spec.seed, 3]))

    # kidney-task case: liver region present but labelled background
    left = _inside(coords, geom.left_kidney, spec.lumpiness)
    right = _inside(coords, geom.right_kidney, spec.lumpiness)
    liver_bg = _inside(coords, geom.kidney_case_liver, spec.lumpiness)
    image_k = np.full(spec.dims, HU_BACKGROUND, dtype=np.float64)
    image_k[liver_bg] = HU_LIVER
    image_k[left] = HU_LEFT_KIDNEY
    image_k[right] = HU_RIGHT_KIDNEY
    image_k += noise_k.normal(0.0, spec.noise_hu, size=spec.dims)
    mask_k = np.zeros(spec.dims, dtype=np.uint8)
    mask_k[left] = LEFT_KIDNEY
    mask_k[right] = RIGHT_KIDNEY  # kidneys painted last: they win overlaps
    kidney_sample = Sample(
        image=Volume(image_k.astype(np.float32), spacing=spacing),
        mask=Volume(mask_k, spacing=spacing),
        task="kidney", case_id=f"k{spec.seed:04d}")

    # liver-task case: kidney blobs present but labelled background
    liver = _inside(coords, geom.liver, spec.lumpiness)
    blob_l = _inside(coords, geom.liver_case_blobs[0], spec.lumpiness)
    blob_r = _inside(coords, geom.liver_case_blobs[1], spec.lumpiness)
    image_l = np.full(spec.dims, HU_BACKGROUND, dtype=np.float64)
    image_l[blob_l] = HU_LEFT_KIDNEY
    image_l[blob_r] = HU_RIGHT_KIDNEY
    image_l[liver] = HU_LIVER
    image_l += noise_l.normal(0.0, spec.noise_hu, size=spec.dims)
    mask_l = np.zeros(spec.dims, dtype=np.uint8)
    mask_l[liver] = LIVER
    liver_sample = Sample(
        image=Volume(image_l.astype(np.float32), spacing=spacing),
        mask=Volume(mask_l, spacing=spacing),
        task="liver", case_id=f"l{spec.seed:04d}")

    return kidney_sample, liver_sample


def kidney_analytic_volumes_mm3(spec: PhantomSpec) -> tuple:
    """Exact ellipsoid volumes (left, right); meaningful when lumpiness = 0."""
    geom = draw_geometry(spec)
    return (geom.left_kidney.analytic_volume_mm3,
            geom.right_kidney.analytic_volume_mm3)
