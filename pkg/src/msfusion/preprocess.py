"""Six-step CT/PET preparation: photometry, calibration, resampling,
alignment, masking/cropping, clipping/normalization.

Volumes store voxels as ``data[z, y, x]``; ``spacing`` and ``origin`` are
given in (x, y, z) millimetres, so axis ``i`` of ``data`` pairs with
element ``2 - i`` of the geometry tuples.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError

TARGET_SPACING = (0.977, 0.977, 3.27)
CT_RANGE = (-1024.0, 1024.0)
PET_RANGE = (0.0, 20.0)
FDG_HALF_LIFE_MIN = 109.77
MODALITIES = ("CT", "PET", "MASK")


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    modality: str = "CT"
    photometric: str = "standard"
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ConfigError(f"volume data must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        if len(self.spacing) != 3 or len(self.origin) != 3:
            raise ConfigError("spacing and origin need three components (x, y, z)")
        if min(self.spacing) <= 0:
            raise ConfigError(f"spacing must be positive, got {self.spacing}")
        if self.modality not in MODALITIES:
            raise ConfigError(f"unknown modality {self.modality!r}")
        if self.photometric not in ("standard", "inverted"):
            raise ConfigError(f"unknown photometric interpretation {self.photometric!r}")
        if self.modality == "MASK" and not np.isin(self.data, (0.0, 1.0)).all():
            raise DataError("mask volumes may only contain 0 and 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def spacing_zyx(self) -> np.ndarray:
        return np.array(self.spacing[::-1])

    def origin_zyx(self) -> np.ndarray:
        return np.array(self.origin[::-1])

    def extent_end_zyx(self) -> np.ndarray:
        """Physical position of the last voxel centre along each data axis."""
        return self.origin_zyx() + (np.array(self.shape) - 1) * self.spacing_zyx()

    def with_data(self, data: np.ndarray, **changes) -> "Volume":
        return replace(self, data=data, **changes)


@dataclass(frozen=True)
class AcquisitionMeta:
    rescale_slope: float = 1.0
    rescale_intercept: float = 0.0
    injected_dose_mbq: float = 350.0
    body_weight_kg: float = 70.0
    injection_to_scan_min: float = 0.0
    tracer_half_life_min: float = FDG_HALF_LIFE_MIN
    photometric: str = "standard"

    def __post_init__(self):
        if self.injected_dose_mbq <= 0 or self.body_weight_kg <= 0:
            raise DataError("injected dose and body weight must be positive")
        if self.tracer_half_life_min <= 0:
            raise DataError("tracer half-life must be positive")


@dataclass
class PreprocessedPair:
    ct: Volume
    pet: Volume
    mask: Volume
    crop_box: tuple[tuple[int, int], ...]
    spacing: tuple[float, float, float] = TARGET_SPACING

    def check(self) -> None:
        if not (self.ct.shape == self.pet.shape == self.mask.shape):
            raise DataError("CT, PET and mask grids differ")
        for v in (self.ct, self.pet):
            if v.data.min() < 0 or v.data.max() > 1:
                raise DataError(f"{v.modality} intensities escape [0, 1]")


# ---------------------------------------------------------------------------
# steps 1-2: intensities
# ---------------------------------------------------------------------------


def fix_photometric(v: Volume) -> Volume:
    if v.photometric == "standard":
        return v
    lo, hi = v.data.min(), v.data.max()
    return v.with_data((hi + lo) - v.data, photometric="standard")


def to_hu(v: Volume, m: AcquisitionMeta) -> Volume:
    if v.modality != "CT":
        raise DataError(f"Hounsfield conversion needs a CT volume, got {v.modality}")
    data = v.data.astype(np.float64) * m.rescale_slope + m.rescale_intercept
    return v.with_data(data.astype(np.float32))


def suv_factor(m: AcquisitionMeta) -> float:
    """Multiplier taking Bq/ml to body-weight SUV with the dose decayed to scan time."""
    if m.injected_dose_mbq <= 0 or m.body_weight_kg <= 0:
        raise DataError("injected dose and body weight must be positive")
    decayed_dose_bq = m.injected_dose_mbq * 1e6 * 2.0 ** (-m.injection_to_scan_min / m.tracer_half_life_min)
    return m.body_weight_kg * 1000.0 / decayed_dose_bq


def to_suv(v: Volume, m: AcquisitionMeta) -> Volume:
    if v.modality != "PET":
        raise DataError(f"SUV conversion needs a PET volume, got {v.modality}")
    return v.with_data((v.data.astype(np.float64) * suv_factor(m)).astype(np.float32))


# ---------------------------------------------------------------------------
# steps 3-4: geometry
# ---------------------------------------------------------------------------


def _interp_axis(data: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    """Linear interpolation along one axis at fractional indices, clamped to the edges."""
    n = data.shape[axis]
    coords = np.clip(coords, 0.0, n - 1)
    lo = np.floor(coords).astype(np.intp)
    lo = np.minimum(lo, max(n - 2, 0))
    hi = np.minimum(lo + 1, n - 1)
    t = coords - lo
    shape = [1] * data.ndim
    shape[axis] = -1
    t = t.reshape(shape)
    a = np.take(data, lo, axis=axis)
    b = np.take(data, hi, axis=axis)
    # a + t*(b - a) returns a exactly when neighbours agree
    return a + t * (b - a)


def sample_grid(v: Volume, origin_zyx, spacing_zyx, shape) -> np.ndarray:
    """Trilinear samples of ``v`` on an axis-aligned grid (physical coordinates)."""
    data = v.data.astype(np.float64)
    src_origin, src_spacing = v.origin_zyx(), v.spacing_zyx()
    for axis in range(3):
        pos = origin_zyx[axis] + np.arange(shape[axis]) * spacing_zyx[axis]
        data = _interp_axis(data, axis, (pos - src_origin[axis]) / src_spacing[axis])
    return data


def _grid_size(extent: float, step: float) -> int:
    return int(np.floor(extent / step + 1e-6)) + 1


def resample(v: Volume, target_spacing: Sequence[float] = TARGET_SPACING) -> Volume:
    """Resample onto ``target_spacing`` (x, y, z) covering the same physical extent."""
    target = tuple(float(s) for s in target_spacing)
    if min(target) <= 0:
        raise ConfigError(f"target spacing must be positive, got {target}")
    if target == v.spacing:
        return v
    tz = np.array(target[::-1])
    extent = (np.array(v.shape) - 1) * v.spacing_zyx()
    shape = tuple(_grid_size(e, s) for e, s in zip(extent, tz))
    data = sample_grid(v, v.origin_zyx(), tz, shape)
    if v.modality == "MASK":
        data = (data >= 0.5).astype(np.float32)
    return v.with_data(data.astype(np.float32), spacing=target)


def align(ct: Volume, pet: Volume) -> tuple[Volume, Volume]:
    """Resample both volumes onto the grid spanning their physical overlap."""
    if not np.allclose(ct.spacing, pet.spacing):
        raise DataError(f"align needs a common spacing, got {ct.spacing} and {pet.spacing}")
    if ct.origin == pet.origin and ct.shape == pet.shape:
        return ct, pet
    spacing = ct.spacing_zyx()
    lo = np.maximum(ct.origin_zyx(), pet.origin_zyx())
    hi = np.minimum(ct.extent_end_zyx(), pet.extent_end_zyx())
    if np.any(hi < lo - 1e-6):
        raise DataError("CT and PET volumes do not overlap")
    shape = tuple(_grid_size(h - l, s) for l, h, s in zip(lo, hi, spacing))
    origin = tuple(lo[::-1])
    out = []
    for v in (ct, pet):
        data = sample_grid(v, lo, spacing, shape).astype(np.float32)
        out.append(v.with_data(data, origin=origin))
    return out[0], out[1]


# ---------------------------------------------------------------------------
# steps 5-6: masking, cropping, normalization
# ---------------------------------------------------------------------------


def clip_range(modality: str) -> tuple[float, float]:
    if modality == "CT":
        return CT_RANGE
    if modality == "PET":
        return PET_RANGE
    raise DataError(f"no intensity range defined for {modality}")


def mask_bounding_box(mask: np.ndarray) -> tuple[tuple[int, int], ...]:
    """Half-open index bounds of the non-zero region along each axis."""
    nz = np.nonzero(mask)
    if nz[0].size == 0:
        raise DataError("mask is empty")
    return tuple((int(idx.min()), int(idx.max()) + 1) for idx in nz)


def resize(v: Volume, out_shape: Sequence[int]) -> Volume:
    """Trilinear resize so the same physical span is covered by ``out_shape`` voxels."""
    out_shape = tuple(int(n) for n in out_shape)
    if len(out_shape) != 3 or min(out_shape) < 1:
        raise ConfigError(f"bad output shape {out_shape}")
    if out_shape == v.shape:
        return v
    src = np.array(v.shape, dtype=np.float64)
    dst = np.array(out_shape, dtype=np.float64)
    spacing = v.spacing_zyx()
    # first and last voxel centres stay put; a single output voxel sits mid-span
    step = np.where(dst > 1, (src - 1) / np.maximum(dst - 1, 1), 0.0)
    origin = np.where(dst > 1, v.origin_zyx(), v.origin_zyx() + 0.5 * (src - 1) * spacing)
    data = sample_grid(v, origin, spacing * step, out_shape)
    if v.modality == "MASK":
        data = (data >= 0.5).astype(np.float32)
    new_spacing = np.where(step > 0, spacing * step, spacing * src / dst)
    return v.with_data(data.astype(np.float32), spacing=tuple(new_spacing[::-1]), origin=tuple(origin[::-1]))


def apply_mask_and_crop(pair: tuple[Volume, Volume], mask: Volume, out_shape: Sequence[int]) -> PreprocessedPair:
    ct, pet = pair
    if not (ct.shape == pet.shape == mask.shape):
        raise DataError(f"mask grid {mask.shape} does not match volumes {ct.shape} / {pet.shape}")
    box = mask_bounding_box(mask.data)
    sl = tuple(slice(a, b) for a, b in box)
    inside = mask.data[sl] > 0
    offset_zyx = np.array([a for a, _ in box]) * ct.spacing_zyx()
    cropped = []
    for v in (ct, pet):
        lo = clip_range(v.modality)[0]
        data = np.where(inside, v.data[sl], np.float32(lo))
        origin = tuple((v.origin_zyx() + offset_zyx)[::-1])
        cropped.append(resize(v.with_data(data, origin=origin), out_shape))
    mvol = Volume(inside.astype(np.float32), ct.spacing, tuple((ct.origin_zyx() + offset_zyx)[::-1]), "MASK")
    mvol = resize(mvol, out_shape)
    return PreprocessedPair(cropped[0], cropped[1], mvol, box, spacing=ct.spacing)


def clip_normalize(v: Volume) -> Volume:
    """Clip to the modality's fixed range and map that range onto [0, 1]."""
    if v.normalized:
        return v
    lo, hi = clip_range(v.modality)
    data = (np.clip(v.data.astype(np.float64), lo, hi) - lo) / (hi - lo)
    return v.with_data(data.astype(np.float32), normalized=True)


def preprocess_study(
    ct: Volume,
    pet: Volume,
    mask: Volume,
    meta: AcquisitionMeta,
    out_shape: Sequence[int],
    target_spacing: Sequence[float] = TARGET_SPACING,
) -> PreprocessedPair:
    """Full pipeline for one study.

    ``mask`` is the externally produced lung mask on the CT grid; it
    follows the CT through resampling and alignment.
    """
    ct = to_hu(fix_photometric(ct), meta)
    pet = to_suv(fix_photometric(pet), meta)
    ct = resample(ct, target_spacing)
    pet = resample(pet, target_spacing)
    mask = resample(mask, target_spacing)
    ct_al, pet_al = align(ct, pet)
    if mask.shape != ct_al.shape or mask.origin != ct_al.origin:
        data = sample_grid(mask, ct_al.origin_zyx(), ct_al.spacing_zyx(), ct_al.shape)
        mask = Volume((data >= 0.5).astype(np.float32), ct_al.spacing, ct_al.origin, "MASK")
    pair = apply_mask_and_crop((ct_al, pet_al), mask, out_shape)
    pair.ct = clip_normalize(pair.ct)
    pair.pet = clip_normalize(pair.pet)
    pair.spacing = tuple(float(s) for s in target_spacing)
    pair.check()
    return pair
