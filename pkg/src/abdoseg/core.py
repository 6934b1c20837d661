"""Core domain types: volumes, binary masks, slice samples, organ/modality enums.

Axis convention everywhere: (depth, height, width), axial slices index the
first axis. All types are immutable after construction and validate their
invariants eagerly, so anything downstream can trust shapes, spacing and
value domains.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np


class ValidationError(ValueError):
    """A volume, mask or sample violates one of its invariants."""


class Modality(str, Enum):
    CT = "ct"
    T1IN = "t1in"
    T1OUT = "t1out"
    T2SPIR = "t2spir"

    @property
    def training_modality(self) -> "TrainingModality":
        """Collapse the registered T1 in/out pair onto one training modality."""
        if self in (Modality.T1IN, Modality.T1OUT):
            return TrainingModality.T1
        if self is Modality.CT:
            return TrainingModality.CT
        return TrainingModality.T2


class TrainingModality(str, Enum):
    """Modality a single model instance is trained for (T1 in/out share one)."""

    CT = "ct"
    T1 = "t1"
    T2 = "t2"


class Organ(str, Enum):
    LIVER = "liver"
    RIGHT_KIDNEY = "rkidney"
    LEFT_KIDNEY = "lkidney"
    SPLEEN = "spleen"


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise ValidationError(f"spacing must have 3 entries, got {len(sp)}")
    for axis, s in enumerate(sp):
        if not np.isfinite(s) or s <= 0:
            raise ValidationError(f"spacing must be positive, got {s} on axis {axis}")
    return sp


def _check_finite(voxels: np.ndarray) -> None:
    bad = ~np.isfinite(voxels)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValidationError(f"non-finite intensity at voxel {where}")


def _check_binary(voxels: np.ndarray) -> None:
    bad = (voxels != 0) & (voxels != 1)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValidationError(
            f"mask is not binary: value {voxels[where]} at voxel {where}"
        )


def _frozen_array(voxels, dtype) -> np.ndarray:
    arr = np.array(voxels, dtype=dtype, copy=True)
    if arr.ndim != 3:
        raise ValidationError(f"expected a 3D array, got ndim={arr.ndim}")
    if min(arr.shape) < 1:
        raise ValidationError(f"all dimensions must be >= 1, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Volume:
    """3D scalar intensities with physical voxel spacing in millimetres.

    voxels: (depth, height, width) float array, finite values only.
    spacing: mm per axis in the same (depth, height, width) order.
    """

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    modality: Modality

    def __post_init__(self):
        object.__setattr__(self, "voxels", _frozen_array(self.voxels, np.float32))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "modality", Modality(self.modality))
        _check_finite(self.voxels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def depth(self) -> int:
        return self.voxels.shape[0]


@dataclass(frozen=True)
class LabelVolume:
    """Binary 3D mask aligned with a Volume; values strictly in {0, 1}."""

    voxels: np.ndarray
    spacing: tuple[float, float, float]
    organ: Organ

    def __post_init__(self):
        raw = np.asarray(self.voxels)
        _check_binary(raw)
        object.__setattr__(self, "voxels", _frozen_array(raw, np.uint8))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))
        object.__setattr__(self, "organ", Organ(self.organ))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def voxel_count(self) -> int:
        return int(self.voxels.sum())


@dataclass(frozen=True)
class SliceSample:
    """One 2D axial training/inference unit.

    input: (H, W, 3) float array, channels already replicated per modality.
    target: (H, W) binary array.
    """

    input: np.ndarray
    target: np.ndarray
    slice_index: int
    source_id: str

    def __post_init__(self):
        inp = np.array(self.input, dtype=np.float32, copy=True)
        tgt = np.asarray(self.target)
        if inp.ndim != 3 or inp.shape[2] != 3:
            raise ValidationError(
                f"sample input must be (H, W, 3), got shape {inp.shape}"
            )
        if tgt.shape != inp.shape[:2]:
            raise ValidationError(
                f"target dims {tgt.shape} do not match input plane {inp.shape[:2]}"
            )
        bad = (tgt != 0) & (tgt != 1)
        if bad.any():
            where = tuple(int(i) for i in np.argwhere(bad)[0])
            raise ValidationError(f"target is not binary at pixel {where}")
        if not np.isfinite(inp).all():
            raise ValidationError("sample input contains non-finite values")
        tgt = tgt.astype(np.uint8, copy=True)
        inp.flags.writeable = False
        tgt.flags.writeable = False
        object.__setattr__(self, "input", inp)
        object.__setattr__(self, "target", tgt)


@dataclass(frozen=True)
class OrganModality:
    """The (organ, training modality) pair one model instance is bound to."""

    organ: Organ
    modality: TrainingModality

    def __post_init__(self):
        object.__setattr__(self, "organ", Organ(self.organ))
        object.__setattr__(self, "modality", TrainingModality(self.modality))


def validate_pair(volume: Volume, mask: LabelVolume) -> tuple[Volume, LabelVolume]:
    """Check that a volume and mask form a consistent pair; return it unchanged.

    Idempotent and side-effect free. Raises ValidationError naming the axis or
    voxel of the first violation: dimension mismatch, spacing mismatch,
    non-binary mask, or non-finite intensity.
    """
    if volume.shape != mask.shape:
        for axis, (dv, dm) in enumerate(zip(volume.shape, mask.shape)):
            if dv != dm:
                raise ValidationError(
                    f"dimension mismatch on axis {axis}: volume {dv} vs mask {dm}"
                )
    if volume.spacing != mask.spacing:
        for axis, (sv, sm) in enumerate(zip(volume.spacing, mask.spacing)):
            if sv != sm:
                raise ValidationError(
                    f"spacing mismatch on axis {axis}: volume {sv} vs mask {sm}"
                )
    # Value-domain invariants are enforced at construction; re-checking keeps
    # the pair contract independent of how the objects were produced.
    _check_finite(volume.voxels)
    _check_binary(mask.voxels)
    return volume, mask
