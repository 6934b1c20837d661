"""Volumetric segmentation metrics and largest-component post-processing.

Conventions: ``S`` is the predicted mask, ``G`` the groundtruth. Dice and the
relative absolute volume difference count voxels; the average and maximum
symmetric surface distances are measured in millimetres between border
voxels, with physical coordinates = index * spacing per axis.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .core import LabelVolume, ValidationError


class EmptyMaskError(ValueError):
    """A metric is undefined because a mask has no foreground."""


class EmptySegmentationWarning(UserWarning):
    """Post-processing received an empty mask and passed it through."""


def _check_same_grid(s: LabelVolume, g: LabelVolume) -> None:
    if s.shape != g.shape:
        raise ValidationError(f"mask dims differ: {s.shape} vs {g.shape}")
    if s.spacing != g.spacing:
        raise ValidationError(f"mask spacings differ: {s.spacing} vs {g.spacing}")


def largest_component(mask: LabelVolume, connectivity: int = 26) -> LabelVolume:
    """Keep only the largest 3D connected foreground component.

    connectivity 6 links faces only; 26 links faces, edges and corners. Size
    ties are broken by the component containing the lexicographically lowest
    (depth, height, width) voxel. An empty mask is returned unchanged with an
    EmptySegmentationWarning.
    """
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(3, 1 if connectivity == 6 else 3)
    labels, count = ndimage.label(mask.voxels, structure=structure)
    if count == 0:
        warnings.warn("empty mask passed to largest_component", EmptySegmentationWarning)
        return mask
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    best = sizes.max()
    tied = np.flatnonzero(sizes == best)
    if len(tied) > 1:
        flat = labels.ravel()
        # First flat index in C order == lexicographically lowest (d, h, w).
        keep = min(tied, key=lambda lab: int(np.argmax(flat == lab)))
    else:
        keep = tied[0]
    return LabelVolume((labels == keep).astype(np.uint8), mask.spacing, mask.organ)


def _border_mask(voxels: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one background 6-neighbor.

    The array boundary counts as background, so faces of a solid block are
    borders.
    """
    fg = voxels.astype(bool)
    padded = np.pad(fg, 1)
    interior = (
        padded[:-2, 1:-1, 1:-1]
        & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1]
        & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2]
        & padded[1:-1, 1:-1, 2:]
    )
    return fg & ~interior


def border_voxels(mask: LabelVolume) -> np.ndarray:
    """Indices of border voxels as an (N, 3) int array in (d, h, w) order."""
    return np.argwhere(_border_mask(mask.voxels))


def dice_coeff(s: LabelVolume, g: LabelVolume) -> float:
    """2|S n G| / (|S| + |G|); defined as 1.0 when both masks are empty."""
    _check_same_grid(s, g)
    ns, ng = s.voxel_count(), g.voxel_count()
    if ns == 0 and ng == 0:
        return 1.0
    inter = int(np.logical_and(s.voxels, g.voxels).sum())
    return 2 * inter / (ns + ng)


def ravd(s: LabelVolume, g: LabelVolume) -> float:
    """Relative absolute volume difference in percent: 100*abs(|S|-|G|)/|G|."""
    _check_same_grid(s, g)
    ng = g.voxel_count()
    if ng == 0:
        raise EmptyMaskError("RAVD is undefined for an empty groundtruth")
    return 100.0 * abs(s.voxel_count() - ng) / ng


def surface_distances(s: LabelVolume, g: LabelVolume) -> tuple[float, float]:
    """(ASSD, MSSD) in millimetres between the masks' border voxel sets.

    ASSD averages the nearest-opposite-border distance over all border voxels
    of both sets; MSSD is the larger of the two directed maxima. Requires both
    masks non-empty.
    """
    _check_same_grid(s, g)
    bs = np.argwhere(_border_mask(s.voxels))
    bg = np.argwhere(_border_mask(g.voxels))
    if len(bs) == 0 or len(bg) == 0:
        raise EmptyMaskError("surface distances are undefined for an empty mask")
    spacing = np.asarray(s.spacing, dtype=np.float64)
    ps = bs * spacing
    pg = bg * spacing
    d_sg, _ = cKDTree(pg).query(ps)
    d_gs, _ = cKDTree(ps).query(pg)
    assd_val = (d_sg.sum() + d_gs.sum()) / (len(d_sg) + len(d_gs))
    mssd_val = max(d_sg.max(), d_gs.max())
    return float(assd_val), float(mssd_val)


def assd(s: LabelVolume, g: LabelVolume) -> float:
    """Average symmetric surface distance in millimetres."""
    return surface_distances(s, g)[0]


def mssd(s: LabelVolume, g: LabelVolume) -> float:
    """Maximum symmetric surface distance in millimetres."""
    return surface_distances(s, g)[1]


@dataclass(frozen=True)
class MetricReport:
    """Per-case metric values: dice in [0, 1], ravd in percent, distances in mm."""

    dice: float
    ravd: float
    assd: float
    mssd: float

    def __post_init__(self):
        for name in ("dice", "ravd", "assd", "mssd"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValidationError(f"{name} must be finite, got {v}")
        if not 0.0 <= self.dice <= 1.0:
            raise ValidationError(f"dice must be in [0, 1], got {self.dice}")
        if min(self.ravd, self.assd, self.mssd) < 0:
            raise ValidationError("ravd/assd/mssd must be non-negative")


def evaluate_case(pred: LabelVolume, gt: LabelVolume) -> MetricReport:
    """All four metrics for one case; raises EmptyMaskError when undefined."""
    _check_same_grid(pred, gt)
    a, m = surface_distances(pred, gt)
    return MetricReport(
        dice=dice_coeff(pred, gt),
        ravd=ravd(pred, gt),
        assd=a,
        mssd=m,
    )
