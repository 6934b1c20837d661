"""Volume file I/O, axial slice handling, channel replication and augmentation.

Two on-disk formats are supported:

* rawvol: one ASCII header line ``RAWVOL1 d h w sd sh sw dtype`` followed by a
  little-endian voxel blob in (depth, height, width) row-major order, with
  dtype one of ``f32`` or ``u8``.
* NIfTI-1 single-file ``.nii`` volumes; only dims, pixdim, datatype and the
  voxel blob are read.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import (
    LabelVolume,
    Modality,
    Organ,
    SliceSample,
    ValidationError,
    Volume,
    validate_pair,
)


class DataFormatError(ValueError):
    """A volume file is unreadable, corrupt, or uses an unsupported datatype."""


_RAWVOL_MAGIC = "RAWVOL1"
_RAWVOL_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def write_rawvol(path, voxels: np.ndarray, spacing) -> None:
    """Write a 3D array as a rawvol file; float arrays as f32, integer as u8."""
    arr = np.asarray(voxels)
    if arr.ndim != 3:
        raise DataFormatError(f"rawvol stores 3D arrays, got ndim={arr.ndim}")
    if arr.dtype.kind == "f":
        dtype_name, arr = "f32", arr.astype("<f4")
    else:
        dtype_name, arr = "u8", arr.astype("u1")
    d, h, w = arr.shape
    sd, sh, sw = (float(s) for s in spacing)
    header = f"{_RAWVOL_MAGIC} {d} {h} {w} {sd!r} {sh!r} {sw!r} {dtype_name}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(arr.tobytes(order="C"))


def _read_rawvol(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    with open(path, "rb") as f:
        header = f.readline()
        blob = f.read()
    try:
        fields = header.decode("ascii").split()
    except UnicodeDecodeError as e:
        raise DataFormatError(f"{path}: rawvol header is not ASCII") from e
    if len(fields) != 8 or fields[0] != _RAWVOL_MAGIC:
        raise DataFormatError(f"{path}: malformed rawvol header {header!r}")
    try:
        d, h, w = (int(x) for x in fields[1:4])
        spacing = tuple(float(x) for x in fields[4:7])
    except ValueError as e:
        raise DataFormatError(f"{path}: bad rawvol header numbers") from e
    if fields[7] not in _RAWVOL_DTYPES:
        raise DataFormatError(f"{path}: unsupported rawvol dtype {fields[7]!r}")
    dtype = _RAWVOL_DTYPES[fields[7]]
    expected = d * h * w * dtype.itemsize
    if len(blob) != expected:
        raise DataFormatError(
            f"{path}: corrupt header: blob holds {len(blob)} bytes, "
            f"header declares {d}x{h}x{w} {fields[7]} = {expected}"
        )
    voxels = np.frombuffer(blob, dtype=dtype).reshape(d, h, w)
    return voxels, spacing


# NIfTI-1 datatype codes -> numpy dtypes (little-endian; swapped on demand).
_NIFTI_DTYPES = {
    2: "u1",
    4: "i2",
    8: "i4",
    16: "f4",
    64: "f8",
    256: "i1",
    512: "u2",
    768: "u4",
}


def _read_nifti1(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    with open(path, "rb") as f:
        hdr = f.read(348)
        if len(hdr) < 348:
            raise DataFormatError(f"{path}: truncated NIfTI-1 header")
        rest = f.read()
    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", hdr, 0)
    if sizeof_hdr != 348:
        endian = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", hdr, 0)
        if sizeof_hdr != 348:
            raise DataFormatError(f"{path}: not a NIfTI-1 file (sizeof_hdr)")
    magic = struct.unpack_from("4s", hdr, 344)[0]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise DataFormatError(f"{path}: bad NIfTI-1 magic {magic!r}")
    dim = struct.unpack_from(endian + "8h", hdr, 40)
    (datatype,) = struct.unpack_from(endian + "h", hdr, 70)
    pixdim = struct.unpack_from(endian + "8f", hdr, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", hdr, 108)
    if dim[0] < 3 or any(dim[k] > 1 for k in range(4, dim[0] + 1)):
        raise DataFormatError(f"{path}: expected a single 3D volume, dim={dim}")
    nx, ny, nz = dim[1], dim[2], dim[3]
    if min(nx, ny, nz) < 1:
        raise DataFormatError(f"{path}: corrupt header dims {dim[1:4]}")
    if datatype not in _NIFTI_DTYPES:
        raise DataFormatError(f"{path}: unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(endian + _NIFTI_DTYPES[datatype])
    offset = int(vox_offset) - 348
    if offset < 0 or offset > len(rest):
        raise DataFormatError(f"{path}: bad vox_offset {vox_offset}")
    blob = rest[offset:]
    expected = nx * ny * nz * dtype.itemsize
    if len(blob) < expected:
        raise DataFormatError(
            f"{path}: corrupt header: needs {expected} data bytes, found {len(blob)}"
        )
    # NIfTI stores x fastest; reshaping (nz, ny, nx) yields (depth, height, width).
    voxels = np.frombuffer(blob[:expected], dtype=dtype).reshape(nz, ny, nx)
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    return voxels, spacing


def _read_any(path, format: str):
    if format == "rawvol":
        return _read_rawvol(path)
    if format == "nifti1":
        return _read_nifti1(path)
    raise DataFormatError(f"unknown volume format {format!r}")


def load_volume(path, format: str = "rawvol", modality: Modality = Modality.CT) -> Volume:
    """Load an intensity volume, normalizing voxel order to (depth, height, width)."""
    voxels, spacing = _read_any(path, format)
    try:
        return Volume(voxels.astype(np.float32), spacing, modality)
    except ValidationError as e:
        raise DataFormatError(f"{path}: {e}") from e


def load_mask(path, organ: Organ, format: str = "rawvol") -> LabelVolume:
    """Load a binary mask volume; nonzero voxels are validated to be exactly 1."""
    voxels, spacing = _read_any(path, format)
    try:
        return LabelVolume(voxels, spacing, organ)
    except ValidationError as e:
        raise DataFormatError(f"{path}: {e}") from e


def write_volume(path, volume: Volume) -> None:
    write_rawvol(path, volume.voxels, volume.spacing)


def write_mask(path, mask: LabelVolume) -> None:
    write_rawvol(path, mask.voxels, mask.spacing)


def extract_slices(volume: Volume, mask: LabelVolume | None = None):
    """Split a volume (and optionally its mask) into ordered axial planes.

    Returns a list of (image plane, target plane or None) of length == depth.
    """
    if mask is not None:
        validate_pair(volume, mask)
        return [(volume.voxels[k], mask.voxels[k]) for k in range(volume.depth)]
    return [(volume.voxels[k], None) for k in range(volume.depth)]


def stack_predictions(planes, spacing, organ: Organ) -> LabelVolume:
    """Stack ordered 2D binary planes back into a LabelVolume (inverse of extract)."""
    planes = list(planes)
    if not planes:
        raise ValidationError("cannot stack an empty list of planes")
    first = np.asarray(planes[0]).shape
    for k, p in enumerate(planes):
        if np.asarray(p).shape != first:
            raise ValidationError(
                f"ragged plane dims: plane {k} is {np.asarray(p).shape}, expected {first}"
            )
    return LabelVolume(np.stack(planes, axis=0), spacing, organ)


def replicate_channels(plane: np.ndarray, modality: Modality, companion: np.ndarray | None = None) -> np.ndarray:
    """Expand one grayscale plane to the 3-channel network input.

    CT and T2-SPIR replicate the plane twice: (p, p, p). The registered T1
    pair stacks (in, out, in); the out-phase plane must be passed as
    ``companion`` and the in-phase plane as ``plane``.
    """
    plane = np.asarray(plane)
    modality = Modality(modality)
    if modality is Modality.T1IN:
        if companion is None:
            raise ValidationError("T1 in-phase plane requires its registered out-phase companion")
        companion = np.asarray(companion)
        if companion.shape != plane.shape:
            raise ValidationError(
                f"companion dims {companion.shape} do not match plane {plane.shape}"
            )
        return np.stack([plane, companion, plane], axis=-1)
    if modality is Modality.T1OUT:
        raise ValidationError("pass the T1 in-phase plane as primary and out-phase as companion")
    if companion is not None:
        raise ValidationError(f"{modality.value} takes no companion plane")
    return np.stack([plane, plane, plane], axis=-1)


def normalize_plane(plane: np.ndarray) -> np.ndarray:
    """Per-slice min-max normalization to [0, 1]; constant planes map to zeros."""
    plane = np.asarray(plane, dtype=np.float32)
    lo, hi = float(plane.min()), float(plane.max())
    if hi > lo:
        return (plane - lo) / (hi - lo)
    return np.zeros_like(plane)


def build_samples(volume: Volume, mask: LabelVolume, companion: Volume | None = None,
                  source_id: str = "case") -> list[SliceSample]:
    """Turn a validated volume/mask pair into per-slice network samples.

    Each plane is min-max normalized independently before channel replication;
    for T1 the companion volume supplies the out-phase channel.
    """
    validate_pair(volume, mask)
    if volume.modality in (Modality.T1IN, Modality.T1OUT):
        if companion is None:
            raise ValidationError("T1 volumes need the registered companion volume")
        if companion.shape != volume.shape:
            raise ValidationError("companion volume dims do not match")
        primary, secondary = volume, companion
        if volume.modality is Modality.T1OUT:
            primary, secondary = companion, volume
        samples = []
        for k in range(primary.depth):
            x = replicate_channels(
                normalize_plane(primary.voxels[k]),
                Modality.T1IN,
                normalize_plane(secondary.voxels[k]),
            )
            samples.append(SliceSample(x, mask.voxels[k], k, source_id))
        return samples
    samples = []
    for k in range(volume.depth):
        x = replicate_channels(normalize_plane(volume.voxels[k]), volume.modality)
        samples.append(SliceSample(x, mask.voxels[k], k, source_id))
    return samples


@dataclass(frozen=True)
class AugmentParams:
    """Symmetric affine augmentation ranges; all magnitudes are half-widths.

    scale_range: fraction, e.g. 0.10 draws scales in [0.9, 1.1].
    rotation_range / shear_range: degrees.
    shift_range: fraction of the side length per axis.
    copies: augmented samples produced per input sample.
    """

    scale_range: float = 0.10
    rotation_range: float = 10.0
    shear_range: float = 5.0
    shift_range: float = 0.10
    copies: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.copies < 1:
            raise ValidationError(f"copies must be >= 1, got {self.copies}")
        for name in ("scale_range", "rotation_range", "shear_range", "shift_range"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")


def derive_seed(seed: int, source_id: str, slice_index: int, copy_index: int) -> np.random.SeedSequence:
    """Stable per-copy seed stream independent of Python hash randomization."""
    sid = int.from_bytes(hashlib.blake2b(source_id.encode(), digest_size=8).digest(), "little")
    return np.random.SeedSequence(
        [seed & 0xFFFFFFFFFFFFFFFF, sid, slice_index & 0xFFFFFFFF, copy_index & 0xFFFFFFFF]
    )


def _draw_transform(rng: np.random.Generator, params: AugmentParams, shape):
    """Draw one affine transform; redraws on a degenerate (non-invertible) matrix."""
    h, w = shape
    while True:
        scale = rng.uniform(1.0 - params.scale_range, 1.0 + params.scale_range)
        rot = np.deg2rad(rng.uniform(-params.rotation_range, params.rotation_range))
        shear = np.deg2rad(rng.uniform(-params.shear_range, params.shear_range))
        dy = rng.uniform(-params.shift_range, params.shift_range) * h
        dx = rng.uniform(-params.shift_range, params.shift_range) * w
        lin = np.array(
            [
                [np.cos(rot), -np.sin(rot)],
                [np.sin(rot), np.cos(rot)],
            ]
        ) @ np.array([[1.0, np.tan(shear)], [0.0, 1.0]]) * scale
        if abs(np.linalg.det(lin)) > 1e-6:
            return lin, np.array([dy, dx])


def _warp_plane(plane, inv_lin, inv_off, order, cval):
    return ndimage.affine_transform(
        plane, inv_lin, offset=inv_off, order=order, mode="constant", cval=cval,
        output=np.float64 if order == 1 else plane.dtype,
    )


def augment_once(sample: SliceSample, params: AugmentParams, copy_index: int) -> SliceSample:
    """One augmented rendering of a sample, keyed by an explicit copy index.

    The identical transform is applied to all three input channels (bilinear)
    and the target (nearest-neighbor), so targets stay binary. Out-of-bounds
    image pixels are filled with the channel minimum, target pixels with 0.
    Copy ``copy_index`` only depends on (seed, source_id, slice_index,
    copy_index), never on worker scheduling. The training loop uses this
    directly with copy_index = epoch to augment on the fly.
    """
    rng = np.random.default_rng(
        derive_seed(params.seed, sample.source_id, sample.slice_index, copy_index)
    )
    h, w = sample.target.shape
    lin, off = _draw_transform(rng, params, (h, w))
    if np.array_equal(lin, np.eye(2)) and not off.any():
        return sample
    # ndimage maps output coords to input coords, so warp with the inverse.
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    inv_lin = np.linalg.inv(lin)
    inv_off = center - inv_lin @ (center + off)
    channels = []
    for c in range(3):
        plane = sample.input[:, :, c].astype(np.float64)
        warped = _warp_plane(plane, inv_lin, inv_off, order=1, cval=float(plane.min()))
        channels.append(warped.astype(np.float32))
    target = _warp_plane(sample.target, inv_lin, inv_off, order=0, cval=0)
    return SliceSample(
        np.stack(channels, axis=-1), target.astype(np.uint8), sample.slice_index, sample.source_id
    )


def augment(sample: SliceSample, params: AugmentParams) -> list[SliceSample]:
    """Produce exactly ``params.copies`` affine-augmented copies of a sample.

    Deterministic given params.seed: the same seed yields bit-identical
    output lists.
    """
    return [augment_once(sample, params, i) for i in range(params.copies)]
