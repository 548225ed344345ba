"""Strict NIfTI-1 single-file reader/writer for 3D label volumes.

Supported on disk: uncompressed single-file ``.nii`` with magic ``n+1\\0``,
datatype uint8 / int16 / int32 / float32, any byte order on read,
little-endian uint8 on write. Compression, NIfTI-2 (header size 540), and
detached ``.hdr/.img`` pairs (magic ``ni1\\0``) are rejected.

Orientation metadata (qform/sform) is ignored: volumes are kept in stored
voxel order, canonically x-fastest, ``flat = x + H*(y + W*z)`` for dims
``(H, W, L)``. Equivalently ``labels[x, y, z]`` on the in-memory array.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np


class NiftiError(Exception):
    """Base class for all volume-file errors."""


class BadMagic(NiftiError):
    """Not an uncompressed single-file NIfTI-1."""


class UnsupportedDatatype(NiftiError):
    """Voxel datatype code outside the supported label set."""


class TruncatedFile(NiftiError):
    """File ends before the header-declared voxel data."""


class NonIntegerLabels(NiftiError):
    """Float voxel data contains non-integral values."""


class NonPositiveSpacing(NiftiError):
    """A pixdim entry is zero, negative, or non-finite."""


class LabelRangeError(NiftiError):
    """Integer voxel values fall outside [0, 256)."""


class HeaderError(NiftiError):
    """Structurally invalid header (dim counts, vox_offset, bitpix)."""


# Fixed 348-byte NIfTI-1 header, packed (no alignment padding).
_HDR_FMT = (
    "i"  # sizeof_hdr
    "10s18sihBB"  # data_type, db_name, extents, session_error, regular, dim_info
    "8h"  # dim
    "3f"  # intent_p1..p3
    "hhhh"  # intent_code, datatype, bitpix, slice_start
    "8f"  # pixdim
    "fff"  # vox_offset, scl_slope, scl_inter
    "hBB"  # slice_end, slice_code, xyzt_units
    "ffff"  # cal_max, cal_min, slice_duration, toffset
    "ii"  # glmax, glmin
    "80s24s"  # descrip, aux_file
    "hh"  # qform_code, sform_code
    "3f3f"  # quatern_b..d, qoffset_x..z
    "4f4f4f"  # srow_x, srow_y, srow_z
    "16s4s"  # intent_name, magic
)
assert struct.calcsize("<" + _HDR_FMT) == 348

_MAGIC_SINGLE = b"n+1\x00"
_MAGIC_PAIR = b"ni1\x00"
_VOX_OFFSET = 352
_UNITS_MM = 2

_DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
}

_CANONICAL_NAMES = {0: "background", 1: "liver", 2: "tumor"}


def default_legend(values) -> dict[int, str]:
    """Legend for the given label values, with conventional names for 0/1/2."""
    return {int(v): _CANONICAL_NAMES.get(int(v), f"label-{int(v)}") for v in values}


@dataclass(frozen=True)
class LabelVolume:
    """3D integer label grid plus voxel spacing.

    ``labels`` is uint8 with shape ``dims`` and is indexed ``[x, y, z]``;
    the canonical flat order is x-fastest. ``spacing_mm`` is quantized to
    float32 at construction so a write/read cycle is bit-exact (the header
    stores pixdim as float32). Equality compares dims, spacing, and labels;
    the legend is descriptive metadata only.
    """

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    labels: np.ndarray
    label_legend: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise ValueError(f"dims must be three positive voxel counts, got {self.dims}")
        spacing = tuple(float(np.float32(s)) for s in self.spacing_mm)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise NonPositiveSpacing(f"spacing must be finite and positive, got {self.spacing_mm}")
        labels = np.asarray(self.labels)
        if labels.dtype != np.uint8:
            if not np.issubdtype(labels.dtype, np.integer):
                raise ValueError(f"labels must be integers, got dtype {labels.dtype}")
            if labels.size and (labels.min() < 0 or labels.max() > 255):
                raise LabelRangeError("label values must lie in [0, 256)")
            labels = labels.astype(np.uint8)
        if labels.shape != dims:
            raise ValueError(f"labels shape {labels.shape} != dims {dims}")
        legend = dict(self.label_legend) if self.label_legend else default_legend(np.unique(labels))
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "label_legend", legend)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz

    def __eq__(self, other):
        if not isinstance(other, LabelVolume):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing_mm == other.spacing_mm
            and np.array_equal(self.labels, other.labels)
        )


def read_nifti(path) -> LabelVolume:
    """Read an uncompressed single-file NIfTI-1 label volume.

    Handles both byte orders (detected from the header-size sentinel) and
    never reads more voxel data than the header declares. Float32 data must
    be integral; all values must fit in [0, 256).
    """
    with open(path, "rb") as f:
        head4 = f.read(4)
        if len(head4) < 4:
            raise TruncatedFile(f"{path}: shorter than 4 bytes")
        if head4[:2] == b"\x1f\x8b":
            raise BadMagic(f"{path}: gzip-compressed input; only raw .nii is supported")
        order = None
        for cand in ("<", ">"):
            (size,) = struct.unpack(cand + "i", head4)
            if size == 348:
                order = cand
                break
            if size == 540:
                raise BadMagic(f"{path}: NIfTI-2 (header size 540) is not supported")
        if order is None:
            raise BadMagic(f"{path}: first 4 bytes do not decode to header size 348")

        rest = f.read(344)
        if len(rest) < 344:
            raise TruncatedFile(f"{path}: header truncated at {4 + len(rest)} bytes")
        fields = struct.unpack(order + _HDR_FMT, head4 + rest)

        dim = fields[7:15]
        datatype = fields[19]
        bitpix = fields[20]
        pixdim = fields[22:30]
        vox_offset = fields[30]
        scl_slope = fields[31]
        scl_inter = fields[32]
        magic = fields[-1]

        if magic == _MAGIC_PAIR:
            raise BadMagic(f"{path}: detached header/image pair (ni1) is not supported")
        if magic != _MAGIC_SINGLE:
            raise BadMagic(f"{path}: magic {magic!r} != {_MAGIC_SINGLE!r}")

        ndim = dim[0]
        if ndim < 3 or any(dim[k] not in (0, 1) for k in range(4, min(ndim + 1, 8))):
            raise HeaderError(f"{path}: need a 3D volume, got dim={tuple(dim)}")
        h, w, l = (int(dim[k]) for k in (1, 2, 3))
        if h < 1 or w < 1 or l < 1:
            raise HeaderError(f"{path}: non-positive extent in dim={tuple(dim)}")

        if datatype not in _DATATYPES:
            raise UnsupportedDatatype(f"{path}: datatype code {datatype} not in {sorted(_DATATYPES)}")
        dt = _DATATYPES[datatype].newbyteorder(order)
        if bitpix != dt.itemsize * 8:
            raise HeaderError(f"{path}: bitpix {bitpix} inconsistent with datatype {datatype}")

        spacing = pixdim[1:4]
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise NonPositiveSpacing(f"{path}: pixdim[1..3]={spacing} must be positive")

        if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
            warnings.warn(
                f"{path}: scl_slope={scl_slope}, scl_inter={scl_inter} ignored for a label volume",
                stacklevel=2,
            )

        offset = int(vox_offset)
        if offset < 348:
            raise HeaderError(f"{path}: vox_offset {vox_offset} < 348")
        f.seek(offset)
        count = h * w * l
        raw = f.read(count * dt.itemsize)
        if len(raw) < count * dt.itemsize:
            raise TruncatedFile(f"{path}: voxel data ends after {len(raw)} of {count * dt.itemsize} bytes")

    data = np.frombuffer(raw, dtype=dt)
    if datatype == 16:
        if not np.all(np.isfinite(data)):
            raise NonIntegerLabels(f"{path}: float data contains non-finite values")
        if np.any(data != np.trunc(data)):
            raise NonIntegerLabels(f"{path}: float data contains non-integral values")
    if data.size and (data.min() < 0 or data.max() > 255):
        raise LabelRangeError(f"{path}: label values outside [0, 256)")

    labels = data.astype(np.uint8).reshape((h, w, l), order="F")
    return LabelVolume(dims=(h, w, l), spacing_mm=tuple(float(s) for s in spacing), labels=labels)


def write_nifti(vol: LabelVolume, path) -> None:
    """Write a LabelVolume as little-endian uint8 single-file NIfTI-1.

    vox_offset is 352 (348-byte header + 4-byte zero extension flag) and the
    voxel stream is the canonical x-fastest order, so
    ``read_nifti(write_nifti(v)) == v`` bit-for-bit on labels, dims, spacing.
    """
    if not isinstance(vol, LabelVolume):
        raise TypeError("write_nifti expects a LabelVolume")
    h, w, l = vol.dims
    if h * w * l == 0:
        raise ValueError("refusing to write a volume with zero voxels")

    pixdim = (1.0, *vol.spacing_mm, 0.0, 0.0, 0.0, 0.0)
    header = struct.pack(
        "<" + _HDR_FMT,
        348,
        b"", b"", 0, 0, ord("r"), 0,
        3, h, w, l, 1, 1, 1, 1,
        0.0, 0.0, 0.0,
        0, 2, 8, 0,
        *pixdim,
        float(_VOX_OFFSET), 1.0, 0.0,
        0, 0, _UNITS_MM,
        0.0, 0.0, 0.0, 0.0,
        0, 0,
        b"patchopt label volume", b"",
        0, 0,
        0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        1.0, 0.0, 0.0, 0.0,
        0.0, 1.0, 0.0, 0.0,
        0.0, 0.0, 1.0, 0.0,
        b"", _MAGIC_SINGLE,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(b"\x00\x00\x00\x00")
        f.write(np.asfortranarray(vol.labels).tobytes(order="F"))
