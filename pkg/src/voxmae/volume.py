"""4D volume container, file formats, and preprocessing.

A volume is a dense ``H x W x D x T`` scalar field. On disk and in the flat
vector view the storage order is x-fastest with time outermost (the NIfTI
convention); in memory the payload is held as a C-contiguous numpy array of
shape ``(T, D, W, H)`` indexed ``data[t, z, y, x]``, which realizes exactly
that flat order.

Two formats are supported:

* a strict subset of NIfTI-1 (348-byte header, datatypes int16/float32/
  float64, magic ``n+1\\0`` or ``ni1\\0``), both byte orders;
* a native raw format: ``<name>.vol`` holding a little-endian float32
  payload, plus a ``<name>.vol.json`` sidecar
  ``{"dims": [H, W, D, T], "spacing_mm": [sx, sy, sz], "tr_s": tr}``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    BadDimsError,
    BadMagicError,
    DegenerateVolumeError,
    NonFiniteDataError,
    ParseError,
    ShortBufferError,
    SizeMismatchError,
    TooFewFramesError,
    UnsupportedDatatypeError,
)

__all__ = [
    "Volume4D",
    "NiftiHeaderSubset",
    "parse_nifti_header",
    "load_volume",
    "write_raw_volume",
    "zscore_global",
    "crop_or_pad",
    "pad_to_multiple",
    "resample_spatial_trilinear",
    "resample_time_linear",
]

HEADER_SIZE = 348

# datatype code -> numpy scalar type (unprefixed; byte order applied on load)
_DTYPES = {4: "i2", 16: "f4", 64: "f8"}


@dataclass(frozen=True)
class Volume4D:
    """Immutable 4D scalar field with voxel spacing and frame interval.

    ``data`` has shape ``(T, D, W, H)`` and is locked read-only so values
    can be shared freely across threads.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    tr_seconds: float = 1.0

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 4:
            raise ValueError(f"expected 4 axes (T, D, W, H), got {arr.ndim}")
        if not all(n >= 1 for n in arr.shape):
            raise ValueError(f"all dims must be >= 1, got {arr.shape}")
        if any(s <= 0 for s in self.spacing_mm) or self.tr_seconds <= 0:
            raise ValueError("spacing_mm and tr_seconds must be positive")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "tr_seconds", float(self.tr_seconds))

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(H, W, D, T): spatial x/y/z extents and frame count."""
        t, d, w, h = self.data.shape
        return (h, w, d, t)

    @property
    def num_voxels(self) -> int:
        return int(self.data.size)

    def with_data(self, data: np.ndarray) -> "Volume4D":
        """Same metadata, new payload."""
        return Volume4D(data, self.spacing_mm, self.tr_seconds)

    def ravel(self) -> np.ndarray:
        """Flat x-fastest, time-outermost vector view."""
        return self.data.reshape(-1)


@dataclass(frozen=True)
class NiftiHeaderSubset:
    """Decoded fields of the supported NIfTI-1 header subset.

    ``scl_slope``/``scl_inter`` ride along because int16 payloads need them
    at load time; all values are in host byte order.
    """

    sizeof_hdr: int
    dim: tuple[int, ...]
    datatype_code: int
    pixdim: tuple[float, ...]
    vox_offset: float
    magic: bytes
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    byte_order: str = "<"


def parse_nifti_header(buf: bytes) -> NiftiHeaderSubset:
    """Decode a 348-byte NIfTI-1 header.

    Byte order is auto-detected by checking under which order sizeof_hdr
    decodes to 348; all returned fields are host-order Python scalars.
    """
    if len(buf) < HEADER_SIZE:
        raise ShortBufferError(f"need {HEADER_SIZE} header bytes, got {len(buf)}")
    if struct.unpack_from("<i", buf, 0)[0] == HEADER_SIZE:
        bo = "<"
    elif struct.unpack_from(">i", buf, 0)[0] == HEADER_SIZE:
        bo = ">"
    else:
        raise ParseError("sizeof_hdr is not 348 under either byte order")

    magic = bytes(buf[344:348])
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise BadMagicError(f"unsupported magic {magic!r}")

    dim = struct.unpack_from(bo + "8h", buf, 40)
    if dim[0] not in (3, 4):
        raise BadDimsError(f"dim[0] must be 3 or 4, got {dim[0]}")
    if any(dim[i] < 1 for i in range(1, 5)):
        raise BadDimsError(f"dim[1..4] must be >= 1, got {dim[1:5]}")

    datatype = struct.unpack_from(bo + "h", buf, 70)[0]
    if datatype not in _DTYPES:
        raise UnsupportedDatatypeError(f"datatype code {datatype} not in {sorted(_DTYPES)}")

    pixdim = struct.unpack_from(bo + "8f", buf, 76)
    vox_offset = struct.unpack_from(bo + "f", buf, 108)[0]
    slope, inter = struct.unpack_from(bo + "2f", buf, 112)
    if not np.isfinite(slope) or slope == 0.0:
        slope = 1.0
    if not np.isfinite(inter):
        inter = 0.0
    if magic == b"n+1\x00" and vox_offset < 352:
        raise ParseError(f"single-file magic requires vox_offset >= 352, got {vox_offset}")

    return NiftiHeaderSubset(
        sizeof_hdr=HEADER_SIZE,
        dim=tuple(int(v) for v in dim),
        datatype_code=int(datatype),
        pixdim=tuple(float(v) for v in pixdim),
        vox_offset=float(vox_offset),
        magic=magic,
        scl_slope=float(slope),
        scl_inter=float(inter),
        byte_order=bo,
    )


def _load_nifti(path: Path) -> Volume4D:
    raw = path.read_bytes()
    hdr = parse_nifti_header(raw)
    h, w, d = hdr.dim[1], hdr.dim[2], hdr.dim[3]
    t = hdr.dim[4] if hdr.dim[0] == 4 else 1

    if hdr.magic == b"n+1\x00":
        payload = raw[int(hdr.vox_offset):]
    else:
        img = path.with_suffix(".img")
        if not img.exists():
            raise ParseError(f"companion image file not found: {img}")
        payload = img.read_bytes()

    dtype = np.dtype(hdr.byte_order + _DTYPES[hdr.datatype_code])
    n = h * w * d * t
    if len(payload) < n * dtype.itemsize:
        raise SizeMismatchError(
            f"payload holds {len(payload) // dtype.itemsize} scalars, dims require {n}"
        )
    flat = np.frombuffer(payload, dtype=dtype, count=n)

    if hdr.datatype_code == 4:
        flat = hdr.scl_slope * flat.astype(np.float32) + np.float32(hdr.scl_inter)
    data = flat.astype(np.float32).reshape(t, d, w, h)
    if not np.isfinite(data).all():
        raise NonFiniteDataError(f"non-finite values in {path}")

    spacing = tuple(p if p > 0 else 1.0 for p in hdr.pixdim[1:4])
    tr = hdr.pixdim[4] if hdr.pixdim[4] > 0 else 1.0
    return Volume4D(data, spacing, tr)


def _load_raw(path: Path) -> Volume4D:
    sidecar = Path(str(path) + ".json")
    if not sidecar.exists():
        raise ParseError(f"sidecar descriptor not found: {sidecar}")
    try:
        meta = json.loads(sidecar.read_text())
        h, w, d, t = (int(v) for v in meta["dims"])
        spacing = tuple(float(v) for v in meta["spacing_mm"])
        tr = float(meta["tr_s"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed sidecar {sidecar}: {exc}") from exc

    flat = np.fromfile(path, dtype="<f4")
    if flat.size != h * w * d * t:
        raise SizeMismatchError(
            f"payload holds {flat.size} scalars, descriptor claims {h * w * d * t}"
        )
    data = flat.astype(np.float32).reshape(t, d, w, h)
    if not np.isfinite(data).all():
        raise NonFiniteDataError(f"non-finite values in {path}")
    return Volume4D(data, spacing, tr)


def load_volume(path, format: str | None = None) -> Volume4D:
    """Load a volume from NIfTI-1 or the native raw format.

    When ``format`` is None it is inferred from the extension (``.vol`` is
    raw, anything else NIfTI). 3D NIfTI inputs are promoted to T=1.
    """
    path = Path(path)
    if format is None:
        format = "raw" if path.suffix == ".vol" else "nifti"
    if format == "raw":
        return _load_raw(path)
    if format == "nifti":
        return _load_nifti(path)
    raise ValueError(f"unknown format {format!r} (expected 'nifti' or 'raw')")


def write_raw_volume(vol: Volume4D, path) -> None:
    """Write payload (little-endian float32) plus the JSON sidecar.

    ``load_volume(path)`` recovers the volume bit-exactly for float32
    payloads.
    """
    path = Path(path)
    try:
        path.write_bytes(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())
        h, w, d, t = vol.dims
        Path(str(path) + ".json").write_text(
            json.dumps(
                {"dims": [h, w, d, t], "spacing_mm": list(vol.spacing_mm), "tr_s": vol.tr_seconds}
            )
        )
    except OSError as exc:
        raise IOError(f"cannot write {path}: {exc}") from exc


def zscore_global(vol: Volume4D) -> Volume4D:
    """Standardize to zero mean / unit population std over all H*W*D*T entries."""
    x = vol.data.astype(np.float64)
    if x.size < 2:
        raise DegenerateVolumeError("volume must have more than one voxel")
    mean = x.mean()
    std = x.std()
    if std == 0.0:
        raise DegenerateVolumeError("constant volume has zero standard deviation")
    out = (x - mean) / std
    return vol.with_data(out.astype(vol.data.dtype))


def crop_or_pad(vol: Volume4D, target: tuple[int, int, int]) -> Volume4D:
    """Center-crop or zero-pad each spatial axis to ``target`` (H', W', D').

    Odd excess goes to the high side in both directions; the time axis is
    untouched.
    """
    th, tw, td = (int(v) for v in target)
    if min(th, tw, td) < 1:
        raise ValueError("target dims must be positive")
    h, w, d, t = vol.dims
    if (h, w, d) == (th, tw, td):
        return vol

    out = np.zeros((t, td, tw, th), dtype=vol.data.dtype)
    # per axis: (source slice start, dest slice start, copied length)
    copies = []
    for size, tgt in ((d, td), (w, tw), (h, th)):
        if size >= tgt:
            copies.append(((size - tgt) // 2, 0, tgt))
        else:
            copies.append((0, (tgt - size) // 2, size))
    (zs, zd, zl), (ys, yd, yl), (xs, xd, xl) = copies
    out[:, zd:zd + zl, yd:yd + yl, xd:xd + xl] = vol.data[
        :, zs:zs + zl, ys:ys + yl, xs:xs + xl
    ]
    return vol.with_data(out)


def pad_to_multiple(vol: Volume4D, edge: int) -> Volume4D:
    """Zero-pad spatial dims up to the next multiple of ``edge``."""
    h, w, d, _ = vol.dims
    target = tuple(-(-n // edge) * edge for n in (h, w, d))
    return crop_or_pad(vol, target)


def _axis_positions(n_out: int, n_in: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Align-corners sample positions: floor index, ceil index, frac weight."""
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out, dtype=np.float64)
    else:
        pos = np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resample_spatial_trilinear(vol: Volume4D, target: tuple[int, int, int]) -> Volume4D:
    """Align-corners trilinear resampling of each frame to (H', W', D')."""
    th, tw, td = (int(v) for v in target)
    if min(th, tw, td) < 1:
        raise ValueError("target dims must be >= 1")
    h, w, d, t = vol.dims
    if (h, w, d) == (th, tw, td):
        return vol

    zl, zh, fz = _axis_positions(td, d)
    yl, yh, fy = _axis_positions(tw, w)
    xl, xh, fx = _axis_positions(th, h)

    src = vol.data.astype(np.float64)
    # interpolate one axis at a time: z, then y, then x
    a = src[:, zl, :, :] * (1 - fz)[None, :, None, None] + src[:, zh, :, :] * fz[None, :, None, None]
    a = a[:, :, yl, :] * (1 - fy)[None, None, :, None] + a[:, :, yh, :] * fy[None, None, :, None]
    a = a[:, :, :, xl] * (1 - fx)[None, None, None, :] + a[:, :, :, xh] * fx[None, None, None, :]

    sx, sy, sz = vol.spacing_mm
    spacing = (sx * h / th, sy * w / tw, sz * d / td)
    return Volume4D(a.astype(vol.data.dtype), spacing, vol.tr_seconds)


def resample_time_linear(vol: Volume4D, target_tr: float) -> Volume4D:
    """Per-voxel linear resampling onto the grid k*target_tr within [0, (T-1)*tr]."""
    if target_tr <= 0:
        raise ValueError("target_tr must be positive")
    h, w, d, t = vol.dims
    if t < 2:
        raise TooFewFramesError("temporal resampling needs at least 2 frames")
    if target_tr == vol.tr_seconds:
        return vol

    span = (t - 1) * vol.tr_seconds
    n_out = int(np.floor(span / target_tr * (1 + 1e-12))) + 1
    pos = np.arange(n_out, dtype=np.float64) * (target_tr / vol.tr_seconds)
    lo = np.clip(np.floor(pos).astype(np.int64), 0, t - 1)
    hi = np.minimum(lo + 1, t - 1)
    frac = pos - lo

    src = vol.data.astype(np.float64)
    out = src[lo] * (1 - frac)[:, None, None, None] + src[hi] * frac[:, None, None, None]
    return Volume4D(out.astype(vol.data.dtype), vol.spacing_mm, float(target_tr))
