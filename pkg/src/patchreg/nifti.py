"""Minimal single-file NIfTI-1 reader/writer plus a raw+JSON test format.

Supported NIfTI subset: uncompressed ``.nii``, little-endian, scalar 3D or
3-channel 4D arrays, datatypes uint8 (2), int16 (4), float32 (16). The
array-to-world affine comes from the s-form when set, falling back to the
q-form, then to a spacing-only diagonal. Header fields outside this subset
are preserved as zeros; writing then reading a volume reproduces the
supported fields bit-exactly.

The raw+JSON format stores ``<base>.json`` (shape, spacing_mm, affine, dtype)
next to ``<base>.raw`` holding the little-endian array in Fortran order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError, UnsupportedDatatype

HDR_SIZE = 348
VOX_OFFSET = 352.0
MAGIC = b"n+1\x00"

_DTYPE_CODES = {2: np.uint8, 4: np.int16, 16: np.float32}
_CODE_FOR_DTYPE = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.float32): 16}
_BITPIX = {2: 8, 4: 16, 16: 32}

_RAW_DTYPES = {"uint8", "int16", "float32", "float64"}


def _quaternion_affine(hdr) -> np.ndarray:
    b, c, d = hdr["quatern"]
    a_sq = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a_sq, 0.0))
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if hdr["pixdim"][0] < 0 else 1.0
    spacing = np.array([hdr["pixdim"][1], hdr["pixdim"][2], hdr["pixdim"][3] * qfac])
    affine = np.eye(4)
    affine[:3, :3] = r * spacing
    affine[:3, 3] = hdr["qoffset"]
    return affine


def _parse_header(raw: bytes) -> dict:
    if len(raw) < HDR_SIZE:
        raise ParseError(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    sizeof_hdr = struct.unpack_from("<i", raw, 0)[0]
    if sizeof_hdr != HDR_SIZE:
        raise ParseError(f"bad sizeof_hdr {sizeof_hdr}; only little-endian NIfTI-1 is supported")
    magic = raw[344:348]
    if magic != MAGIC:
        raise ParseError(f"unsupported magic {magic!r}; only single-file .nii is supported")
    dim = struct.unpack_from("<8h", raw, 40)
    datatype, bitpix = struct.unpack_from("<2h", raw, 70)
    pixdim = struct.unpack_from("<8f", raw, 76)
    vox_offset = struct.unpack_from("<f", raw, 108)[0]
    scl_slope, scl_inter = struct.unpack_from("<2f", raw, 112)
    qform_code, sform_code = struct.unpack_from("<2h", raw, 252)
    quatern = struct.unpack_from("<3f", raw, 256)
    qoffset = struct.unpack_from("<3f", raw, 268)
    srow = np.array(struct.unpack_from("<12f", raw, 280)).reshape(3, 4)
    return {
        "dim": dim,
        "datatype": datatype,
        "bitpix": bitpix,
        "pixdim": pixdim,
        "vox_offset": vox_offset,
        "scl_slope": scl_slope,
        "scl_inter": scl_inter,
        "qform_code": qform_code,
        "sform_code": sform_code,
        "quatern": quatern,
        "qoffset": qoffset,
        "srow": srow,
    }


def read_nifti(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a supported .nii file; returns (data, affine).

    Data is 3D, or 4D with the channel count on the last axis. Intensity
    scaling (scl_slope/scl_inter) is applied when set.
    """
    raw = Path(path).read_bytes()
    hdr = _parse_header(raw)
    ndim = hdr["dim"][0]
    if ndim not in (3, 4):
        raise UnsupportedDatatype(f"only 3D/4D volumes supported, got dim[0]={ndim}")
    shape = tuple(int(n) for n in hdr["dim"][1 : 1 + ndim])
    if any(n < 1 for n in shape):
        raise ParseError(f"non-positive dimension in header: {shape}")
    if hdr["datatype"] not in _DTYPE_CODES:
        raise UnsupportedDatatype(f"datatype code {hdr['datatype']} not in supported subset")
    dtype = np.dtype(_DTYPE_CODES[hdr["datatype"]]).newbyteorder("<")
    offset = int(hdr["vox_offset"])
    count = int(np.prod(shape))
    payload = raw[offset : offset + count * dtype.itemsize]
    if len(payload) < count * dtype.itemsize:
        raise ParseError("file truncated: fewer data bytes than the header promises")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape, order="F")

    if hdr["sform_code"] > 0:
        affine = np.eye(4)
        affine[:3, :] = hdr["srow"]
    elif hdr["qform_code"] > 0:
        affine = _quaternion_affine(hdr)
    else:
        affine = np.diag([hdr["pixdim"][1] or 1.0, hdr["pixdim"][2] or 1.0, hdr["pixdim"][3] or 1.0, 1.0])

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data.astype(np.float32) * (slope if slope != 0.0 else 1.0) + inter
    return data, affine


def write_nifti(path, data: np.ndarray, affine: np.ndarray) -> None:
    """Write a supported .nii file with the affine stored in the s-form."""
    data = np.asarray(data)
    if data.ndim not in (3, 4):
        raise UnsupportedDatatype(f"only 3D/4D arrays supported, got ndim={data.ndim}")
    if data.dtype not in _CODE_FOR_DTYPE:
        if np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        elif np.issubdtype(data.dtype, np.integer) and data.min() >= 0 and data.max() < 256:
            data = data.astype(np.uint8)
        elif np.issubdtype(data.dtype, np.integer):
            data = data.astype(np.int16)
        else:
            raise UnsupportedDatatype(f"cannot store dtype {data.dtype}")
    code = _CODE_FOR_DTYPE[data.dtype]
    affine = np.asarray(affine, dtype=np.float64)

    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    hdr = bytearray(HDR_SIZE)
    struct.pack_into("<i", hdr, 0, HDR_SIZE)
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<2h", hdr, 70, code, _BITPIX[code])
    pixdim = [1.0, float(spacing[0]), float(spacing[1]), float(spacing[2])] + [1.0] * 4
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, VOX_OFFSET)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code, sform_code
    struct.pack_into("<12f", hdr, 280, *affine[:3, :].reshape(-1))
    hdr[344:348] = MAGIC

    with open(path, "wb") as f:
        f.write(bytes(hdr))
        f.write(b"\x00" * int(VOX_OFFSET - HDR_SIZE))
        f.write(np.asfortranarray(data).tobytes(order="F"))


def read_raw_json(json_path) -> tuple[np.ndarray, np.ndarray]:
    """Read the raw+JSON test format; returns (data, affine)."""
    json_path = Path(json_path)
    try:
        header = json.loads(json_path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"bad JSON header in {json_path}: {exc}") from exc
    for key in ("shape", "spacing_mm", "affine", "dtype"):
        if key not in header:
            raise ParseError(f"raw+JSON header missing key {key!r}")
    if header["dtype"] not in _RAW_DTYPES:
        raise UnsupportedDatatype(f"raw dtype {header['dtype']!r} not supported")
    shape = tuple(int(n) for n in header["shape"])
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    raw_path = json_path.with_suffix(".raw")
    payload = raw_path.read_bytes()
    count = int(np.prod(shape))
    if len(payload) < count * dtype.itemsize:
        raise ParseError(f"{raw_path} truncated")
    data = np.frombuffer(payload[: count * dtype.itemsize], dtype=dtype).reshape(shape, order="F")
    affine = np.asarray(header["affine"], dtype=np.float64)
    if affine.shape != (4, 4):
        raise ParseError(f"affine must be 4x4, got {affine.shape}")
    return data, affine


def write_raw_json(json_path, data: np.ndarray, affine: np.ndarray) -> None:
    json_path = Path(json_path)
    data = np.asarray(data)
    if data.dtype.name not in _RAW_DTYPES:
        raise UnsupportedDatatype(f"raw dtype {data.dtype} not supported")
    affine = np.asarray(affine, dtype=np.float64)
    spacing = np.linalg.norm(affine[:3, :3], axis=0)
    header = {
        "shape": list(data.shape),
        "spacing_mm": [float(s) for s in spacing],
        "affine": affine.tolist(),
        "dtype": data.dtype.name,
    }
    json_path.write_text(json.dumps(header, indent=1, sort_keys=True))
    json_path.with_suffix(".raw").write_bytes(
        np.asfortranarray(data.newbyteorder("<") if data.dtype.byteorder == ">" else data).tobytes(order="F")
    )
