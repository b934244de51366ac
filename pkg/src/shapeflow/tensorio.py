"""Binary tensor container and portable-pixmap frame export.

Container layout (all integers little-endian):

    bytes 0-3   magic ``SFTC``
    u32         format version (currently 1)
    u32         dtype code (1 = little-endian float64)
    u32         ndim
    u64 * ndim  shape
    payload     raw little-endian values, C order

PPM files use the binary ``P6`` variant with maxval 255 for quick visual
inspection of individual frames.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SFTC"
VERSION = 1
_DTYPE_F8 = 1


class ContainerError(ValueError):
    """Malformed or unsupported tensor container."""


def write_tensor(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, _DTYPE_F8, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ContainerError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, dtype_code, ndim = struct.unpack_from("<III", blob, 4)
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    if dtype_code != _DTYPE_F8:
        raise ContainerError(f"unsupported dtype code {dtype_code}")
    shape = struct.unpack_from(f"<{ndim}Q", blob, 16)
    offset = 16 + 8 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    return data.reshape(shape).astype(np.float64)


def write_ppm(path, frame) -> None:
    """Write one [3, H, W] float frame (values clipped to [0, 1]) as P6."""
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ContainerError(f"expected a [3, H, W] frame, got shape {arr.shape}")
    pixels = np.clip(arr, 0.0, 1.0)
    bytes_img = np.round(pixels * 255.0).astype(np.uint8).transpose(1, 2, 0)
    h, w = bytes_img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(bytes_img.tobytes(order="C"))


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 file back to a [3, H, W] float array in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise ContainerError(f"expected P6 pixmap, got {fields[0]!r}")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ContainerError(f"unsupported maxval {maxval}")
    pos += 1  # single whitespace after header
    raw = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / 255.0
