"""Small self-describing binary containers used across the toolkit.

* IMG1: magic "IMG1", u32 LE height, width, then f64 row-major values.
* SIN1: magic "SIN1", u32 LE n_angles, n_bins, then f64 values.
* named-array records: length-prefixed (name, shape, f64 data) used by the
  parameter checkpoint files.
* PGM: 8-bit portable graymap export for eyeballing images without tooling.

All writers produce byte-identical output for identical inputs.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

__all__ = [
    "write_img1",
    "read_img1",
    "write_sin1",
    "read_sin1",
    "write_pgm",
    "write_named_arrays",
    "read_named_arrays",
    "file_sha256",
]

_IMG_MAGIC = b"IMG1"
_SIN_MAGIC = b"SIN1"


def _write_2d(path, magic, array):
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 2:
        raise ValueError(f"expected a 2-d array, got shape {array.shape}")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<II", array.shape[0], array.shape[1]))
        fh.write(array.astype("<f8").tobytes())


def _read_2d(path, magic):
    with open(path, "rb") as fh:
        got = fh.read(4)
        if got != magic:
            raise ValueError(f"{path}: expected magic {magic!r}, found {got!r}")
        rows, cols = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(8 * rows * cols), dtype="<f8")
        if data.size != rows * cols:
            raise ValueError(f"{path}: truncated payload")
    return data.reshape(rows, cols).copy()


def write_img1(path, image):
    _write_2d(path, _IMG_MAGIC, image)


def read_img1(path):
    return _read_2d(path, _IMG_MAGIC)


def write_sin1(path, sinogram):
    _write_2d(path, _SIN_MAGIC, sinogram)


def read_sin1(path):
    return _read_2d(path, _SIN_MAGIC)


def write_pgm(path, image):
    """Export an image as binary PGM with a fixed linear gray ramp.

    The image is max-normalized, then mapped linearly onto [0, 255].
    """
    image = np.asarray(image, dtype=np.float64)
    peak = image.max()
    if peak > 0:
        image = image / peak
    levels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(levels.tobytes())


def write_named_arrays(fh, records):
    """Append length-prefixed (name, shape, f64 data) records to a stream."""
    fh.write(struct.pack("<I", len(records)))
    for name, array in records:
        encoded = name.encode("utf-8")
        array = np.asarray(array, dtype=np.float64)
        fh.write(struct.pack("<I", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<I", array.ndim))
        for dim in array.shape:
            fh.write(struct.pack("<Q", dim))
        fh.write(array.astype("<f8").tobytes())


def read_named_arrays(fh):
    (count,) = struct.unpack("<I", fh.read(4))
    records = []
    for _ in range(count):
        (name_len,) = struct.unpack("<I", fh.read(4))
        name = fh.read(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", fh.read(4))
        shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(ndim))
        n_values = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(fh.read(8 * n_values), dtype="<f8").reshape(shape).copy()
        records.append((name, data))
    return records


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
