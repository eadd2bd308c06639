"""IDX binary format (the MNIST container): read and write."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array; magic encodes dtype 0x08 and the rank."""
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
            raise IdxFormatError("IDX writer only supports unsigned bytes")
        arr = arr.astype(np.uint8)
    header = struct.pack(">I", 0x0800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.tobytes(order="C"))


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at offset 0")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic >> 8 != 0x08 or (expect_magic is not None and magic != expect_magic):
        want = f" (expected 0x{expect_magic:08x})" if expect_magic is not None else ""
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0{want}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise IdxFormatError(f"{path}: truncated dimension list at offset 4")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    n = int(np.prod(dims)) if dims else 0
    if len(raw) - end < n:
        raise IdxFormatError(
            f"{path}: truncated data at offset {end}: need {n} bytes, have {len(raw) - end}"
        )
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=end).reshape(dims).copy()


def load_idx(images_path, labels_path):
    """Images scaled to [0, 1] float64 plus integer labels."""
    from .tasks import ImageDataset

    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    return ImageDataset(images.astype(np.float64) / 255.0, labels.astype(np.int64))
