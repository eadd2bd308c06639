"""Metrics CSV and PGM matrix export."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

COLUMNS = ("step", "split", "metric", "value", "ci")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class MetricsRow:
    step: int
    split: str
    metric: str
    value: float
    ci: float | None = None


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


class MetricsWriter:
    """Append-only CSV sink.

    Steps must not decrease within one (split, metric) series; several
    methods in one run each log their own series from step 0.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._last: dict[tuple, int] = {}
        with open(self.path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(COLUMNS)

    def write(self, row: MetricsRow) -> None:
        if row.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {row.split!r}")
        key = (row.split, row.metric)
        if row.step < self._last.get(key, row.step):
            raise ValueError(f"step {row.step} precedes step {self._last[key]} for {key}")
        self._last[key] = row.step
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(
                [row.step, row.split, row.metric, _fmt(row.value), _fmt(row.ci)])


def read_metrics(path_or_text) -> list[MetricsRow]:
    text = path_or_text
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
        text = Path(path_or_text).read_text()
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if tuple(header or ()) != COLUMNS:
        raise ValueError(f"metrics header must be {COLUMNS}, got {header}")
    rows = []
    for rec in reader:
        step, split, metric, value, ci = rec
        rows.append(MetricsRow(int(step), split, metric, float(value), float(ci) if ci else None))
    return rows


def matrix_to_pgm_bytes(matrix, normalization: str = "abs_max") -> bytes:
    """8-bit binary PGM.  abs_max: |x|/max|x| -> 0..255; signed: [-M, M] -> 0..255, 0 -> 128."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D matrix, got shape {m.shape}")
    top = float(np.max(np.abs(m))) if m.size else 0.0
    if normalization == "abs_max":
        pix = np.zeros(m.shape) if top == 0 else np.abs(m) / top * 255.0
    elif normalization == "signed":
        # all-zero input still exports an all-zero image
        pix = np.zeros(m.shape) if top == 0 else 128.0 + m / top * 127.5
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    pix = np.clip(np.rint(pix), 0, 255).astype(np.uint8)
    h, w = m.shape
    return f"P5\n{w} {h}\n255\n".encode() + pix.tobytes()


def export_matrix_pgm(matrix, path, normalization: str = "abs_max") -> None:
    Path(path).write_bytes(matrix_to_pgm_bytes(matrix, normalization))


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def symmetry_blocks(U, out_dim: int, in_dim: int) -> np.ndarray:
    """Tile the columns of U (each an out_dim x in_dim sharing pattern) side by side."""
    U = np.asarray(U, dtype=np.float64)
    if U.shape[0] != out_dim * in_dim:
        raise ValueError(f"U has {U.shape[0]} rows, expected {out_dim * in_dim}")
    blocks = [U[:, j].reshape(out_dim, in_dim) for j in range(U.shape[1])]
    gap = np.zeros((out_dim, 1))
    row = []
    for b in blocks:
        row += [b, gap]
    return np.concatenate(row[:-1], axis=1)
