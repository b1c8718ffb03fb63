"""Dataset ingestion: IDX (optionally gzipped) and CSV, plus prediction files."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path as FsPath

import numpy as np

from .ensemble import ExternalPredictions
from .network import Dataset

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_maybe_gzip(path) -> bytes:
    raw = FsPath(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def _idx_header(raw: bytes, path, expect_magic: int, n_dims: int):
    need = 4 * (1 + n_dims)
    if len(raw) < need:
        raise ValueError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expect_magic:
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    dims = struct.unpack(f">{n_dims}I", raw[4:need])
    return dims, raw[need:]


def load_idx(images_path, labels_path) -> Dataset:
    """Image/label IDX pair -> Dataset with pixels scaled to [0,1] by /255."""
    img_raw = _read_maybe_gzip(images_path)
    (n, rows, cols), img_body = _idx_header(img_raw, images_path, IDX_IMAGES_MAGIC, 3)
    if len(img_body) < n * rows * cols:
        raise ValueError(f"{images_path}: truncated IDX payload "
                         f"({len(img_body)} bytes for {n}x{rows}x{cols})")
    pixels = np.frombuffer(img_body[:n * rows * cols], dtype=np.uint8)
    points = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0

    lab_raw = _read_maybe_gzip(labels_path)
    (n_labels,), lab_body = _idx_header(lab_raw, labels_path, IDX_LABELS_MAGIC, 1)
    if len(lab_body) < n_labels:
        raise ValueError(f"{labels_path}: truncated IDX payload")
    if n_labels != n:
        raise ValueError(f"image/label count mismatch: {n} images vs {n_labels} labels")
    labels = np.frombuffer(lab_body[:n_labels], dtype=np.uint8).astype(np.int64)
    return Dataset(points, labels)


def _parse_float(cell: str, path, line_no: int) -> float:
    try:
        return float(cell)
    except ValueError:
        raise ValueError(f"{path}:{line_no}: non-numeric cell {cell!r}") from None


def load_csv(path) -> Dataset:
    """Rows of "label, v1..vd"; the header row is optional.

    Labels must be integers; values are validated numeric and clamped to
    [0,1]. Ragged rows are rejected.
    """
    lines = [ln for ln in FsPath(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty file")
    start = 0
    first = [c.strip() for c in lines[0].split(",")]
    try:
        float(first[0])
    except ValueError:
        start = 1
    if start == len(lines):
        raise ValueError(f"{path}: header but no data rows")

    width = None
    labels, rows = [], []
    for line_no, ln in enumerate(lines[start:], start=start + 1):
        cells = [c.strip() for c in ln.split(",")]
        if width is None:
            width = len(cells)
            if width < 2:
                raise ValueError(f"{path}: rows need a label and at least one value")
        elif len(cells) != width:
            raise ValueError(f"{path}:{line_no}: ragged row "
                             f"({len(cells)} cells, expected {width})")
        label = _parse_float(cells[0], path, line_no)
        if not label.is_integer():
            raise ValueError(f"{path}:{line_no}: label {cells[0]!r} is not an integer")
        labels.append(int(label))
        rows.append([_parse_float(c, path, line_no) for c in cells[1:]])
    points = np.clip(np.asarray(rows, dtype=np.float64), 0.0, 1.0)
    return Dataset(points, np.asarray(labels, dtype=np.int64))


def save_csv(ds: Dataset, path, header: bool = True) -> None:
    """Writes repr-exact floats so a read-back reproduces the dataset bit for bit."""
    lines = []
    if header:
        lines.append("label," + ",".join(f"v{i}" for i in range(ds.dim)))
    for label, row in zip(ds.labels, ds.points):
        lines.append(f"{int(label)}," + ",".join(repr(float(v)) for v in row))
    FsPath(path).write_text("\n".join(lines) + "\n")


def load_external_predictions(path, model_tag: str) -> ExternalPredictions:
    """Class-score CSV from an external model.

    The mandatory header row carries one column name per class, so its
    width announces the class count; every following row holds that many
    numeric scores for one test point.
    """
    lines = [ln for ln in FsPath(path).read_text().splitlines() if ln.strip()]
    if len(lines) < 2:
        raise ValueError(f"{path}: need a header row and at least one score row")
    header = [c.strip() for c in lines[0].split(",")]
    try:
        float(header[0])
    except ValueError:
        pass
    else:
        raise ValueError(f"{path}: missing header row (first row is numeric)")
    n_classes = len(header)
    rows = []
    for line_no, ln in enumerate(lines[1:], start=2):
        cells = [c.strip() for c in ln.split(",")]
        if len(cells) != n_classes:
            raise ValueError(f"{path}:{line_no}: expected {n_classes} scores, got {len(cells)}")
        rows.append([_parse_float(c, path, line_no) for c in cells])
    return ExternalPredictions(np.asarray(rows, dtype=np.float64), model_tag)


def save_external_predictions(preds: ExternalPredictions, path) -> None:
    n_classes = preds.scores.shape[1]
    lines = [",".join(f"class_{i}" for i in range(n_classes))]
    for row in preds.scores:
        lines.append(",".join(repr(float(v)) for v in row))
    FsPath(path).write_text("\n".join(lines) + "\n")
