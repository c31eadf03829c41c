"""Writers for the on-disk formats consumed by streamdet.

This module is a standalone reimplementation of the container layouts.
It deliberately does not import streamdet: the two packages are coupled
only through the bytes on disk, and the contract tests round-trip every
exported file through streamdet's readers to keep the layouts in sync.

Feature map container, little-endian:

    bytes 0..3    magic b"RFM1"
    bytes 4..19   uint32 x4: grid_h, grid_w, channels, id_length
    next id_length bytes: image id, utf-8
    remainder     float32 payload, C order, grid_h * grid_w * channels

Annotations and proposals are JSON documents with exact key sets; the
readers reject both missing and unexpected keys, so the writers here
build the dicts field by field rather than serializing richer objects.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Sequence

import numpy as np

FEATURE_MAGIC = b"RFM1"
_HEADER = struct.Struct("<IIII")

Box = tuple[float, float, float, float]


def atomic_write_bytes(path: str, payload: bytes) -> None:
    """Write payload to path via a temp file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: str, obj: object) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def serialize_feature(image_id: str, feature_map: np.ndarray) -> bytes:
    if not image_id:
        raise ValueError("image_id must be non-empty")
    arr = np.asarray(feature_map, dtype=np.float32)
    if arr.ndim != 3:
        raise ValueError(f"feature map must be 3-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature map contains non-finite values")
    id_bytes = image_id.encode("utf-8")
    header = _HEADER.pack(arr.shape[0], arr.shape[1], arr.shape[2], len(id_bytes))
    return FEATURE_MAGIC + header + id_bytes + np.ascontiguousarray(arr).tobytes()


def write_feature(path: str, image_id: str, feature_map: np.ndarray) -> None:
    atomic_write_bytes(path, serialize_feature(image_id, feature_map))


def _check_box(box: Sequence[float], image_h: float, image_w: float) -> Box:
    if len(box) != 4:
        raise ValueError(f"box must have 4 coordinates, got {len(box)}")
    x1, y1, x2, y2 = (float(v) for v in box)
    if not all(np.isfinite(v) for v in (x1, y1, x2, y2)):
        raise ValueError(f"box has non-finite coordinates: {box}")
    if not (x1 < x2 and y1 < y2):
        raise ValueError(f"box has non-positive area: {box}")
    if x1 < 0 or y1 < 0 or x2 > image_w or y2 > image_h:
        raise ValueError(f"box {box} exceeds image bounds {image_w}x{image_h}")
    return (x1, y1, x2, y2)


def write_annotations(
    path: str,
    image_id: str,
    image_h: int,
    image_w: int,
    boxes: Sequence[tuple[Sequence[float], int]],
) -> None:
    """Write one image's ground truth. boxes is (box, class_id) pairs."""
    if not image_id:
        raise ValueError("image_id must be non-empty")
    if image_h < 1 or image_w < 1:
        raise ValueError("image dimensions must be positive")
    entries = []
    for box, class_id in boxes:
        checked = _check_box(box, image_h, image_w)
        if int(class_id) != class_id or class_id < 1:
            raise ValueError(f"class_id must be an integer >= 1, got {class_id}")
        entries.append({"box": list(checked), "class_id": int(class_id)})
    doc = {
        "image_id": image_id,
        "image_h": int(image_h),
        "image_w": int(image_w),
        "boxes": entries,
    }
    atomic_write_json(path, doc)


def write_proposals(path: str, image_id: str, boxes: Sequence[Sequence[float]]) -> None:
    if not image_id:
        raise ValueError("image_id must be non-empty")
    entries = []
    for box in boxes:
        if len(box) != 4:
            raise ValueError(f"proposal box must have 4 coordinates, got {len(box)}")
        x1, y1, x2, y2 = (float(v) for v in box)
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"proposal box has non-positive area: {box}")
        entries.append([x1, y1, x2, y2])
    doc = {"image_id": image_id, "boxes": entries}
    atomic_write_json(path, doc)
