"""On-disk formats: RFM1 feature files plus annotation/proposal JSON.

All writers go through a temp-file + rename so readers never observe a
partial file. Readers are strict: anything malformed raises ParseError
with a byte offset instead of returning partial data.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .core import BoundingBox, FeatureMap, ImageAnnotation, LabeledBox

FEATURE_MAGIC = b"RFM1"


class ParseError(ValueError):
    def __init__(self, path: str, offset: int, message: str):
        self.path = str(path)
        self.offset = int(offset)
        super().__init__(f"{self.path} @ byte {self.offset}: {message}")


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via temp file in the same directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def serialize_feature(fmap: FeatureMap) -> bytes:
    ident = fmap.image_id.encode("utf-8")
    header = FEATURE_MAGIC + struct.pack(
        "<IIII", fmap.grid_h, fmap.grid_w, fmap.channels, len(ident)
    )
    payload = np.ascontiguousarray(fmap.values, dtype="<f4").tobytes()
    return header + ident + payload


def write_feature(path, fmap: FeatureMap) -> None:
    atomic_write_bytes(path, serialize_feature(fmap))


def read_feature(path) -> FeatureMap:
    path = str(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != FEATURE_MAGIC:
        raise ParseError(path, 0, f"bad magic {raw[:4]!r}, expected {FEATURE_MAGIC!r}")
    if len(raw) < 20:
        raise ParseError(path, len(raw), "truncated header (need 20 bytes)")
    p, q, d, idlen = struct.unpack_from("<IIII", raw, 4)
    if p < 1 or q < 1 or d < 1:
        raise ParseError(path, 4, f"grid dimensions must be >= 1, got {p}x{q}x{d}")
    id_end = 20 + idlen
    if len(raw) < id_end:
        raise ParseError(path, len(raw), f"truncated image id (need {idlen} bytes)")
    try:
        image_id = raw[20:id_end].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(path, 20, f"image id is not valid UTF-8: {exc}") from None
    expected = id_end + p * q * d * 4
    if len(raw) != expected:
        raise ParseError(
            path,
            min(len(raw), expected),
            f"payload length mismatch: expected {expected} total bytes, got {len(raw)}",
        )
    values = np.frombuffer(raw, dtype="<f4", offset=id_end).reshape(p, q, d)
    if not np.all(np.isfinite(values)):
        raise ParseError(path, id_end, "payload contains NaN/Inf")
    return FeatureMap(image_id, values.copy())


def _load_json_object(path) -> dict:
    path = str(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        obj = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ParseError(path, exc.pos, f"invalid JSON: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ParseError(path, 0, f"expected a JSON object, got {type(obj).__name__}")
    return obj


def _require_keys(path, obj: dict, keys: set[str]) -> None:
    missing = keys - obj.keys()
    extra = obj.keys() - keys
    if missing:
        raise ParseError(path, 0, f"missing keys {sorted(missing)}")
    if extra:
        raise ParseError(path, 0, f"unknown keys {sorted(extra)}")


def _as_box(path, raw, where: str) -> BoundingBox:
    if (
        not isinstance(raw, list)
        or len(raw) != 4
        or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw)
    ):
        raise ParseError(path, 0, f"{where}: box must be [x1, y1, x2, y2] numbers, got {raw!r}")
    try:
        return BoundingBox(*(float(v) for v in raw))
    except ValueError as exc:
        raise ParseError(path, 0, f"{where}: {exc}") from None


def write_annotations(path, ann: ImageAnnotation) -> None:
    atomic_write_json(
        path,
        {
            "image_id": ann.image_id,
            "image_h": ann.image_h,
            "image_w": ann.image_w,
            "boxes": [
                {"box": list(lb.box.as_tuple()), "class_id": lb.class_id} for lb in ann.boxes
            ],
        },
    )


def read_annotations(path) -> ImageAnnotation:
    path = str(path)
    obj = _load_json_object(path)
    _require_keys(path, obj, {"image_id", "image_h", "image_w", "boxes"})
    if not isinstance(obj["image_id"], str):
        raise ParseError(path, 0, "image_id must be a string")
    for key in ("image_h", "image_w"):
        if not isinstance(obj[key], int) or isinstance(obj[key], bool) or obj[key] < 1:
            raise ParseError(path, 0, f"{key} must be a positive integer, got {obj[key]!r}")
    if not isinstance(obj["boxes"], list):
        raise ParseError(path, 0, "boxes must be a list")
    labeled = []
    for i, entry in enumerate(obj["boxes"]):
        if not isinstance(entry, dict):
            raise ParseError(path, 0, f"boxes[{i}] must be an object")
        _require_keys(path, entry, {"box", "class_id"})
        cid = entry["class_id"]
        if not isinstance(cid, int) or isinstance(cid, bool) or cid < 1:
            raise ParseError(path, 0, f"boxes[{i}].class_id must be an integer >= 1, got {cid!r}")
        labeled.append(LabeledBox(_as_box(path, entry["box"], f"boxes[{i}]"), cid))
    try:
        return ImageAnnotation(obj["image_id"], obj["image_h"], obj["image_w"], tuple(labeled))
    except ValueError as exc:
        raise ParseError(path, 0, str(exc)) from None


def write_proposals(path, image_id: str, boxes) -> None:
    rows = []
    for b in boxes:
        rows.append(list(b.as_tuple()) if isinstance(b, BoundingBox) else [float(v) for v in b])
    atomic_write_json(path, {"image_id": image_id, "boxes": rows})


def read_proposals(path) -> tuple[str, tuple[BoundingBox, ...]]:
    path = str(path)
    obj = _load_json_object(path)
    _require_keys(path, obj, {"image_id", "boxes"})
    if not isinstance(obj["image_id"], str):
        raise ParseError(path, 0, "image_id must be a string")
    if not isinstance(obj["boxes"], list):
        raise ParseError(path, 0, "boxes must be a list")
    boxes = tuple(_as_box(path, row, f"boxes[{i}]") for i, row in enumerate(obj["boxes"]))
    return obj["image_id"], boxes
