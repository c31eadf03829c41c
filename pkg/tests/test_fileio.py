import json
import struct

import numpy as np
import pytest

from streamdet import (
    BoundingBox,
    ParseError,
    read_annotations,
    read_feature,
    read_proposals,
    write_annotations,
    write_feature,
    write_proposals,
)
from streamdet.fileio import atomic_write_bytes, atomic_write_json, serialize_feature

from conftest import make_annotation, make_fmap


def test_feature_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    fmap = make_fmap(rng, p=3, q=5, d=7, image_id="img_001")
    path = tmp_path / "f.rfm1"
    write_feature(path, fmap)
    loaded = read_feature(path)
    assert loaded.image_id == "img_001"
    assert np.array_equal(loaded.values, fmap.values)


def test_feature_header_layout(tmp_path):
    rng = np.random.default_rng(1)
    fmap = make_fmap(rng, p=2, q=2, d=3, image_id="ab")
    blob = serialize_feature(fmap)
    assert blob[:4] == b"RFM1"
    p, q, d, idlen = struct.unpack("<IIII", blob[4:20])
    assert (p, q, d, idlen) == (2, 2, 3, 2)
    assert blob[20:22] == b"ab"
    assert len(blob) == 22 + 2 * 2 * 3 * 4


def test_feature_reader_rejects_corruption(tmp_path):
    rng = np.random.default_rng(2)
    fmap = make_fmap(rng, image_id="x")
    path = tmp_path / "f.rfm1"
    write_feature(path, fmap)
    raw = path.read_bytes()

    cases = {
        "magic": b"ZZZZ" + raw[4:],
        "short": raw[: len(raw) // 2],
        "trailing": raw + b"junk",
    }
    for name, data in cases.items():
        bad = tmp_path / f"{name}.rfm1"
        bad.write_bytes(data)
        with pytest.raises(ParseError) as err:
            read_feature(bad)
        assert str(bad) in str(err.value)

    # non-finite payload
    nan_blob = bytearray(raw)
    nan_blob[-4:] = struct.pack("<f", float("nan"))
    bad = tmp_path / "nan.rfm1"
    bad.write_bytes(bytes(nan_blob))
    with pytest.raises(ParseError):
        read_feature(bad)


def test_annotation_roundtrip(tmp_path):
    ann = make_annotation("img_7", boxes=((0, 0, 10, 10, 1), (5, 5, 20, 20, 3)), w=32, h=32)
    path = tmp_path / "a.json"
    write_annotations(path, ann)
    loaded = read_annotations(path)
    assert loaded == ann


def test_annotation_reader_is_strict(tmp_path):
    good = {
        "image_id": "a",
        "image_h": 10,
        "image_w": 10,
        "boxes": [{"box": [0, 0, 5, 5], "class_id": 1}],
    }

    def check_fails(mutate):
        doc = json.loads(json.dumps(good))
        mutate(doc)
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        with pytest.raises(ParseError):
            read_annotations(path)

    check_fails(lambda d: d.pop("image_h"))
    check_fails(lambda d: d.update(extra=1))
    check_fails(lambda d: d["boxes"][0].update(class_id=0))
    check_fails(lambda d: d["boxes"][0].update(box=[0, 0, 5]))
    check_fails(lambda d: d["boxes"][0].update(box=[0, 0, 50, 5]))  # out of bounds
    check_fails(lambda d: d.update(image_h=True))  # bool is not an int here

    path = tmp_path / "notjson.json"
    path.write_text("{nope")
    with pytest.raises(ParseError):
        read_annotations(path)


def test_proposal_roundtrip(tmp_path):
    boxes = (BoundingBox(0, 0, 4, 4), BoundingBox(1, 1, 8, 9))
    path = tmp_path / "p.json"
    write_proposals(path, "img_3", boxes)
    image_id, loaded = read_proposals(path)
    assert image_id == "img_3"
    assert loaded == boxes


def test_proposal_reader_rejects_degenerate_boxes(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(json.dumps({"image_id": "a", "boxes": [[0, 0, 0, 5]]}))
    with pytest.raises(ParseError):
        read_proposals(path)


def test_atomic_write_replaces_and_cleans_up(tmp_path):
    path = tmp_path / "out.bin"
    path.write_bytes(b"old")
    atomic_write_bytes(path, b"new")
    assert path.read_bytes() == b"new"
    leftovers = [p for p in tmp_path.iterdir() if p.name != "out.bin"]
    assert leftovers == []


def test_atomic_write_json_stable_formatting(tmp_path):
    path = tmp_path / "o.json"
    atomic_write_json(path, {"b": 1, "a": [1, 2]})
    text = path.read_text()
    assert text.index('"a"') < text.index('"b"')
    assert text.endswith("\n")
    assert json.loads(text) == {"b": 1, "a": [1, 2]}
