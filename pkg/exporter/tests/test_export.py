"""End-to-end export tests.

These intentionally import streamdet's readers: the exporter and the
training package share nothing but bytes on disk, so the contract is
"streamdet's strict parsers accept every file we write". Backbone runs
use the seeded random initialization (weights "none") because only the
file contract is under test, not feature quality.

Most tests run at a reduced resize (256x320) to keep CPU forward passes
cheap; the default-resolution grid shape gets its own dedicated test.
"""

import io
import json
import os

import numpy as np
import pytest
from PIL import Image

from featexport import ManifestError, export, load_manifest
from streamdet.fileio import read_annotations, read_feature, read_proposals


def _make_image(path, w, h, seed):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def _write_dataset(root, entries, proposals=None):
    """entries: list of (file, w, h, boxes) with boxes as [(box, class_name)]."""
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    doc = {"images": []}
    for i, (fname, w, h, boxes) in enumerate(entries):
        _make_image(os.path.join(root, "images", fname), w, h, seed=100 + i)
        doc["images"].append(
            {"file": fname, "boxes": [{"box": list(b), "class": c} for b, c in boxes]}
        )
    with open(os.path.join(root, "annotations.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    if proposals is not None:
        pdoc = {"images": [{"file": f, "boxes": [list(b) for b in bs]} for f, bs in proposals]}
        with open(os.path.join(root, "proposals.json"), "w", encoding="utf-8") as fh:
            json.dump(pdoc, fh)


def _write_manifest(path, **overrides):
    doc = {
        "dataset_root": "data",
        "out_dir": "out",
        "classes": ["person", "bicycle"],
        "weights": "none",
        "resize": [256, 320],
    }
    doc.update(overrides)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


@pytest.fixture
def small_dataset(tmp_path):
    entries = [
        ("a.png", 400, 160, [((10.0, 20.0, 110.0, 120.0), "person")]),
        ("b.png", 200, 200, [((0.0, 0.0, 200.0, 200.0), "bicycle"),
                             ((50.0, 50.0, 150.0, 150.0), "person")]),
        ("c.png", 320, 256, []),
    ]
    proposals = [
        ("a.png", [(0.0, 0.0, 100.0, 100.0), (5.0, 5.0, 50.0, 60.0)]),
        ("c.png", [(10.0, 10.0, 300.0, 200.0)]),
    ]
    _write_dataset(str(tmp_path / "data"), entries, proposals)
    manifest_path = str(tmp_path / "manifest.json")
    _write_manifest(manifest_path)
    return tmp_path, manifest_path


def test_class_id_mapping(tmp_path, small_dataset):
    _, manifest_path = small_dataset
    m = load_manifest(manifest_path)
    # alphabetical dense ids regardless of list order
    assert m.class_ids == {"bicycle": 1, "person": 2}

    _write_manifest(manifest_path, classes={"bicycle": 1, "person": 2})
    assert load_manifest(manifest_path).class_ids == {"bicycle": 1, "person": 2}

    _write_manifest(manifest_path, classes={"bicycle": 2, "person": 1})
    with pytest.raises(ManifestError):
        load_manifest(manifest_path)
    _write_manifest(manifest_path, classes={"bicycle": 1, "person": 3})
    with pytest.raises(ManifestError):
        load_manifest(manifest_path)


def test_manifest_validation(tmp_path):
    path = str(tmp_path / "m.json")
    _write_manifest(path, typo_key=1)
    with pytest.raises(ManifestError):
        load_manifest(path)

    doc = {"dataset_root": "data", "classes": ["a"]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    with pytest.raises(ManifestError):
        load_manifest(path)

    _write_manifest(path, resize=[256])
    with pytest.raises(ManifestError):
        load_manifest(path)


def test_export_roundtrips_through_strict_readers(small_dataset):
    tmp_path, manifest_path = small_dataset
    m = load_manifest(manifest_path)
    summary = export(m)
    assert summary.exported == 3
    assert summary.skipped == []

    out = tmp_path / "out"
    assert sorted(os.listdir(out / "features")) == ["a.rfm1", "b.rfm1", "c.rfm1"]
    assert sorted(os.listdir(out / "annotations")) == ["a.json", "b.json", "c.json"]
    assert sorted(os.listdir(out / "proposals")) == ["a.json", "c.json"]

    for stem in ("a", "b", "c"):
        fmap = read_feature(str(out / "features" / f"{stem}.rfm1"))
        assert fmap.image_id == stem
        # 256x320 input through a stride-32 trunk
        assert fmap.values.shape == (8, 10, 2048)
        assert fmap.values.dtype == np.float32

    # a.png is 400x160, resized to 320x256: sx = 0.8, sy = 1.6
    ann = read_annotations(str(out / "annotations" / "a.json"))
    assert ann.image_id == "a"
    assert (ann.image_h, ann.image_w) == (256, 320)
    assert len(ann.boxes) == 1
    got = ann.boxes[0]
    assert got.class_id == 2  # person
    np.testing.assert_allclose(
        (got.box.x1, got.box.y1, got.box.x2, got.box.y2),
        (10.0 * 0.8, 20.0 * 1.6, 110.0 * 0.8, 120.0 * 1.6),
        rtol=0,
        atol=1e-9,
    )

    # b.png is 200x200 with a full-frame box: must land exactly on the frame
    ann_b = read_annotations(str(out / "annotations" / "b.json"))
    classes = sorted(lb.class_id for lb in ann_b.boxes)
    assert classes == [1, 2]
    full = next(lb for lb in ann_b.boxes if lb.class_id == 1)
    assert (full.box.x1, full.box.y1, full.box.x2, full.box.y2) == (0.0, 0.0, 320.0, 256.0)

    ann_c = read_annotations(str(out / "annotations" / "c.json"))
    assert ann_c.boxes == ()

    image_id, props = read_proposals(str(out / "proposals" / "a.json"))
    assert image_id == "a"
    assert len(props) == 2
    np.testing.assert_allclose(
        (props[0].x1, props[0].y1, props[0].x2, props[0].y2),
        (0.0, 0.0, 80.0, 160.0),
        rtol=0,
        atol=1e-9,
    )

    classes_doc = json.loads((out / "classes.json").read_text(encoding="utf-8"))
    assert classes_doc == {"classes": {"bicycle": 1, "person": 2}}


def test_reexport_is_byte_identical(small_dataset):
    tmp_path, manifest_path = small_dataset
    m1 = load_manifest(manifest_path)
    export(m1)
    _write_manifest(manifest_path, out_dir="out2")
    m2 = load_manifest(manifest_path)
    export(m2)

    first = tmp_path / "out"
    second = tmp_path / "out2"
    rel_files = []
    for dirpath, _, files in os.walk(first):
        for f in files:
            rel_files.append(os.path.relpath(os.path.join(dirpath, f), first))
    assert len(rel_files) == 9  # 3 features + 3 annotations + 2 proposals + classes.json
    for rel in rel_files:
        b1 = (first / rel).read_bytes()
        b2 = (second / rel).read_bytes()
        assert b1 == b2, f"re-export differs for {rel}"


def test_unreadable_image_is_skipped_with_warning(small_dataset):
    tmp_path, manifest_path = small_dataset
    bad = tmp_path / "data" / "images" / "b.png"
    bad.write_bytes(b"this is not an image")

    log = io.StringIO()
    summary = export(load_manifest(manifest_path), log=log)
    assert summary.exported == 2
    assert summary.skipped == ["b.png"]
    assert "warning" in log.getvalue()
    assert "b.png" in log.getvalue()
    out = tmp_path / "out"
    assert sorted(os.listdir(out / "features")) == ["a.rfm1", "c.rfm1"]
    assert not (out / "annotations" / "b.json").exists()


def test_missing_image_file_is_skipped(small_dataset):
    tmp_path, manifest_path = small_dataset
    os.unlink(tmp_path / "data" / "images" / "a.png")
    log = io.StringIO()
    summary = export(load_manifest(manifest_path), log=log)
    assert summary.exported == 2
    assert summary.skipped == ["a.png"]


def test_invalid_annotations_are_hard_errors(small_dataset):
    tmp_path, manifest_path = small_dataset
    ann_path = tmp_path / "data" / "annotations.json"

    doc = json.loads(ann_path.read_text(encoding="utf-8"))
    doc["images"][0]["boxes"][0]["class"] = "dragon"
    ann_path.write_text(json.dumps(doc), encoding="utf-8")
    with pytest.raises(ManifestError, match="unknown class"):
        export(load_manifest(manifest_path))

    doc["images"][0]["boxes"][0]["class"] = "person"
    doc["images"][0]["boxes"][0]["box"] = [50.0, 20.0, 10.0, 120.0]
    ann_path.write_text(json.dumps(doc), encoding="utf-8")
    with pytest.raises(ManifestError, match="degenerate"):
        export(load_manifest(manifest_path))

    doc["images"][0]["boxes"][0] = {"box": [1.0, 1.0, 2.0, 2.0], "class": "person", "extra": 1}
    ann_path.write_text(json.dumps(doc), encoding="utf-8")
    with pytest.raises(ManifestError, match="exactly"):
        export(load_manifest(manifest_path))

    # no partial output: validation failed before any forward pass
    assert not (tmp_path / "out" / "features").exists()


def test_out_of_bounds_box_is_hard_error(small_dataset):
    tmp_path, manifest_path = small_dataset
    ann_path = tmp_path / "data" / "annotations.json"
    doc = json.loads(ann_path.read_text(encoding="utf-8"))
    # a.png is 400x160; x2 fits but y2 exceeds the decoded height
    doc["images"][0]["boxes"][0]["box"] = [10.0, 20.0, 110.0, 170.0]
    ann_path.write_text(json.dumps(doc), encoding="utf-8")
    with pytest.raises(ManifestError, match="exceeds image bounds"):
        export(load_manifest(manifest_path))


def test_default_resolution_grid_shape(tmp_path):
    entries = [("big.png", 640, 480, [((8.0, 8.0, 300.0, 200.0), "person")])]
    _write_dataset(str(tmp_path / "data"), entries)
    manifest_path = str(tmp_path / "manifest.json")
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(
            {"dataset_root": "data", "out_dir": "out", "classes": ["person"], "weights": "none"},
            fh,
        )
    m = load_manifest(manifest_path)
    assert (m.resize_h, m.resize_w) == (800, 1000)
    export(m)

    fmap = read_feature(str(tmp_path / "out" / "features" / "big.rfm1"))
    # 800x1000 input, stride-32 trunk: ceil(800/32) x ceil(1000/32)
    assert fmap.values.shape == (25, 32, 2048)
    ann = read_annotations(str(tmp_path / "out" / "annotations" / "big.json"))
    assert (ann.image_h, ann.image_w) == (800, 1000)
