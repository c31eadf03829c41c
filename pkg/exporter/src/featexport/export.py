"""Dataset export: images -> frozen-backbone feature maps plus JSON ground truth.

The exporter walks a source dataset (raw images plus one annotations.json
describing boxes in original pixel coordinates), pushes every image through
a ResNet-50 truncated after its final residual stage, and writes one feature
container and one annotation document per image in the layout streamdet
consumes. Proposals, when the source provides them, are scaled and written
alongside.

Every image is resized to a fixed height x width before the forward pass, so
the exported grid shape is constant across the dataset regardless of source
resolution. Boxes are scaled into the resized frame with the same per-axis
factors.

Error policy: anything wrong with the annotation documents (bad keys, unknown
class names, degenerate or out-of-bounds boxes, duplicate entries) is a hard
error, raised before any file is written where possible. An image file that
is missing or fails to decode is skipped with a warning line; the rest of the
export proceeds.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from . import formats

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_MANIFEST_KEYS = {"dataset_root", "out_dir", "classes", "weights", "resize", "channels"}
_REQUIRED_MANIFEST_KEYS = {"dataset_root", "out_dir", "classes"}


class ManifestError(ValueError):
    """Raised for malformed manifests or source annotation documents."""


@dataclass(frozen=True)
class ExportManifest:
    dataset_root: str
    out_dir: str
    class_ids: dict[str, int]
    weights: str = "imagenet"
    resize_h: int = 800
    resize_w: int = 1000
    channels: int = 2048


@dataclass
class ExportSummary:
    exported: int = 0
    skipped: list[str] = field(default_factory=list)


def canonical_class_ids(names: list[str]) -> dict[str, int]:
    """Dense ids from 1, assigned in alphabetical order of class name."""
    if not names:
        raise ManifestError("classes must be non-empty")
    if len(set(names)) != len(names):
        raise ManifestError("duplicate class names")
    return {name: i + 1 for i, name in enumerate(sorted(names))}


def _parse_classes(raw: object) -> dict[str, int]:
    if isinstance(raw, list):
        if not all(isinstance(n, str) and n for n in raw):
            raise ManifestError("classes list must contain non-empty strings")
        return canonical_class_ids(list(raw))
    if isinstance(raw, dict):
        if not all(isinstance(k, str) and k for k in raw):
            raise ManifestError("class names must be non-empty strings")
        expected = canonical_class_ids(list(raw))
        got = {k: v for k, v in raw.items()}
        if got != expected:
            raise ManifestError(
                "class_id mapping must be dense from 1 in alphabetical order; "
                f"expected {expected}, got {got}"
            )
        return expected
    raise ManifestError("classes must be a list of names or a name->id mapping")


def load_manifest(path: str) -> ExportManifest:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ManifestError("manifest must be a JSON object")
    unknown = set(raw) - _MANIFEST_KEYS
    if unknown:
        raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
    missing = _REQUIRED_MANIFEST_KEYS - set(raw)
    if missing:
        raise ManifestError(f"missing manifest keys: {sorted(missing)}")

    resize = raw.get("resize", [800, 1000])
    if (
        not isinstance(resize, list)
        or len(resize) != 2
        or not all(isinstance(v, int) and v >= 32 for v in resize)
    ):
        raise ManifestError("resize must be [height, width] with each >= 32")
    channels = raw.get("channels", 2048)
    if not isinstance(channels, int) or channels < 1:
        raise ManifestError("channels must be a positive integer")
    weights = raw.get("weights", "imagenet")
    if not isinstance(weights, str) or not weights:
        raise ManifestError("weights must be 'imagenet', 'none', or a file path")

    base = os.path.dirname(os.path.abspath(path))
    return ExportManifest(
        dataset_root=os.path.join(base, raw["dataset_root"]),
        out_dir=os.path.join(base, raw["out_dir"]),
        class_ids=_parse_classes(raw["classes"]),
        weights=weights,
        resize_h=resize[0],
        resize_w=resize[1],
        channels=channels,
    )


def build_backbone(weights: str) -> torch.nn.Module:
    """ResNet-50 truncated after the last residual stage (stride-32 features).

    weights: 'imagenet' for the torchvision pretrained checkpoint, 'none' for
    a seeded random initialization (deterministic across processes; useful
    where the checkpoint is unavailable and only the file contract matters),
    or a path to a state_dict saved from torchvision's resnet50.
    """
    from torchvision.models import resnet50

    if weights == "imagenet":
        from torchvision.models import ResNet50_Weights

        net = resnet50(weights=ResNet50_Weights.IMAGENET1K_V1)
    elif weights == "none":
        torch.manual_seed(0)
        net = resnet50(weights=None)
    else:
        if not os.path.exists(weights):
            raise ManifestError(f"weights file not found: {weights}")
        net = resnet50(weights=None)
        state = torch.load(weights, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    trunk = torch.nn.Sequential(
        net.conv1,
        net.bn1,
        net.relu,
        net.maxpool,
        net.layer1,
        net.layer2,
        net.layer3,
        net.layer4,
    )
    trunk.eval()
    for p in trunk.parameters():
        p.requires_grad_(False)
    return trunk


def _load_source_annotations(manifest: ExportManifest) -> list[dict]:
    path = os.path.join(manifest.dataset_root, "annotations.json")
    if not os.path.exists(path):
        raise ManifestError(f"annotations file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"annotations file is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict) or set(raw) != {"images"} or not isinstance(raw["images"], list):
        raise ManifestError("annotations document must be {'images': [...]}")

    seen_files: set[str] = set()
    seen_stems: set[str] = set()
    entries = []
    for entry in raw["images"]:
        if not isinstance(entry, dict) or set(entry) != {"file", "boxes"}:
            raise ManifestError(f"image entry must have exactly 'file' and 'boxes': {entry}")
        fname = entry["file"]
        if not isinstance(fname, str) or not fname or os.path.sep in fname:
            raise ManifestError(f"bad image file name: {fname!r}")
        if fname in seen_files:
            raise ManifestError(f"duplicate image entry: {fname}")
        stem = os.path.splitext(fname)[0]
        if stem in seen_stems:
            raise ManifestError(f"image id collision on stem {stem!r}")
        seen_files.add(fname)
        seen_stems.add(stem)
        if not isinstance(entry["boxes"], list):
            raise ManifestError(f"boxes must be a list for {fname}")
        boxes = []
        seen_boxes: set[tuple] = set()
        for item in entry["boxes"]:
            if not isinstance(item, dict) or set(item) != {"box", "class"}:
                raise ManifestError(f"box entry must have exactly 'box' and 'class': {item}")
            cname = item["class"]
            if cname not in manifest.class_ids:
                raise ManifestError(f"unknown class name {cname!r} in {fname}")
            box = item["box"]
            if (
                not isinstance(box, list)
                or len(box) != 4
                or not all(isinstance(v, (int, float)) for v in box)
            ):
                raise ManifestError(f"box must be [x1, y1, x2, y2] numbers: {box}")
            x1, y1, x2, y2 = (float(v) for v in box)
            if not (x1 < x2 and y1 < y2) or x1 < 0 or y1 < 0:
                raise ManifestError(f"degenerate box {box} in {fname}")
            key = ((x1, y1, x2, y2), manifest.class_ids[cname])
            if key in seen_boxes:
                raise ManifestError(f"duplicate (box, class) pair {key} in {fname}")
            seen_boxes.add(key)
            boxes.append(key)
        entries.append({"file": fname, "stem": stem, "boxes": boxes})
    entries.sort(key=lambda e: e["file"])
    return entries


def _load_source_proposals(manifest: ExportManifest, known_stems: set[str]) -> dict[str, list]:
    path = os.path.join(manifest.dataset_root, "proposals.json")
    if not os.path.exists(path):
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict) or set(raw) != {"images"} or not isinstance(raw["images"], list):
        raise ManifestError("proposals document must be {'images': [...]}")
    out: dict[str, list] = {}
    for entry in raw["images"]:
        if not isinstance(entry, dict) or set(entry) != {"file", "boxes"}:
            raise ManifestError(f"proposal entry must have exactly 'file' and 'boxes': {entry}")
        stem = os.path.splitext(entry["file"])[0]
        if stem not in known_stems:
            raise ManifestError(f"proposals reference unknown image {entry['file']!r}")
        if stem in out:
            raise ManifestError(f"duplicate proposal entry: {entry['file']}")
        boxes = []
        for box in entry["boxes"]:
            if not isinstance(box, list) or len(box) != 4:
                raise ManifestError(f"proposal box must be [x1, y1, x2, y2]: {box}")
            x1, y1, x2, y2 = (float(v) for v in box)
            if not (x1 < x2 and y1 < y2) or x1 < 0 or y1 < 0:
                raise ManifestError(f"degenerate proposal box {box} for {entry['file']}")
            boxes.append((x1, y1, x2, y2))
        out[stem] = boxes
    return out


def _scale_box(
    box: tuple[float, float, float, float],
    sx: float,
    sy: float,
    out_w: int,
    out_h: int,
) -> tuple[float, float, float, float]:
    x1, y1, x2, y2 = box
    return (
        min(max(x1 * sx, 0.0), out_w),
        min(max(y1 * sy, 0.0), out_h),
        min(max(x2 * sx, 0.0), out_w),
        min(max(y2 * sy, 0.0), out_h),
    )


def _image_tensor(img: Image.Image, resize_h: int, resize_w: int) -> torch.Tensor:
    resized = img.convert("RGB").resize((resize_w, resize_h), Image.BILINEAR)
    arr = np.asarray(resized, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(IMAGENET_MEAN, dtype=np.float32)) / np.asarray(
        IMAGENET_STD, dtype=np.float32
    )
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))[None]


def export(manifest: ExportManifest, log=sys.stderr) -> ExportSummary:
    """Run the full export. Returns counts; warnings go to the log stream."""
    entries = _load_source_annotations(manifest)
    proposals = _load_source_proposals(manifest, {e["stem"] for e in entries})
    backbone = build_backbone(manifest.weights)

    feat_dir = os.path.join(manifest.out_dir, "features")
    ann_dir = os.path.join(manifest.out_dir, "annotations")
    prop_dir = os.path.join(manifest.out_dir, "proposals")

    classes_doc = {"classes": dict(sorted(manifest.class_ids.items()))}
    formats.atomic_write_json(os.path.join(manifest.out_dir, "classes.json"), classes_doc)

    summary = ExportSummary()
    for entry in entries:
        img_path = os.path.join(manifest.dataset_root, "images", entry["file"])
        try:
            with Image.open(img_path) as img:
                img.load()
                orig_w, orig_h = img.size
                tensor = _image_tensor(img, manifest.resize_h, manifest.resize_w)
        except (OSError, Image.DecompressionBombError) as exc:
            print(f"warning: skipping unreadable image {img_path}: {exc}", file=log)
            summary.skipped.append(entry["file"])
            continue

        # Boxes were validated for shape upfront; bounds need the decoded size.
        for box, _ in entry["boxes"]:
            if box[2] > orig_w or box[3] > orig_h:
                raise ManifestError(
                    f"box {list(box)} exceeds image bounds {orig_w}x{orig_h} in {entry['file']}"
                )

        with torch.no_grad():
            fmap = backbone(tensor)
        if fmap.shape[1] != manifest.channels:
            raise ManifestError(
                f"backbone produced {fmap.shape[1]} channels, manifest expects {manifest.channels}"
            )
        grid = fmap[0].permute(1, 2, 0).contiguous().numpy().astype(np.float32)

        sx = manifest.resize_w / orig_w
        sy = manifest.resize_h / orig_h
        scaled = [
            (_scale_box(box, sx, sy, manifest.resize_w, manifest.resize_h), cid)
            for box, cid in entry["boxes"]
        ]

        stem = entry["stem"]
        formats.write_feature(os.path.join(feat_dir, f"{stem}.rfm1"), stem, grid)
        formats.write_annotations(
            os.path.join(ann_dir, f"{stem}.json"),
            stem,
            manifest.resize_h,
            manifest.resize_w,
            scaled,
        )
        if stem in proposals:
            scaled_props = [
                _scale_box(box, sx, sy, manifest.resize_w, manifest.resize_h)
                for box in proposals[stem]
            ]
            formats.write_proposals(os.path.join(prop_dir, f"{stem}.json"), stem, scaled_props)
        summary.exported += 1
    return summary
