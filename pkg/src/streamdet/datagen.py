"""Seeded synthetic feature-map datasets.

Each image hosts one class and carries grid-aligned ground-truth boxes;
cells inside a box receive that class's signature direction (a fixed
seeded unit vector scaled by the signal strength) on top of Gaussian
noise. A fraction of images also carry one box of a different class so
multi-label buffer dynamics and annotation merging actually happen.
Proposals are jittered copies of the ground truth plus uniform random
negatives. Everything is a pure function of the spec, so identical specs
produce byte-identical files.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import BoundingBox, FeatureMap, ImageAnnotation, LabeledBox
from .fileio import (
    atomic_write_json,
    read_annotations,
    read_feature,
    read_proposals,
    write_annotations,
    write_feature,
    write_proposals,
)
from .targets import ProposalSet

PLACEMENT_RETRIES = 50


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 10
    images_per_class: int = 200
    grid: tuple[int, int] = (5, 5)
    channels: int = 64
    class_signal_strength: float = 3.0
    noise_std: float = 0.5
    boxes_per_image: tuple[int, int] = (1, 2)
    seed: int = 0
    cell_pixels: int = 32
    proposals_per_image: int = 2000
    jitters_per_gt: int = 8
    extra_class_prob: float = 0.25
    train_frac: float = 0.8

    def __post_init__(self):
        object.__setattr__(self, "grid", (int(self.grid[0]), int(self.grid[1])))
        object.__setattr__(
            self, "boxes_per_image", (int(self.boxes_per_image[0]), int(self.boxes_per_image[1]))
        )
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.images_per_class < 2:
            raise ValueError("need at least 2 images per class to split")
        p, q = self.grid
        if p < 1 or q < 1 or self.channels < 1 or self.cell_pixels < 1:
            raise ValueError(f"bad geometry: grid {self.grid}, d={self.channels}")
        lo, hi = self.boxes_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"bad boxes_per_image range {self.boxes_per_image}")
        if self.proposals_per_image < 1 or self.jitters_per_gt < 0:
            raise ValueError("bad proposal settings")
        if not 0.0 <= self.extra_class_prob <= 1.0:
            raise ValueError(f"extra_class_prob must be in [0,1], got {self.extra_class_prob}")
        if not 0.0 < self.train_frac < 1.0:
            raise ValueError(f"train_frac must be in (0,1), got {self.train_frac}")
        if self.noise_std < 0.0 or self.class_signal_strength < 0.0:
            raise ValueError("noise_std and class_signal_strength must be >= 0")

    @property
    def image_h(self) -> int:
        return self.grid[0] * self.cell_pixels

    @property
    def image_w(self) -> int:
        return self.grid[1] * self.cell_pixels


@dataclass(frozen=True)
class SyntheticImage:
    features: FeatureMap
    annotation: ImageAnnotation
    proposals: ProposalSet

    @property
    def image_id(self) -> str:
        return self.features.image_id


@dataclass(frozen=True)
class Dataset:
    classes: tuple[int, ...]
    train: tuple[SyntheticImage, ...]
    test: tuple[SyntheticImage, ...]
    by_id: dict[str, SyntheticImage] = field(default=None, repr=False)

    def __post_init__(self):
        index = {img.image_id: img for img in self.train + self.test}
        if len(index) != len(self.train) + len(self.test):
            raise ValueError("duplicate image ids in dataset")
        object.__setattr__(self, "by_id", index)

    @property
    def channels(self) -> int:
        return self.train[0].features.channels


def class_signature(spec: SyntheticSpec, class_id: int) -> np.ndarray:
    """The fixed unit direction injected into cells covered by this class."""
    rng = np.random.default_rng([spec.seed, 1_000_000 + class_id])
    v = rng.standard_normal(spec.channels)
    return v / np.linalg.norm(v)


def _place_box(rng, p, q, occupied, max_h, max_w):
    """A grid-aligned cell rectangle not overlapping any existing one."""
    for _ in range(PLACEMENT_RETRIES):
        h = int(rng.integers(1, max_h + 1))
        w = int(rng.integers(1, max_w + 1))
        r0 = int(rng.integers(0, p - h + 1))
        c0 = int(rng.integers(0, q - w + 1))
        rect = (r0, c0, r0 + h, c0 + w)
        if all(
            rect[2] <= o[0] or o[2] <= rect[0] or rect[3] <= o[1] or o[3] <= rect[1]
            for o in occupied
        ):
            return rect
    return None


def _jitter_box(rng, box: BoundingBox, image_w, image_h):
    for _ in range(PLACEMENT_RETRIES):
        cx, cy = box.center
        cx += rng.uniform(-0.2, 0.2) * box.width
        cy += rng.uniform(-0.2, 0.2) * box.height
        w = box.width * np.exp(rng.uniform(-0.15, 0.15))
        h = box.height * np.exp(rng.uniform(-0.15, 0.15))
        x1 = max(cx - w / 2, 0.0)
        y1 = max(cy - h / 2, 0.0)
        x2 = min(cx + w / 2, float(image_w))
        y2 = min(cy + h / 2, float(image_h))
        if x2 - x1 >= 1.0 and y2 - y1 >= 1.0:
            return BoundingBox(x1, y1, x2, y2)
    return None


def _generate_image(spec: SyntheticSpec, class_id: int, index: int, image_id: str):
    rng = np.random.default_rng([spec.seed, index])
    p, q = spec.grid
    cell = spec.cell_pixels
    max_h = max(1, p // 2)
    max_w = max(1, q // 2)

    rects: list[tuple[tuple[int, int, int, int], int]] = []
    occupied: list[tuple[int, int, int, int]] = []
    lo, hi = spec.boxes_per_image
    for _ in range(int(rng.integers(lo, hi + 1))):
        rect = _place_box(rng, p, q, occupied, max_h, max_w)
        if rect is None:
            if not rects:
                raise GenerationError(
                    f"could not place a ground-truth box for {image_id} after "
                    f"{PLACEMENT_RETRIES} tries; loosen grid or box sizes"
                )
            break
        rects.append((rect, class_id))
        occupied.append(rect)
    if spec.num_classes > 1 and rng.random() < spec.extra_class_prob:
        others = [c for c in range(1, spec.num_classes + 1) if c != class_id]
        extra = others[int(rng.integers(len(others)))]
        rect = _place_box(rng, p, q, occupied, max_h, max_w)
        if rect is not None:
            rects.append((rect, extra))
            occupied.append(rect)

    values = (spec.noise_std * rng.standard_normal((p, q, spec.channels))).astype(np.float32)
    boxes = []
    for (r0, c0, r1, c1), cid in rects:
        values[r0:r1, c0:c1] += (
            spec.class_signal_strength * class_signature(spec, cid)
        ).astype(np.float32)
        boxes.append(
            LabeledBox(
                BoundingBox(c0 * cell, r0 * cell, c1 * cell, r1 * cell), cid
            )
        )
    features = FeatureMap(image_id, values)
    annotation = ImageAnnotation(image_id, spec.image_h, spec.image_w, tuple(boxes))

    proposals: list[BoundingBox] = []
    for lb in boxes:
        proposals.append(lb.box)
        for _ in range(spec.jitters_per_gt):
            j = _jitter_box(rng, lb.box, spec.image_w, spec.image_h)
            if j is not None:
                proposals.append(j)
    while len(proposals) < spec.proposals_per_image:
        xs = np.sort(rng.uniform(0, spec.image_w, 2))
        ys = np.sort(rng.uniform(0, spec.image_h, 2))
        if xs[1] - xs[0] >= 2.0 and ys[1] - ys[0] >= 2.0:
            proposals.append(BoundingBox(xs[0], ys[0], xs[1], ys[1]))
    proposals = proposals[: max(spec.proposals_per_image, len(boxes))]
    return SyntheticImage(features, annotation, ProposalSet(image_id, tuple(proposals)))


def generate_dataset(spec: SyntheticSpec) -> Dataset:
    train: list[SyntheticImage] = []
    test: list[SyntheticImage] = []
    n_train = round(spec.train_frac * spec.images_per_class)
    n_train = min(max(n_train, 1), spec.images_per_class - 1)
    for ci, class_id in enumerate(range(1, spec.num_classes + 1)):
        split_rng = np.random.default_rng([spec.seed, 2_000_000 + class_id])
        train_slots = set(
            split_rng.choice(spec.images_per_class, size=n_train, replace=False).tolist()
        )
        for i in range(spec.images_per_class):
            index = ci * spec.images_per_class + i
            image_id = f"img_{class_id:03d}_{i:04d}"
            img = _generate_image(spec, class_id, index, image_id)
            (train if i in train_slots else test).append(img)
    train.sort(key=lambda im: im.image_id)
    test.sort(key=lambda im: im.image_id)
    return Dataset(tuple(range(1, spec.num_classes + 1)), tuple(train), tuple(test))


def write_dataset(dataset: Dataset, out_dir, spec: SyntheticSpec | None = None) -> None:
    out = Path(out_dir)
    for sub in ("features", "annotations", "proposals"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for img in dataset.train + dataset.test:
        iid = img.image_id
        write_feature(out / "features" / f"{iid}.rfm1", img.features)
        write_annotations(out / "annotations" / f"{iid}.json", img.annotation)
        write_proposals(out / "proposals" / f"{iid}.json", iid, img.proposals.boxes)
    manifest = {
        "classes": list(dataset.classes),
        "train_ids": [im.image_id for im in dataset.train],
        "test_ids": [im.image_id for im in dataset.test],
        "spec": asdict(spec) if spec is not None else None,
    }
    atomic_write_json(out / "dataset.json", manifest)


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / "dataset.json"
    with open(manifest_path) as fh:
        manifest = json.load(fh)

    def load_image(iid: str) -> SyntheticImage:
        features = read_feature(root / "features" / f"{iid}.rfm1")
        annotation = read_annotations(root / "annotations" / f"{iid}.json")
        pid, boxes = read_proposals(root / "proposals" / f"{iid}.json")
        if features.image_id != iid or annotation.image_id != iid or pid != iid:
            raise ValueError(f"id mismatch under {root} for {iid!r}")
        return SyntheticImage(features, annotation, ProposalSet(iid, boxes))

    train = tuple(load_image(i) for i in manifest["train_ids"])
    test = tuple(load_image(i) for i in manifest["test_ids"])
    return Dataset(tuple(manifest["classes"]), train, test)
