"""Detection metrics: per-class NMS, average precision at IoU 0.5, and the
normalized incremental-learning score (mean over checkpoints of mAP divided
by an offline reference mAP)."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import BoundingBox, Detection, ImageAnnotation, iou

NMS_IOU = 0.3
NMS_MAX_OUT = 128
MATCH_IOU = 0.5


def nms(
    dets: Sequence[Detection],
    iou_thresh: float = NMS_IOU,
    max_out: int = NMS_MAX_OUT,
) -> list[Detection]:
    """Greedy per-class suppression, then a global top-`max_out` cut.

    Within a class the highest score wins and anything overlapping it
    with IoU strictly above the threshold is dropped. Score ties order
    by box coordinates so results never depend on input order.
    """
    survivors: list[Detection] = []
    for class_id in sorted({d.class_id for d in dets}):
        group = sorted(
            (d for d in dets if d.class_id == class_id),
            key=lambda d: (-d.score, d.box.as_tuple()),
        )
        kept: list[Detection] = []
        for cand in group:
            if all(iou(cand.box, k.box) <= iou_thresh for k in kept):
                kept.append(cand)
        survivors.extend(kept)
    survivors.sort(key=lambda d: (-d.score, d.box.as_tuple(), d.class_id))
    return survivors[:max_out]


def average_precision(
    detections: Sequence[tuple[str, BoundingBox, float]],
    gt_boxes: Mapping[str, Sequence[BoundingBox]],
    iou_thresh: float = MATCH_IOU,
    eleven_point: bool = False,
) -> float:
    """AP for one class over a set of images.

    Detections sort by descending score and greedily claim the
    highest-IoU unmatched ground-truth box in their image (a match needs
    IoU >= iou_thresh); the precision-recall curve is integrated by
    all-point interpolation, or sampled at 11 recall points when asked.
    """
    total_gt = sum(len(v) for v in gt_boxes.values())
    if total_gt == 0:
        raise ValueError("AP is undefined with zero ground-truth boxes")
    order = sorted(detections, key=lambda d: (-d[2], d[1].as_tuple(), d[0]))
    matched: dict[str, list[bool]] = {img: [False] * len(v) for img, v in gt_boxes.items()}
    tp = np.zeros(len(order))
    for i, (image_id, box, _score) in enumerate(order):
        candidates = gt_boxes.get(image_id, ())
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(candidates):
            if matched[image_id][j]:
                continue
            o = iou(box, gt)
            if o > best_iou:
                best_iou, best_j = o, j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[image_id][best_j] = True
            tp[i] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / total_gt
    precision = cum_tp / np.arange(1, len(order) + 1)
    if eleven_point:
        ap = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            mask = recall >= r
            ap += float(precision[mask].max()) if mask.any() else 0.0
        return ap / 11.0
    # all-point: make precision monotone from the right, integrate over recall
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


@dataclass(frozen=True)
class EvalReport:
    t: int
    per_class_ap: dict[int, float]
    classes_evaluated: frozenset[int]
    undefined_classes: frozenset[int]
    map: float

    def to_json(self) -> dict:
        return {
            "t": self.t,
            "map": self.map,
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
            "classes_evaluated": sorted(self.classes_evaluated),
            "undefined_classes": sorted(self.undefined_classes),
        }


def evaluate_detections(
    detections: Mapping[str, Sequence[Detection]],
    annotations: Mapping[str, ImageAnnotation],
    classes: Iterable[int],
    t: int = 0,
    iou_thresh: float = MATCH_IOU,
    eleven_point: bool = False,
) -> EvalReport:
    """mAP over the given classes; rejects ground truth from other classes.

    Classes with no ground-truth box anywhere cannot have an AP and are
    reported separately instead of polluting the mean.
    """
    classes = sorted(set(classes))
    class_set = set(classes)
    for ann in annotations.values():
        extra = ann.classes - class_set
        if extra:
            raise ValueError(
                f"annotation {ann.image_id!r} carries classes {sorted(extra)} "
                f"outside the evaluated set"
            )
    per_class_ap: dict[int, float] = {}
    undefined = set()
    for c in classes:
        gts = {
            img: [lb.box for lb in ann.boxes if lb.class_id == c]
            for img, ann in annotations.items()
        }
        if sum(len(v) for v in gts.values()) == 0:
            undefined.add(c)
            continue
        dets = [
            (img, d.box, d.score)
            for img, ds in detections.items()
            for d in ds
            if d.class_id == c and img in annotations
        ]
        per_class_ap[c] = average_precision(dets, gts, iou_thresh, eleven_point)
    mean_ap = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    return EvalReport(
        t=t,
        per_class_ap=per_class_ap,
        classes_evaluated=frozenset(per_class_ap),
        undefined_classes=frozenset(undefined),
        map=mean_ap,
    )


def omega_map(alphas: Sequence[float], offline) -> float:
    """Mean over checkpoints of checkpoint-mAP divided by the offline mAP.

    `offline` is a single positive constant or a per-checkpoint sequence
    of the same length; values above 1 are legitimate (the streaming
    model can beat the reference).
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.ndim != 1 or alphas.size == 0:
        raise ValueError("alphas must be a non-empty sequence")
    if np.isscalar(offline) or isinstance(offline, (int, float)):
        denom = np.full(alphas.shape, float(offline))
    else:
        denom = np.asarray(offline, dtype=np.float64)
        if denom.shape != alphas.shape:
            raise ValueError(
                f"offline curve length {denom.size} != number of checkpoints {alphas.size}"
            )
    if np.any(denom <= 0.0):
        raise ValueError("offline mAP values must be positive")
    return float(np.mean(alphas / denom))


def write_curves(path, reports: Sequence[EvalReport]) -> None:
    """Learning-curve CSV: one row per checkpoint, one AP column per class."""
    from .fileio import atomic_write_text

    all_classes = sorted({c for r in reports for c in r.per_class_ap})
    lines = []
    header = ["t", "map"] + [f"ap_{c}" for c in all_classes]
    lines.append(",".join(header))
    for r in reports:
        row = [str(r.t), f"{r.map:.6f}"]
        for c in all_classes:
            row.append(f"{r.per_class_ap[c]:.6f}" if c in r.per_class_ap else "")
        lines.append(",".join(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_curve_alphas(path) -> list[float]:
    """The mAP column of a learning-curve CSV, in checkpoint order."""
    from .fileio import ParseError

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ParseError(str(path), 0, "empty curve file")
    try:
        return [float(row["map"]) for row in rows]
    except (KeyError, TypeError):
        raise ParseError(str(path), 0, "curve file lacks a 'map' column") from None
    except ValueError as exc:
        raise ParseError(str(path), 0, f"bad mAP value: {exc}") from None
