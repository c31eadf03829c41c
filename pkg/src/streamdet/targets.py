"""Proposal labeling, mini-batch sampling, and box-delta coding.

Proposals are class-agnostic boxes supplied from outside (real proposal
files or the synthetic generator). A proposal becomes foreground when its
best IoU against a currently-visible ground-truth box exceeds the
threshold; everything else is background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import BoundingBox, EmptyBoxError, ImageAnnotation, iou_matrix, BACKGROUND

IOU_FG = 0.5
BATCH_BOXES = 64
POS_FRAC = 0.25

# log-space width/height deltas beyond this are treated as divergent
# rather than exponentiated into absurd boxes.
MAX_LOG_DELTA = 20.0


class DeltaOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class ProposalSet:
    image_id: str
    boxes: tuple[BoundingBox, ...]

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))


@dataclass(frozen=True)
class RoiTarget:
    """One proposal with its assigned label; deltas only exist for foreground."""

    box: BoundingBox
    class_id: int
    deltas: Optional[tuple[float, float, float, float]] = None
    matched_gt: Optional[int] = None

    def __post_init__(self):
        if self.class_id == BACKGROUND:
            if self.deltas is not None or self.matched_gt is not None:
                raise ValueError("background targets carry no deltas or match")
        else:
            if self.deltas is None or self.matched_gt is None:
                raise ValueError("foreground targets need deltas and a matched gt index")
            if not all(math.isfinite(v) for v in self.deltas):
                raise ValueError(f"non-finite deltas {self.deltas}")

    @property
    def is_foreground(self) -> bool:
        return self.class_id != BACKGROUND


def encode_deltas(proposal: BoundingBox, gt: BoundingBox) -> tuple[float, float, float, float]:
    """(tx, ty, tw, th): center offsets in proposal units plus log size ratios."""
    px, py = proposal.center
    gx, gy = gt.center
    return (
        (gx - px) / proposal.width,
        (gy - py) / proposal.height,
        math.log(gt.width / proposal.width),
        math.log(gt.height / proposal.height),
    )


def decode_deltas(proposal: BoundingBox, deltas: Sequence[float]) -> BoundingBox:
    """Inverse of encode_deltas; rejects non-finite or exploding deltas."""
    tx, ty, tw, th = (float(v) for v in deltas)
    if not all(math.isfinite(v) for v in (tx, ty, tw, th)):
        raise DeltaOverflowError(f"non-finite deltas ({tx}, {ty}, {tw}, {th})")
    if abs(tw) > MAX_LOG_DELTA or abs(th) > MAX_LOG_DELTA:
        raise DeltaOverflowError(f"log size delta out of range: tw={tw}, th={th}")
    px, py = proposal.center
    cx = px + tx * proposal.width
    cy = py + ty * proposal.height
    w = proposal.width * math.exp(tw)
    h = proposal.height * math.exp(th)
    return BoundingBox(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)


def label_proposals(
    proposals: ProposalSet,
    gt: ImageAnnotation,
    visible_classes: Iterable[int],
    iou_fg: float = IOU_FG,
) -> tuple[RoiTarget, ...]:
    """Match each proposal to its max-IoU visible gt box.

    IoU strictly above `iou_fg` makes the proposal foreground with that
    box's class; gt boxes of classes not yet revealed do not exist for
    labeling purposes. Ties on max IoU go to the lowest gt index.
    """
    if proposals.image_id != gt.image_id:
        raise ValueError(f"proposal/gt mismatch: {proposals.image_id!r} vs {gt.image_id!r}")
    if not proposals.boxes:
        return ()
    visible = gt.restrict(visible_classes)
    if not visible.boxes:
        return tuple(RoiTarget(b, BACKGROUND) for b in proposals.boxes)

    prop_arr = np.array([b.as_tuple() for b in proposals.boxes])
    gt_arr = np.array([lb.box.as_tuple() for lb in visible.boxes])
    overlaps = iou_matrix(prop_arr, gt_arr)
    best = np.argmax(overlaps, axis=1)
    best_iou = overlaps[np.arange(len(proposals.boxes)), best]

    out = []
    for i, prop in enumerate(proposals.boxes):
        if best_iou[i] > iou_fg:
            matched = visible.boxes[int(best[i])]
            out.append(
                RoiTarget(
                    prop,
                    matched.class_id,
                    deltas=encode_deltas(prop, matched.box),
                    matched_gt=int(best[i]),
                )
            )
        else:
            out.append(RoiTarget(prop, BACKGROUND))
    return tuple(out)


def sample_minibatch_indices(
    targets: Sequence[RoiTarget],
    seed,
    batch: int = BATCH_BOXES,
    pos_frac: float = POS_FRAC,
) -> np.ndarray:
    """Indices of min(batch, |targets|) boxes with about pos_frac positives.

    The positive quota is ceil(pos_frac * batch); when positives run
    short the rest is background, and when background runs short extra
    positives fill the batch instead of shrinking it.
    """
    if not targets:
        raise ValueError("cannot sample from an empty target list")
    if batch < 1 or not 0.0 <= pos_frac <= 1.0:
        raise ValueError(f"bad batch spec: batch={batch}, pos_frac={pos_frac}")
    take = min(batch, len(targets))
    pos_idx = np.array([i for i, t in enumerate(targets) if t.is_foreground], dtype=np.int64)
    neg_idx = np.array([i for i, t in enumerate(targets) if not t.is_foreground], dtype=np.int64)

    n_pos = min(math.ceil(pos_frac * batch), len(pos_idx), take)
    n_neg = min(take - n_pos, len(neg_idx))
    n_pos = take - n_neg

    rng = np.random.default_rng(seed)
    chosen = []
    if n_pos:
        chosen.append(rng.choice(pos_idx, size=n_pos, replace=False))
    if n_neg:
        chosen.append(rng.choice(neg_idx, size=n_neg, replace=False))
    order = np.concatenate(chosen)
    rng.shuffle(order)
    return order


def sample_minibatch(
    targets: Sequence[RoiTarget],
    seed,
    batch: int = BATCH_BOXES,
    pos_frac: float = POS_FRAC,
) -> tuple[RoiTarget, ...]:
    idx = sample_minibatch_indices(targets, seed, batch, pos_frac)
    return tuple(targets[int(i)] for i in idx)
