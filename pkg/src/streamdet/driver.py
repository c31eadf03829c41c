"""Experiment orchestration: offline base initialization on the first block
of classes, then a strictly sequential stream that reveals one class at a
time, training on each image exactly once.

Three learners share the schedule:
  - replay: quantize the incoming image, store it, mix it with n-1
    reconstructed buffer samples, take one SGD step on the mixture;
  - fine_tune: one SGD step on the incoming image alone (the forgetting
    baseline);
  - slda_regress: streaming Gaussian classifier + streaming linear
    regressor, no SGD and no buffer.

An offline reference is just a run whose schedule has every class in the
base block and no incremental classes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import head as head_mod
from . import pq as pq_mod
from . import slda as slda_mod
from .buffer import Policy, ReplayBuffer, SampleResult, save_buffer
from .config import ExperimentConfig, Learner, config_to_dict
from .core import Detection, EmptyBoxError, ImageAnnotation, clip_box, BACKGROUND
from .datagen import Dataset, SyntheticImage
from .evaluation import EvalReport, evaluate_detections, nms, write_curves
from .fileio import atomic_write_json, atomic_write_text
from .targets import (
    DeltaOverflowError,
    decode_deltas,
    label_proposals,
    sample_minibatch_indices,
)

# detections with softmax probability below this are not emitted;
# keeps NMS input bounded without affecting any real candidate
DET_SCORE_MIN = 0.01


@dataclass(frozen=True)
class StepRecord:
    step: int
    increment_class: int | None
    image_id: str
    visible_classes: tuple[int, ...]
    loss: float | None
    replay_ids: tuple[str, ...]
    truncated_replay: bool
    evicted: tuple[str, ...]
    buffer_entries: int
    buffer_bytes: int

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "increment_class": self.increment_class,
            "image_id": self.image_id,
            "visible_classes": list(self.visible_classes),
            "loss": self.loss,
            "replay_ids": list(self.replay_ids),
            "truncated_replay": self.truncated_replay,
            "evicted": list(self.evicted),
            "buffer_entries": self.buffer_entries,
            "buffer_bytes": self.buffer_bytes,
        }


@dataclass
class StreamLog:
    steps: list[StepRecord] = field(default_factory=list)
    reports: list[EvalReport] = field(default_factory=list)


def audit_single_pass(log: StreamLog, dataset: Dataset, incremental_classes) -> dict:
    """Verify every (image, increment) pair streamed exactly once.

    Returns {class_id: count}; raises if any image of an increment was
    trained zero or multiple times.
    """
    seen: dict[tuple[str, int], int] = {}
    for rec in log.steps:
        if rec.increment_class is None:
            continue
        key = (rec.image_id, rec.increment_class)
        seen[key] = seen.get(key, 0) + 1
    per_class: dict[int, int] = {}
    for class_id in incremental_classes:
        expected = {
            im.image_id for im in dataset.train if class_id in im.annotation.classes
        }
        for iid in expected:
            count = seen.pop((iid, class_id), 0)
            if count != 1:
                raise AssertionError(
                    f"image {iid!r} trained {count} times in increment {class_id}"
                )
        per_class[class_id] = len(expected)
    if seen:
        raise AssertionError(f"unexpected stream steps: {sorted(seen)}")
    return per_class


class ExperimentState:
    """All mutable learner state plus pooled-feature caches.

    Caches are pure memoization: raw pooling depends only on the dataset,
    and decoded pooling depends only on the frozen quantizer and an
    image's codes, which are written once and never rewritten.
    """

    def __init__(self, config: ExperimentConfig, dataset: Dataset):
        self.config = config
        self.dataset = dataset
        self.visible: list[int] = []
        self.step = 0
        self.increments_done = 0
        self.log = StreamLog()
        self.pq: pq_mod.PQModel | None = None
        self.buffer: ReplayBuffer | None = None
        self.head: head_mod.HeadParams | None = None
        self.sgd: head_mod.SgdState | None = None
        self.slda: slda_mod.SldaModel | None = None
        self.regress: slda_mod.StreamRegressModel | None = None
        self._raw_pool: dict[str, np.ndarray] = {}
        self._decoded_pool: dict[str, np.ndarray] = {}

    @property
    def pooled_dim(self) -> int:
        bh, bw = self.config.head.pool_bins
        return bh * bw * self.dataset.channels

    def _pool_all(self, fmap, image: SyntheticImage) -> np.ndarray:
        ann = image.annotation
        return head_mod.pool_boxes(
            fmap, image.proposals.boxes, ann.image_w, ann.image_h, self.config.head.pool_bins
        )

    def pooled_raw(self, image_id: str) -> np.ndarray:
        cached = self._raw_pool.get(image_id)
        if cached is None:
            image = self.dataset.by_id[image_id]
            cached = self._pool_all(image.features, image)
            self._raw_pool[image_id] = cached
        return cached

    def pooled_decoded(self, image_id: str) -> np.ndarray:
        cached = self._decoded_pool.get(image_id)
        if cached is None:
            entry = self.buffer.entries[image_id]
            fmap = pq_mod.decode(self.pq, entry.codes)
            cached = self._pool_all(fmap, self.dataset.by_id[image_id])
            self._decoded_pool[image_id] = cached
        return cached

    def pooled_gt_boxes(self, image: SyntheticImage, boxes) -> np.ndarray:
        ann = image.annotation
        return head_mod.pool_boxes(
            image.features, boxes, ann.image_w, ann.image_h, self.config.head.pool_bins
        )


def _base_images(dataset: Dataset, classes) -> list[SyntheticImage]:
    visible = set(classes)
    return [im for im in dataset.train if im.annotation.classes & visible]


def _head_sgd_batch(state: ExperimentState, items, minibatch_seed_tag: int) -> float:
    """One SGD step over the concatenated per-image 64-box mini-batches.

    items: sequence of (image_id, annotation, pooled_matrix_getter).
    """
    rows, chosen = [], []
    for item_idx, (image_id, annotation, pooled_getter) in enumerate(items):
        image = state.dataset.by_id[image_id]
        targets = label_proposals(image.proposals, annotation, state.visible)
        idx = sample_minibatch_indices(
            targets, seed=[state.config.seeds.shuffle, minibatch_seed_tag, state.step, item_idx]
        )
        rows.append(pooled_getter(image_id)[idx])
        chosen.extend(targets[int(i)] for i in idx)
    loss, grads = head_mod.loss_and_grads(state.head, np.vstack(rows), chosen)
    head_mod.sgd_step(state.head, state.sgd, grads)
    return loss


def _train_base_head(state: ExperimentState, base_imgs: list[SyntheticImage]) -> None:
    cfg = state.config
    state.head = head_mod.init_head(
        state.pooled_dim,
        cfg.head.hidden,
        cfg.schedule.base_classes,
        seed=cfg.seeds.head,
        pool_bins=cfg.head.pool_bins,
        init_std=cfg.head.init_std,
    )
    state.sgd = head_mod.SgdState.for_params(
        state.head, cfg.head.learning_rate, cfg.head.momentum, cfg.head.weight_decay
    )
    for epoch in range(cfg.base_epochs):
        order = np.random.default_rng([cfg.seeds.shuffle, 100, epoch]).permutation(
            len(base_imgs)
        )
        for lo in range(0, len(order), cfg.base_batch_images):
            batch = [base_imgs[int(i)] for i in order[lo : lo + cfg.base_batch_images]]
            items = [
                (
                    im.image_id,
                    im.annotation.restrict(state.visible),
                    state.pooled_raw,
                )
                for im in batch
            ]
            # base steps share the step counter so mini-batch seeds never repeat
            _head_sgd_batch(state, items, minibatch_seed_tag=101)
            state.step += 1


def _slda_background_class(annotation: ImageAnnotation, fallback: int) -> int:
    classes = annotation.classes
    return min(classes) if classes else fallback


def _slda_process_image(
    state: ExperimentState,
    image: SyntheticImage,
    annotation: ImageAnnotation,
    bg_class: int,
) -> None:
    """One streaming pass over an image's proposals and ground truth.

    While the shared covariance is frozen, background proposals update the
    per-class background mean and every proposal updates the regressor;
    then the covariance unfreezes and the visible ground-truth boxes
    update their class means (covariance included).
    """
    slda, regress = state.slda, state.regress
    targets = label_proposals(image.proposals, annotation, state.visible)
    pooled, ok = slda_mod.normalize_rows(state.pooled_raw(image.image_id))
    slda.freeze_cov()
    for i, target in enumerate(targets):
        if not ok[i]:
            continue
        x = pooled[i]
        if not target.is_foreground:
            slda_mod.slda_fit(slda, x, bg_class, background=True)
        y = regress.target_vector(target.class_id, target.deltas)
        slda_mod.regress_update(regress, x, y)
    slda.unfreeze_cov()
    visible_boxes = annotation.restrict(state.visible).boxes
    if visible_boxes:
        gt_pooled, gt_ok = slda_mod.normalize_rows(
            state.pooled_gt_boxes(image, [lb.box for lb in visible_boxes])
        )
        for j, lb in enumerate(visible_boxes):
            if gt_ok[j]:
                slda_mod.slda_fit(slda, gt_pooled[j], lb.class_id, background=False)


def _register_slda_class(state: ExperimentState, class_id: int) -> None:
    # zero-count mean slot; the first fit overwrites it with the sample
    state.slda.means[(class_id, False)] = np.zeros(state.slda.dim)
    state.slda.counts[(class_id, False)] = 0
    state.slda.class_ids = state.slda.class_ids + (class_id,)
    state.slda._version += 1
    state.regress.add_class(class_id)


def base_initialize(config: ExperimentConfig, dataset: Dataset) -> ExperimentState:
    """Offline training on the base classes, quantizer fit, buffer seeding."""
    state = ExperimentState(config, dataset)
    state.visible = list(config.schedule.base_classes)
    base_imgs = _base_images(dataset, state.visible)
    if not base_imgs:
        raise ValueError("no training images contain any base class")

    if config.learner in (Learner.REPLAY, Learner.FINE_TUNE):
        _train_base_head(state, base_imgs)
    else:
        state.slda = slda_mod.SldaModel(dim=state.pooled_dim)
        state.regress = slda_mod.StreamRegressModel(dim=state.pooled_dim)
        for class_id in config.schedule.base_classes:
            _register_slda_class(state, class_id)
        order = np.random.default_rng([config.seeds.shuffle, 200]).permutation(len(base_imgs))
        for i in order:
            image = base_imgs[int(i)]
            restricted = image.annotation.restrict(state.visible)
            bg_class = _slda_background_class(restricted, config.schedule.base_classes[0])
            _slda_process_image(state, image, restricted, bg_class)

    if config.learner is Learner.REPLAY:
        p, q = base_imgs[0].features.grid_h, base_imgs[0].features.grid_w
        per_image = config.pq.train_locations
        samples = []
        for i, image in enumerate(base_imgs):
            if per_image is None or per_image >= p * q:
                samples.append(
                    image.features.values.reshape(p * q, -1).astype(np.float64)
                )
            else:
                samples.append(
                    pq_mod.subsample_locations(
                        image.features, per_image, seed=[config.seeds.pq, 1, i]
                    )
                )
        state.pq = pq_mod.train_pq(
            np.concatenate(samples),
            config.pq.num_codebooks,
            config.pq.codebook_size,
            seed=config.seeds.pq,
            iters=config.pq.iters,
        )
        state.buffer = ReplayBuffer(
            config.buffer.policy,
            capacity_entries=config.buffer.capacity_entries,
            capacity_bytes=config.buffer.capacity_bytes,
            rng_seed=config.seeds.buffer,
        )
        for image in base_imgs:
            codes = pq_mod.encode(state.pq, image.features)
            evicted = state.buffer.upsert(codes, image.annotation.restrict(state.visible))
            for ev in evicted:
                state._decoded_pool.pop(ev, None)
    return state


def stream_step(
    state: ExperimentState,
    image: SyntheticImage,
    restricted_ann: ImageAnnotation,
    increment_class: int,
) -> StepRecord:
    """Process one streamed image exactly once; see the module docstring."""
    cfg = state.config
    evicted: tuple[str, ...] = ()
    replay_ids: tuple[str, ...] = ()
    truncated = False
    loss = None

    if cfg.learner is Learner.REPLAY:
        codes = pq_mod.encode(state.pq, image.features)
        evicted = tuple(state.buffer.upsert(codes, restricted_ann))
        for ev in evicted:
            state._decoded_pool.pop(ev, None)
        entry = state.buffer.entries[image.image_id]
        items = [(image.image_id, entry.annotation, state.pooled_decoded)]
        if cfg.replay_n > 1:
            result: SampleResult = state.buffer.sample(
                cfg.replay_n - 1,
                seed=[cfg.seeds.buffer, 300, state.step],
                exclude=image.image_id,
            )
            truncated = result.truncated
            replay_ids = tuple(e.image_id for e in result.entries)
            items.extend(
                (e.image_id, e.annotation, state.pooled_decoded) for e in result.entries
            )
        loss = _head_sgd_batch(state, items, minibatch_seed_tag=301)
    elif cfg.learner is Learner.FINE_TUNE:
        items = [(image.image_id, restricted_ann, state.pooled_raw)]
        loss = _head_sgd_batch(state, items, minibatch_seed_tag=301)
    else:
        _slda_process_image(state, image, restricted_ann, bg_class=increment_class)

    record = StepRecord(
        step=state.step,
        increment_class=increment_class,
        image_id=image.image_id,
        visible_classes=tuple(state.visible),
        loss=loss,
        replay_ids=replay_ids,
        truncated_replay=truncated,
        evicted=evicted,
        buffer_entries=len(state.buffer) if state.buffer is not None else 0,
        buffer_bytes=state.buffer.byte_count if state.buffer is not None else 0,
    )
    state.log.steps.append(record)
    state.step += 1
    return record


def run_increment(state: ExperimentState, class_id: int) -> list[StepRecord]:
    """Reveal one class and stream its images in a seeded shuffled order."""
    cfg = state.config
    schedule = cfg.schedule.incremental_classes
    if state.increments_done >= len(schedule) or schedule[state.increments_done] != class_id:
        raise ValueError(
            f"class {class_id} is not next in the schedule "
            f"(expected {schedule[state.increments_done:state.increments_done + 1]})"
        )
    if cfg.learner in (Learner.REPLAY, Learner.FINE_TUNE):
        head_mod.add_class(state.head, state.sgd, class_id, seed=cfg.seeds.head)
    else:
        _register_slda_class(state, class_id)
    state.visible.append(class_id)

    images = [im for im in state.dataset.train if class_id in im.annotation.classes]
    order = np.random.default_rng(
        [cfg.seeds.shuffle, 400, state.increments_done]
    ).permutation(len(images))
    records = []
    for i in order:
        image = images[int(i)]
        records.append(
            stream_step(state, image, image.annotation.restrict({class_id}), class_id)
        )
    state.increments_done += 1
    return records


def _head_detect(state: ExperimentState, image: SyntheticImage) -> list[Detection]:
    ann = image.annotation
    pooled = state.pooled_raw(image.image_id)
    scores, deltas = head_mod.forward(state.head, pooled)
    shifted = scores - scores.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    dets: list[Detection] = []
    for i, proposal in enumerate(image.proposals.boxes):
        for col, class_id in enumerate(state.head.class_ids, start=1):
            score = float(probs[i, col])
            if score < DET_SCORE_MIN:
                continue
            block = deltas[i, 4 * col : 4 * col + 4]
            try:
                box = clip_box(decode_deltas(proposal, block), ann.image_w, ann.image_h)
            except (DeltaOverflowError, EmptyBoxError):
                continue
            dets.append(Detection(box, class_id, min(score, 1.0)))
    return dets


def evaluate_checkpoint(state: ExperimentState, t: int | None = None) -> EvalReport:
    """mAP over the classes revealed so far, on test images that show them."""
    seen = frozenset(state.visible)
    if t is None:
        t = len(state.visible)
    detections, annotations = {}, {}
    for image in state.dataset.test:
        if not (image.annotation.classes & seen):
            continue
        annotations[image.image_id] = image.annotation.restrict(seen)
        if state.head is not None:
            dets = _head_detect(state, image)
        else:
            pooled = state.pooled_raw(image.image_id)
            dets = slda_mod.slda_detect(
                state.slda,
                state.regress,
                image.proposals.boxes,
                pooled,
                image.annotation.image_w,
                image.annotation.image_h,
            )
        detections[image.image_id] = nms(dets)
    report = evaluate_detections(
        detections,
        annotations,
        seen,
        t=t,
        eleven_point=state.config.eleven_point_ap,
    )
    return report


@dataclass
class RunResult:
    config: ExperimentConfig
    log: StreamLog

    @property
    def reports(self) -> list[EvalReport]:
        return self.log.reports

    @property
    def alphas(self) -> list[float]:
        return [r.map for r in self.log.reports]


def _save_checkpoint(state: ExperimentState, out: Path, t: int) -> None:
    if state.head is not None:
        head_mod.save_head(out / f"head_{t:04d}.bin", state.head)
    else:
        slda_mod.save_slda_regress(out / f"models_{t:04d}.bin", state.slda, state.regress)
    if state.buffer is not None:
        save_buffer(out / f"buffer_{t:04d}.bin", state.buffer, pq_mod.model_digest(state.pq))


def run_experiment(
    config: ExperimentConfig, dataset: Dataset, out_dir=None
) -> RunResult:
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        atomic_write_json(out / "config.json", config_to_dict(config))

    state = base_initialize(config, dataset)
    if out is not None and state.pq is not None:
        pq_mod.save_pq(state.pq, out / "pq.bin")

    report = evaluate_checkpoint(state)
    state.log.reports.append(report)
    if out is not None:
        _save_checkpoint(state, out, report.t)

    for class_id in config.schedule.incremental_classes:
        run_increment(state, class_id)
        if state.increments_done % config.schedule.eval_every == 0:
            report = evaluate_checkpoint(state)
            state.log.reports.append(report)
            if out is not None:
                _save_checkpoint(state, out, report.t)

    result = RunResult(config, state.log)
    if out is not None:
        lines = [json.dumps(rec.to_json(), sort_keys=True) for rec in state.log.steps]
        atomic_write_text(out / "stream_log.jsonl", "\n".join(lines) + "\n")
        write_curves(out / "curves.csv", state.log.reports)
        atomic_write_json(
            out / "report.json",
            {
                "learner": config.learner.value,
                "alphas": result.alphas,
                "checkpoints": [r.to_json() for r in state.log.reports],
            },
        )
    return result
