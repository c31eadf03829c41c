import numpy as np
import pytest

from streamdet import (
    BoundingBox,
    BufferSettings,
    ClassSchedule,
    ExperimentConfig,
    FeatureMap,
    HeadSettings,
    ImageAnnotation,
    LabeledBox,
    Learner,
    PqSettings,
    Seeds,
    SyntheticSpec,
    generate_dataset,
)


def make_fmap(rng, p=4, q=4, d=8, image_id="img"):
    values = rng.standard_normal((p, q, d)).astype(np.float32)
    return FeatureMap(image_id=image_id, values=values)


def make_annotation(image_id="img", boxes=((0.0, 0.0, 10.0, 10.0, 1),), w=64, h=64):
    labeled = tuple(LabeledBox(BoundingBox(x1, y1, x2, y2), c) for x1, y1, x2, y2, c in boxes)
    return ImageAnnotation(image_id=image_id, image_h=h, image_w=w, boxes=labeled)


@pytest.fixture(scope="session")
def tiny_spec():
    return SyntheticSpec(
        num_classes=4,
        images_per_class=6,
        grid=(4, 4),
        channels=16,
        proposals_per_image=30,
        jitters_per_gt=4,
        seed=3,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tiny_spec):
    return generate_dataset(tiny_spec)


@pytest.fixture(scope="session")
def tiny_schedule():
    return ClassSchedule(base_classes=(1, 2), incremental_classes=(3, 4), eval_every=1)


def tiny_config(schedule, learner=Learner.REPLAY, **overrides):
    kwargs = dict(
        schedule=schedule,
        learner=learner,
        replay_n=2,
        buffer=BufferSettings(policy="min", capacity_entries=8)
        if learner is Learner.REPLAY
        else None,
        pq=PqSettings(num_codebooks=4, codebook_size=16, train_locations=10, iters=10),
        head=HeadSettings(hidden=32),
        seeds=Seeds(),
        base_epochs=2,
    )
    kwargs.update(overrides)
    return ExperimentConfig(**kwargs)
