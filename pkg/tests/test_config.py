import json

import pytest

from streamdet import (
    BufferSettings,
    ClassSchedule,
    ConfigError,
    ExperimentConfig,
    Learner,
    Policy,
    config_from_dict,
    config_to_dict,
    load_config,
)


BASE_DOC = {
    "schedule": {"base_classes": [1, 2], "incremental_classes": [3, 4], "eval_every": 1},
    "learner": "replay",
    "replay_n": 3,
    "buffer": {"policy": "min", "capacity_entries": 16},
}


def test_minimal_config_roundtrip():
    cfg = config_from_dict(json.loads(json.dumps(BASE_DOC)))
    assert cfg.learner is Learner.REPLAY
    assert cfg.replay_n == 3
    assert cfg.buffer.policy is Policy.MIN
    assert cfg.schedule.base_classes == (1, 2)
    doc = config_to_dict(cfg)
    again = config_from_dict(doc)
    assert config_to_dict(again) == doc


def test_unknown_keys_rejected_at_every_level():
    for mutate in (
        lambda d: d.update(bogus=1),
        lambda d: d["schedule"].update(bogus=1),
        lambda d: d["buffer"].update(bogus=1),
        lambda d: d.update(pq={"bogus": 1}),
        lambda d: d.update(head={"bogus": 1}),
        lambda d: d.update(seeds={"bogus": 1}),
    ):
        doc = json.loads(json.dumps(BASE_DOC))
        mutate(doc)
        with pytest.raises(ConfigError):
            config_from_dict(doc)


def test_replay_requires_buffer():
    doc = json.loads(json.dumps(BASE_DOC))
    del doc["buffer"]
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_fine_tune_needs_no_buffer():
    doc = json.loads(json.dumps(BASE_DOC))
    doc["learner"] = "fine_tune"
    del doc["buffer"]
    cfg = config_from_dict(doc)
    assert cfg.learner is Learner.FINE_TUNE
    assert cfg.buffer is None


def test_unknown_learner_and_policy():
    doc = json.loads(json.dumps(BASE_DOC))
    doc["learner"] = "magic"
    with pytest.raises(ConfigError):
        config_from_dict(doc)

    doc = json.loads(json.dumps(BASE_DOC))
    doc["buffer"]["policy"] = "fifo"
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_buffer_settings_capacity_rule():
    with pytest.raises(ConfigError):
        BufferSettings(policy="min")
    with pytest.raises(ConfigError):
        BufferSettings(policy="min", capacity_entries=4, capacity_bytes=9)
    BufferSettings(policy="no_replace")
    with pytest.raises(ConfigError):
        BufferSettings(policy="no_replace", capacity_entries=4)


def test_replay_n_validation():
    doc = json.loads(json.dumps(BASE_DOC))
    doc["replay_n"] = 0
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_experiment_config_direct_construction():
    sched = ClassSchedule(base_classes=(1,), incremental_classes=(2,), eval_every=1)
    with pytest.raises(ConfigError):
        ExperimentConfig(schedule=sched, learner=Learner.REPLAY, buffer=None)
    cfg = ExperimentConfig(schedule=sched, learner=Learner.SLDA_REGRESS)
    assert cfg.buffer is None


def test_data_spec_embedding():
    doc = json.loads(json.dumps(BASE_DOC))
    doc["data"] = {"num_classes": 4, "images_per_class": 4, "grid": [3, 3], "channels": 8}
    cfg = config_from_dict(doc)
    assert cfg.data.num_classes == 4
    assert cfg.data.grid == (3, 3)
    roundtrip = config_from_dict(config_to_dict(cfg))
    assert roundtrip.data == cfg.data


def test_load_config_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(BASE_DOC))
    cfg = load_config(path)
    assert cfg.replay_n == 3

    path.write_text("not json{")
    with pytest.raises(ConfigError):
        load_config(path)
