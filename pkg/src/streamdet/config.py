"""Experiment configuration: dataclasses plus a strict JSON codec.

Unknown keys anywhere in a config document are hard errors so that a
typo never silently falls back to a default.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .buffer import Policy
from .core import ClassSchedule
from .datagen import SyntheticSpec


class Learner(enum.Enum):
    REPLAY = "replay"
    FINE_TUNE = "fine_tune"
    SLDA_REGRESS = "slda_regress"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Seeds:
    shuffle: int = 11
    pq: int = 23
    buffer: int = 37
    head: int = 53
    data: int = 71


@dataclass(frozen=True)
class PqSettings:
    num_codebooks: int = 8
    codebook_size: int = 256
    train_locations: int | None = 30  # None pools every grid cell into training
    iters: int = 25

    def __post_init__(self):
        if self.num_codebooks < 1:
            raise ConfigError(f"num_codebooks must be >= 1, got {self.num_codebooks}")
        if not 1 <= self.codebook_size <= 256:
            raise ConfigError(f"codebook_size must be in [1,256], got {self.codebook_size}")
        if self.train_locations is not None and self.train_locations < 1:
            raise ConfigError("train_locations must be >= 1 or null")
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")


@dataclass(frozen=True)
class BufferSettings:
    policy: Policy = Policy.MIN
    capacity_entries: int | None = None
    capacity_bytes: int | None = None

    def __post_init__(self):
        if isinstance(self.policy, str):
            object.__setattr__(self, "policy", Policy(self.policy))
        if self.policy is not Policy.NO_REPLACE:
            if (self.capacity_entries is None) == (self.capacity_bytes is None):
                raise ConfigError(
                    "exactly one of capacity_entries / capacity_bytes must be set "
                    "(NO_REPLACE takes neither)"
                )
        elif self.capacity_entries is not None or self.capacity_bytes is not None:
            raise ConfigError("NO_REPLACE ignores capacity; remove it")


@dataclass(frozen=True)
class HeadSettings:
    hidden: int = 128
    pool_bins: tuple[int, int] = (2, 2)
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    init_std: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "pool_bins", (int(self.pool_bins[0]), int(self.pool_bins[1])))
        if self.hidden < 1 or min(self.pool_bins) < 1:
            raise ConfigError(f"bad head sizes: hidden={self.hidden}, bins={self.pool_bins}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    schedule: ClassSchedule
    learner: Learner = Learner.REPLAY
    replay_n: int = 4
    buffer: BufferSettings | None = None
    pq: PqSettings = field(default_factory=PqSettings)
    head: HeadSettings = field(default_factory=HeadSettings)
    seeds: Seeds = field(default_factory=Seeds)
    base_epochs: int = 25
    base_batch_images: int = 2
    eleven_point_ap: bool = False
    data: SyntheticSpec | None = None

    def __post_init__(self):
        if isinstance(self.learner, str):
            object.__setattr__(self, "learner", Learner(self.learner))
        if self.replay_n < 1:
            raise ConfigError(f"replay_n must be >= 1, got {self.replay_n}")
        if self.base_epochs < 0 or self.base_batch_images < 1:
            raise ConfigError("bad base-training settings")
        if self.learner is Learner.REPLAY and self.buffer is None:
            raise ConfigError("replay learner needs buffer settings")


_SCHEDULE_KEYS = {"base_classes", "incremental_classes", "eval_every"}


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    extra = obj.keys() - allowed
    if extra:
        raise ConfigError(f"unknown keys {sorted(extra)} in {where}")


def _dataclass_from(cls, obj: dict, where: str):
    names = {f.name for f in fields(cls)}
    _check_keys(obj, names, where)
    converted = dict(obj)
    for f in fields(cls):
        if f.name in converted and isinstance(converted[f.name], list):
            converted[f.name] = tuple(converted[f.name])
    try:
        return cls(**converted)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(obj: dict) -> ExperimentConfig:
    if not isinstance(obj, dict):
        raise ConfigError(f"config must be a JSON object, got {type(obj).__name__}")
    allowed = {f.name for f in fields(ExperimentConfig)}
    _check_keys(obj, allowed, "config")
    if "schedule" not in obj:
        raise ConfigError("config needs a schedule")
    sched = obj["schedule"]
    if not isinstance(sched, dict):
        raise ConfigError("schedule must be an object")
    _check_keys(sched, _SCHEDULE_KEYS, "schedule")
    try:
        schedule = ClassSchedule(
            tuple(sched.get("base_classes", ())),
            tuple(sched.get("incremental_classes", ())),
            sched.get("eval_every", 1),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"schedule: {exc}") from None

    kwargs = {"schedule": schedule}
    if "learner" in obj:
        try:
            kwargs["learner"] = Learner(obj["learner"])
        except ValueError:
            raise ConfigError(
                f"unknown learner {obj['learner']!r}; choose from "
                f"{[l.value for l in Learner]}"
            ) from None
    for key in ("replay_n", "base_epochs", "base_batch_images", "eleven_point_ap"):
        if key in obj:
            kwargs[key] = obj[key]
    if obj.get("buffer") is not None:
        kwargs["buffer"] = _dataclass_from(BufferSettings, obj["buffer"], "buffer")
    if "pq" in obj:
        kwargs["pq"] = _dataclass_from(PqSettings, obj["pq"], "pq")
    if "head" in obj:
        kwargs["head"] = _dataclass_from(HeadSettings, obj["head"], "head")
    if "seeds" in obj:
        kwargs["seeds"] = _dataclass_from(Seeds, obj["seeds"], "seeds")
    if obj.get("data") is not None:
        kwargs["data"] = _dataclass_from(SyntheticSpec, obj["data"], "data")
    try:
        return ExperimentConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def config_to_dict(config: ExperimentConfig) -> dict:
    out = {
        "schedule": {
            "base_classes": list(config.schedule.base_classes),
            "incremental_classes": list(config.schedule.incremental_classes),
            "eval_every": config.schedule.eval_every,
        },
        "learner": config.learner.value,
        "replay_n": config.replay_n,
        "buffer": None,
        "pq": asdict(config.pq),
        "head": {**asdict(config.head), "pool_bins": list(config.head.pool_bins)},
        "seeds": asdict(config.seeds),
        "base_epochs": config.base_epochs,
        "base_batch_images": config.base_batch_images,
        "eleven_point_ap": config.eleven_point_ap,
        "data": None,
    }
    if config.buffer is not None:
        out["buffer"] = {
            "policy": config.buffer.policy.value,
            "capacity_entries": config.buffer.capacity_entries,
            "capacity_bytes": config.buffer.capacity_bytes,
        }
    if config.data is not None:
        spec = asdict(config.data)
        spec["grid"] = list(config.data.grid)
        spec["boxes_per_image"] = list(config.data.boxes_per_image)
        out["data"] = spec
    return out


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at position {exc.pos}: {exc.msg}") from None
    return config_from_dict(obj)
