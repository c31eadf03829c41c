"""Fixed-capacity replay store for quantized feature maps.

Entries are keyed by image id. Re-inserting a known image appends its new
boxes to the stored annotation and leaves the stored codes alone; inserting
a fresh image may push the buffer over capacity, in which case a victim is
chosen by the configured replacement policy (never the entry that just
arrived). Capacity counts entries or code bytes, one mode at a time.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import ImageAnnotation
from .pq import QuantizedFeatureMap


class Policy(enum.Enum):
    MIN = "min"
    MAX = "max"
    BAL = "bal"
    RANDOM = "random"
    NO_REPLACE = "no_replace"


class BufferConfigError(ValueError):
    pass


BUFFER_MAGIC = b"RBF1"


@dataclass(frozen=True)
class BufferEntry:
    image_id: str
    codes: QuantizedFeatureMap
    annotation: ImageAnnotation
    insert_seq: int

    def __post_init__(self):
        if self.codes.image_id != self.image_id or self.annotation.image_id != self.image_id:
            raise ValueError(
                f"id mismatch: entry {self.image_id!r}, codes {self.codes.image_id!r}, "
                f"annotation {self.annotation.image_id!r}"
            )
        if not self.annotation.boxes:
            raise ValueError(f"entry {self.image_id!r} has no labeled boxes")

    @property
    def nbytes(self) -> int:
        return self.codes.nbytes

    @property
    def unique_labels(self) -> frozenset[int]:
        return self.annotation.classes


@dataclass(frozen=True)
class BufferStats:
    entry_count: int
    byte_count: int
    class_counts: dict[int, int]


@dataclass(frozen=True)
class SampleResult:
    entries: tuple[BufferEntry, ...]
    truncated: bool


class ReplayBuffer:
    def __init__(
        self,
        policy: Policy,
        capacity_entries: int | None = None,
        capacity_bytes: int | None = None,
        rng_seed: int = 0,
    ):
        if policy is Policy.NO_REPLACE:
            if capacity_entries is not None or capacity_bytes is not None:
                raise BufferConfigError("NO_REPLACE grows without bound; drop the capacity")
        else:
            if (capacity_entries is None) == (capacity_bytes is None):
                raise BufferConfigError(
                    "exactly one of capacity_entries / capacity_bytes must be set"
                )
            cap = capacity_entries if capacity_entries is not None else capacity_bytes
            if cap < 1:
                raise BufferConfigError(f"capacity must be positive, got {cap}")
        self.policy = policy
        self.capacity_entries = capacity_entries
        self.capacity_bytes = capacity_bytes
        self.rng_seed = int(rng_seed)
        self.entries: dict[str, BufferEntry] = {}
        self.class_counts: dict[int, int] = {}
        self.byte_count = 0
        self.next_seq = 0
        self.eviction_count = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.entries

    def ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.entries))

    def stats(self) -> BufferStats:
        return BufferStats(len(self.entries), self.byte_count, dict(self.class_counts))

    def _count_add(self, classes):
        for c in classes:
            self.class_counts[c] = self.class_counts.get(c, 0) + 1

    def _count_remove(self, classes):
        for c in classes:
            self.class_counts[c] -= 1
            if self.class_counts[c] == 0:
                del self.class_counts[c]

    def _over_capacity(self) -> bool:
        if self.policy is Policy.NO_REPLACE:
            return False
        if self.capacity_entries is not None:
            return len(self.entries) > self.capacity_entries
        return self.byte_count > self.capacity_bytes

    def _evict(self, image_id: str) -> BufferEntry:
        entry = self.entries.pop(image_id)
        self._count_remove(entry.unique_labels)
        self.byte_count -= entry.nbytes
        self.eviction_count += 1
        return entry

    def upsert(self, codes: QuantizedFeatureMap, annotation: ImageAnnotation) -> list[str]:
        """Insert or merge one image; returns ids evicted to make room."""
        if codes.image_id != annotation.image_id:
            raise ValueError(
                f"codes are for {codes.image_id!r} but annotation is {annotation.image_id!r}"
            )
        if not annotation.boxes:
            raise ValueError("refusing to store an annotation with no boxes")
        image_id = codes.image_id

        existing = self.entries.get(image_id)
        if existing is not None:
            merged = existing.annotation.merge(annotation.boxes)
            self._count_remove(existing.unique_labels)
            entry = BufferEntry(image_id, existing.codes, merged, existing.insert_seq)
            self.entries[image_id] = entry
            self._count_add(entry.unique_labels)
            return []

        entry = BufferEntry(image_id, codes, annotation, self.next_seq)
        self.next_seq += 1
        self.entries[image_id] = entry
        self._count_add(entry.unique_labels)
        self.byte_count += entry.nbytes

        evicted = []
        while self._over_capacity():
            if len(self.entries) == 1:
                raise BufferConfigError(
                    f"entry {image_id!r} ({entry.nbytes} bytes) exceeds the byte "
                    f"capacity {self.capacity_bytes} on its own"
                )
            victim = self.select_victim(exclude=image_id)
            self._evict(victim)
            evicted.append(victim)
        return evicted

    def select_victim(self, policy: Policy | None = None, exclude: str | None = None) -> str:
        """Pick the entry the policy would evict; ties go to the oldest entry."""
        policy = policy or self.policy
        if policy is Policy.NO_REPLACE:
            raise BufferConfigError("NO_REPLACE never selects a victim")
        candidates = [e for e in self.entries.values() if e.image_id != exclude]
        if not candidates:
            raise BufferConfigError("no evictable entries")

        if policy is Policy.RANDOM:
            rng = np.random.default_rng([self.rng_seed, self.eviction_count])
            ordered = sorted(candidates, key=lambda e: e.image_id)
            return ordered[int(rng.integers(len(ordered)))].image_id

        if policy is Policy.MIN:
            key = lambda e: (len(e.unique_labels), e.insert_seq)
        elif policy is Policy.MAX:
            key = lambda e: (-len(e.unique_labels), e.insert_seq)
        elif policy is Policy.BAL:
            key = lambda e: (self._imbalance_after_removal(e), e.insert_seq)
        else:
            raise BufferConfigError(f"unknown policy {policy}")
        return min(candidates, key=key).image_id

    def _imbalance_after_removal(self, entry: BufferEntry) -> float:
        """Variance of the per-class entry counts that would remain.

        Classes whose count drops to zero leave the population, so the
        variance is over classes still present after the removal.
        """
        remaining = []
        for c, count in self.class_counts.items():
            left = count - (1 if c in entry.unique_labels else 0)
            if left > 0:
                remaining.append(left)
        if not remaining:
            return 0.0
        # sorted so the float value never depends on dict insertion history
        remaining.sort()
        return float(np.var(remaining))

    def sample(self, n: int, seed, exclude: str | None = None) -> SampleResult:
        """n distinct entries, uniform without replacement, seed-reproducible.

        `exclude` removes one id from the pool (the image currently being
        trained on). Asking for more than the pool holds returns everything
        with the truncated flag set (the early-stream case).
        """
        if n < 1:
            raise ValueError(f"sample size must be >= 1, got {n}")
        ordered = [self.entries[i] for i in sorted(self.entries) if i != exclude]
        if n >= len(ordered):
            return SampleResult(tuple(ordered), truncated=n > len(ordered))
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(ordered), size=n, replace=False)
        return SampleResult(tuple(ordered[int(i)] for i in picks), truncated=False)


def save_buffer(path, buf: ReplayBuffer, pq_digest: str) -> None:
    from .fileio import atomic_write_bytes

    ordered = [buf.entries[i] for i in sorted(buf.entries)]
    header = {
        "policy": buf.policy.value,
        "capacity_entries": buf.capacity_entries,
        "capacity_bytes": buf.capacity_bytes,
        "rng_seed": buf.rng_seed,
        "next_seq": buf.next_seq,
        "eviction_count": buf.eviction_count,
        "pq_digest": pq_digest,
        "entries": [
            {
                "image_id": e.image_id,
                "grid": [e.codes.grid_h, e.codes.grid_w, e.codes.num_codebooks],
                "insert_seq": e.insert_seq,
                "annotation": {
                    "image_id": e.annotation.image_id,
                    "image_h": e.annotation.image_h,
                    "image_w": e.annotation.image_w,
                    "boxes": [
                        {"box": list(lb.box.as_tuple()), "class_id": lb.class_id}
                        for lb in e.annotation.boxes
                    ],
                },
            }
            for e in ordered
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [BUFFER_MAGIC, struct.pack("<I", len(blob)), blob]
    for e in ordered:
        parts.append(np.ascontiguousarray(e.codes.codes, dtype=np.uint8).tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_buffer(path, expected_pq_digest: str | None = None) -> tuple[ReplayBuffer, str]:
    from .core import BoundingBox, LabeledBox
    from .fileio import ParseError

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != BUFFER_MAGIC:
        raise ParseError(str(path), 0, f"bad magic {raw[:4]!r}")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8 : 8 + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise ParseError(str(path), 8, f"bad header: {exc}") from None
    digest = header["pq_digest"]
    if expected_pq_digest is not None and digest != expected_pq_digest:
        raise ParseError(
            str(path), 8, f"codes were made by model {digest[:12]}, expected "
            f"{expected_pq_digest[:12]}"
        )
    buf = ReplayBuffer(
        Policy(header["policy"]),
        capacity_entries=header["capacity_entries"],
        capacity_bytes=header["capacity_bytes"],
        rng_seed=header["rng_seed"],
    )
    offset = 8 + hlen
    for meta in header["entries"]:
        p, q, s = meta["grid"]
        count = p * q * s
        end = offset + count
        if end > len(raw):
            raise ParseError(str(path), offset, f"truncated codes for {meta['image_id']!r}")
        codes = np.frombuffer(raw, dtype=np.uint8, count=count, offset=offset).reshape(p, q, s)
        offset = end
        ann_obj = meta["annotation"]
        boxes = tuple(
            LabeledBox(BoundingBox(*b["box"]), b["class_id"]) for b in ann_obj["boxes"]
        )
        annotation = ImageAnnotation(
            ann_obj["image_id"], ann_obj["image_h"], ann_obj["image_w"], boxes
        )
        entry = BufferEntry(
            meta["image_id"],
            QuantizedFeatureMap(meta["image_id"], codes.copy()),
            annotation,
            meta["insert_seq"],
        )
        buf.entries[entry.image_id] = entry
        buf._count_add(entry.unique_labels)
        buf.byte_count += entry.nbytes
    if offset != len(raw):
        raise ParseError(str(path), offset, f"{len(raw) - offset} trailing bytes")
    buf.next_seq = header["next_seq"]
    buf.eviction_count = header["eviction_count"]
    return buf, digest
