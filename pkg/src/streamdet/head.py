"""Trainable detection head over pooled feature-grid crops.

ROI max-pooling feeds a two-layer ReLU trunk with a per-class linear
classifier (C foreground classes + background) and a per-class box
regressor (4 coordinates per class, background block included). Trained
by plain SGD with momentum and weight decay; classes can be appended
mid-stream without disturbing existing output columns.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import BoundingBox, FeatureMap, BACKGROUND
from .targets import RoiTarget

HEAD_MAGIC = b"RHD1"

_TENSORS = ("w1", "b1", "w2", "b2", "wc", "bc", "wr", "br")


def roi_pool(
    fmap: FeatureMap,
    box: BoundingBox,
    image_w: int,
    image_h: int,
    bins: tuple[int, int],
) -> np.ndarray:
    """Max-pool the grid cells covered by `box` into a bh*bw*d vector.

    The box is mapped from pixel coordinates onto the feature grid
    (rows scale by p/image_h, columns by q/image_w) and cut into bins;
    cell boundaries round outward so no bin is ever empty.
    """
    return pool_boxes(fmap, [box], image_w, image_h, bins)[0]


def pool_boxes(
    fmap: FeatureMap,
    boxes: Sequence[BoundingBox],
    image_w: int,
    image_h: int,
    bins: tuple[int, int],
) -> np.ndarray:
    bh, bw = bins
    if bh < 1 or bw < 1:
        raise ValueError(f"bins must be positive, got {bins}")
    p, q, d = fmap.values.shape
    sy = p / image_h
    sx = q / image_w
    values = fmap.values
    out = np.empty((len(boxes), bh * bw * d), dtype=np.float64)
    for n, box in enumerate(boxes):
        y1, y2 = box.y1 * sy, box.y2 * sy
        x1, x2 = box.x1 * sx, box.x2 * sx
        pooled = np.empty((bh, bw, d), dtype=np.float32)
        for i in range(bh):
            r0, r1 = _cell_span(y1, y2, i, bh, p)
            for j in range(bw):
                c0, c1 = _cell_span(x1, x2, j, bw, q)
                pooled[i, j] = values[r0:r1, c0:c1].max(axis=(0, 1))
        out[n] = pooled.reshape(-1)
    return out


def _cell_span(lo: float, hi: float, i: int, nbins: int, limit: int) -> tuple[int, int]:
    step = (hi - lo) / nbins
    a = int(np.floor(lo + i * step))
    b = int(np.ceil(lo + (i + 1) * step))
    a = min(max(a, 0), limit - 1)
    b = max(min(b, limit), a + 1)
    return a, b


@dataclass
class HeadParams:
    """All trainable tensors plus the class-to-column assignment.

    Column 0 of the classifier (and delta block 0 of the regressor) is
    background; column j >= 1 belongs to class_ids[j-1].
    """

    pool_bins: tuple[int, int]
    class_ids: tuple[int, ...]
    w1: np.ndarray = field(repr=False)
    b1: np.ndarray = field(repr=False)
    w2: np.ndarray = field(repr=False)
    b2: np.ndarray = field(repr=False)
    wc: np.ndarray = field(repr=False)
    bc: np.ndarray = field(repr=False)
    wr: np.ndarray = field(repr=False)
    br: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.pool_bins = (int(self.pool_bins[0]), int(self.pool_bins[1]))
        self.class_ids = tuple(int(c) for c in self.class_ids)
        if len(set(self.class_ids)) != len(self.class_ids) or BACKGROUND in self.class_ids:
            raise ValueError(f"bad class ids {self.class_ids}")
        for name in _TENSORS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        width = len(self.class_ids) + 1
        if self.wc.shape[1] != width or self.wr.shape[1] != 4 * width:
            raise ValueError(
                f"output widths {self.wc.shape[1]}/{self.wr.shape[1]} do not match "
                f"{len(self.class_ids)} classes"
            )

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    def column_of(self, class_id: int) -> int:
        if class_id == BACKGROUND:
            return 0
        try:
            return 1 + self.class_ids.index(class_id)
        except ValueError:
            raise KeyError(f"class {class_id} not in head (knows {self.class_ids})") from None

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _TENSORS}

    def copy(self) -> "HeadParams":
        return HeadParams(
            self.pool_bins,
            self.class_ids,
            **{name: getattr(self, name).copy() for name in _TENSORS},
        )


def init_head(
    in_dim: int,
    hidden: int,
    class_ids: Sequence[int],
    seed: int,
    pool_bins: tuple[int, int] = (2, 2),
    init_std: float = 0.01,
) -> HeadParams:
    """He-scaled trunk, small-normal classifier, zero regressor."""
    rng = np.random.default_rng([seed, 0])
    width = len(class_ids) + 1
    return HeadParams(
        pool_bins=tuple(pool_bins),
        class_ids=tuple(class_ids),
        w1=rng.normal(0.0, np.sqrt(2.0 / in_dim), (in_dim, hidden)),
        b1=np.zeros(hidden),
        w2=rng.normal(0.0, np.sqrt(2.0 / hidden), (hidden, hidden)),
        b2=np.zeros(hidden),
        wc=rng.normal(0.0, init_std, (hidden, width)),
        bc=np.zeros(width),
        wr=np.zeros((hidden, 4 * width)),
        br=np.zeros(4 * width),
    )


@dataclass
class SgdState:
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @classmethod
    def for_params(cls, params: HeadParams, learning_rate=0.001, momentum=0.9, weight_decay=5e-4):
        return cls(
            learning_rate,
            momentum,
            weight_decay,
            {name: np.zeros_like(t) for name, t in params.tensors().items()},
        )


def _trunk(params: HeadParams, pooled: np.ndarray):
    z1 = pooled @ params.w1 + params.b1
    h1 = np.maximum(z1, 0.0)
    z2 = h1 @ params.w2 + params.b2
    h2 = np.maximum(z2, 0.0)
    return z1, h1, z2, h2


def forward(params: HeadParams, pooled: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batch forward: (n, in_dim) -> class scores (n, C+1), deltas (n, 4(C+1))."""
    pooled = np.atleast_2d(np.asarray(pooled, dtype=np.float64))
    if pooled.shape[1] != params.in_dim:
        raise ValueError(f"pooled dim {pooled.shape[1]} != head input {params.in_dim}")
    _, _, _, h2 = _trunk(params, pooled)
    return h2 @ params.wc + params.bc, h2 @ params.wr + params.br


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _smooth_l1(t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    absd = np.abs(t)
    quad = absd < 1.0
    val = np.where(quad, 0.5 * t * t, absd - 0.5)
    grad = np.where(quad, t, np.sign(t))
    return val, grad


def loss_and_grads(
    params: HeadParams,
    pooled: np.ndarray,
    batch: Sequence[RoiTarget],
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy plus mean foreground smooth-L1, with exact grads.

    Each foreground row contributes smooth-L1 summed over the 4 delta
    coordinates of its own class block; background rows contribute
    classification loss only.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    pooled = np.atleast_2d(np.asarray(pooled, dtype=np.float64))
    if pooled.shape[0] != len(batch):
        raise ValueError(f"{pooled.shape[0]} pooled rows for {len(batch)} targets")
    n = len(batch)
    cols = np.array([params.column_of(t.class_id) for t in batch], dtype=np.int64)

    z1, h1, z2, h2 = _trunk(params, pooled)
    scores = h2 @ params.wc + params.bc
    deltas = h2 @ params.wr + params.br

    probs = _softmax(scores)
    ce = float(-np.mean(np.log(probs[np.arange(n), cols] + 1e-300)))
    dscores = probs.copy()
    dscores[np.arange(n), cols] -= 1.0
    dscores /= n

    ddeltas = np.zeros_like(deltas)
    reg = 0.0
    fg_rows = [i for i, t in enumerate(batch) if t.is_foreground]
    if fg_rows:
        n_fg = len(fg_rows)
        for i in fg_rows:
            blk = slice(4 * cols[i], 4 * cols[i] + 4)
            diff = deltas[i, blk] - np.array(batch[i].deltas)
            val, grad = _smooth_l1(diff)
            reg += float(val.sum())
            ddeltas[i, blk] = grad / n_fg
        reg /= n_fg

    dh2 = dscores @ params.wc.T + ddeltas @ params.wr.T
    dz2 = dh2 * (z2 > 0)
    dh1 = dz2 @ params.w2.T
    dz1 = dh1 * (z1 > 0)
    grads = {
        "w1": pooled.T @ dz1,
        "b1": dz1.sum(axis=0),
        "w2": h1.T @ dz2,
        "b2": dz2.sum(axis=0),
        "wc": h2.T @ dscores,
        "bc": dscores.sum(axis=0),
        "wr": h2.T @ ddeltas,
        "br": ddeltas.sum(axis=0),
    }
    return ce + reg, grads


def sgd_step(params: HeadParams, state: SgdState, grads: dict[str, np.ndarray]) -> HeadParams:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v. In place."""
    for name in _TENSORS:
        if not np.all(np.isfinite(grads[name])):
            raise FloatingPointError(f"non-finite gradient for {name}; update rejected")
    for name in _TENSORS:
        p = getattr(params, name)
        v = state.velocity[name]
        v *= state.momentum
        v += grads[name] + state.weight_decay * p
        p -= state.learning_rate * v
    return params


def add_class(params: HeadParams, state: SgdState, class_id: int, seed: int) -> HeadParams:
    """Grow outputs by one class; existing columns and velocities stay bit-identical.

    New classifier weights come from N(0, 0.01^2) seeded by (seed, new
    class count); the new regressor block and all new velocities start
    at zero.
    """
    if class_id in params.class_ids or class_id == BACKGROUND:
        raise ValueError(f"class {class_id} cannot be added")
    rng = np.random.default_rng([seed, len(params.class_ids) + 1])
    hidden = params.wc.shape[0]
    params.class_ids = params.class_ids + (int(class_id),)
    params.wc = np.hstack([params.wc, rng.normal(0.0, 0.01, (hidden, 1))])
    params.bc = np.append(params.bc, 0.0)
    params.wr = np.hstack([params.wr, np.zeros((hidden, 4))])
    params.br = np.append(params.br, np.zeros(4))
    for name, grow in (("wc", 1), ("bc", 1), ("wr", 4), ("br", 4)):
        v = state.velocity[name]
        if v.ndim == 2:
            state.velocity[name] = np.hstack([v, np.zeros((v.shape[0], grow))])
        else:
            state.velocity[name] = np.append(v, np.zeros(grow))
    return params


def save_head(path, params: HeadParams) -> None:
    from .fileio import atomic_write_bytes

    header = {
        "pool_bins": list(params.pool_bins),
        "class_ids": list(params.class_ids),
        "tensors": {name: list(getattr(params, name).shape) for name in _TENSORS},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [HEAD_MAGIC, struct.pack("<I", len(blob)), blob]
    for name in _TENSORS:
        parts.append(np.ascontiguousarray(getattr(params, name), dtype="<f4").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_head(path) -> HeadParams:
    from .fileio import ParseError

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != HEAD_MAGIC:
        raise ParseError(str(path), 0, f"bad magic {raw[:4]!r}")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8 : 8 + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise ParseError(str(path), 8, f"bad header: {exc}") from None
    offset = 8 + hlen
    tensors = {}
    for name in _TENSORS:
        shape = tuple(header["tensors"][name])
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(raw):
            raise ParseError(str(path), offset, f"truncated tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset = end
    if offset != len(raw):
        raise ParseError(str(path), offset, f"{len(raw) - offset} trailing bytes")
    return HeadParams(
        tuple(header["pool_bins"]), tuple(header["class_ids"]), **tensors
    )
