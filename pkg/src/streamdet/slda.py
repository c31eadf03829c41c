"""Streaming Gaussian classifier plus closed-form streaming box regressor.

The classifier keeps one foreground mean per class, one background mean
per class, and a single shared covariance updated online; labels come
from the largest linear-discriminant score. The regressor maintains
running first/second moments of (x, y) and solves a shrunken linear
system at prediction time. Both models learn from one example at a time
and never revisit data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import BoundingBox, Detection, BACKGROUND
from .targets import DeltaOverflowError, decode_deltas
from .core import EmptyBoxError, clip_box

SLDA_SHRINKAGE = 1e-2
REGRESS_SHRINKAGE = 1e-4
NORM_TOL = 1e-6

SLDA_MAGIC = b"RSL1"


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norm = float(np.linalg.norm(x))
    if norm < 1e-12:
        raise ValueError("cannot L2-normalize a (near-)zero vector")
    return x / norm


def normalize_rows(xs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize a matrix; returns (normalized, valid_mask).

    Rows with (near-)zero norm are left untouched and flagged invalid so
    callers can skip them instead of dividing by zero.
    """
    xs = np.asarray(xs, dtype=np.float64)
    norms = np.linalg.norm(xs, axis=1)
    ok = norms >= 1e-12
    out = xs.copy()
    out[ok] /= norms[ok, None]
    return out, ok


def _check_normalized(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a vector, got shape {x.shape}")
    norm = float(np.linalg.norm(x))
    if abs(norm - 1.0) > NORM_TOL:
        raise ValueError(f"input must be L2-normalized, got norm {norm}")
    return x


class ModelEmptyError(RuntimeError):
    pass


@dataclass
class SldaModel:
    """Per-class foreground/background means with one shared covariance."""

    dim: int
    shrinkage: float = SLDA_SHRINKAGE
    means: dict = field(default_factory=dict, repr=False)
    counts: dict = field(default_factory=dict)
    cov: np.ndarray = field(default=None, repr=False)
    cov_count: int = 0
    cov_frozen: bool = False
    class_ids: tuple[int, ...] = ()
    _version: int = 0
    _lambda_cache: Optional[tuple[int, np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        if self.cov is None:
            self.cov = np.zeros((self.dim, self.dim))
        if not 0.0 < self.shrinkage <= 1.0:
            raise ValueError(f"shrinkage must be in (0, 1], got {self.shrinkage}")

    def freeze_cov(self):
        self.cov_frozen = True

    def unfreeze_cov(self):
        self.cov_frozen = False

    def precision(self) -> np.ndarray:
        """Inverse of the shrunken covariance, cached until the model changes."""
        if self._lambda_cache is not None and self._lambda_cache[0] == self._version:
            return self._lambda_cache[1]
        eps = self.shrinkage
        shrunk = (1.0 - eps) * self.cov + eps * np.eye(self.dim)
        lam = np.linalg.inv(shrunk)
        lam = 0.5 * (lam + lam.T)
        self._lambda_cache = (self._version, lam)
        return lam


def slda_fit(
    model: SldaModel,
    x: np.ndarray,
    class_id: int,
    background: bool = False,
    update_cov: bool = True,
) -> None:
    """One streaming update: running mean for the (class, background) slot,
    plus the shared covariance unless frozen or opted out.

    The covariance uses the deviation from the slot's pre-update mean and
    a global update count, so a single-slot stream reproduces the batch
    (biased) covariance exactly.
    """
    if class_id == BACKGROUND:
        raise ValueError("slots are keyed by foreground class; use background=True")
    x = _check_normalized(x)
    if x.shape[0] != model.dim:
        raise ValueError(f"dim {x.shape[0]} != model dim {model.dim}")
    key = (int(class_id), bool(background))
    mean = model.means.get(key)
    if mean is None:
        mean = np.zeros(model.dim)
        model.means[key] = mean
        model.counts[key] = 0
        if not background:
            model.class_ids = model.class_ids + (int(class_id),)
    if update_cov and not model.cov_frozen:
        k = model.cov_count + 1
        dx = x - mean
        model.cov += ((k - 1) / k * np.outer(dx, dx) - model.cov) / k
        model.cov_count = k
    count = model.counts[key]
    mean += (x - mean) / (count + 1)
    model.counts[key] = count + 1
    model._version += 1


def slda_scores(model: SldaModel, xs: np.ndarray) -> tuple[tuple[int, ...], np.ndarray]:
    """Discriminant scores for a batch of normalized rows.

    Column 0 is the background score (max over all per-class background
    means); column j >= 1 scores class_ids[j-1].
    """
    if not model.class_ids:
        raise ModelEmptyError("no foreground class mean has been fitted")
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    lam = model.precision()
    fg = np.stack([model.means[(c, False)] for c in model.class_ids])
    proj = fg @ lam
    fg_scores = xs @ proj.T - 0.5 * np.einsum("cd,cd->c", proj, fg)

    bg_keys = [k for k in model.means if k[1]]
    if bg_keys:
        bg = np.stack([model.means[k] for k in sorted(bg_keys)])
        bproj = bg @ lam
        bg_scores = (xs @ bproj.T - 0.5 * np.einsum("cd,cd->c", bproj, bg)).max(axis=1)
    else:
        bg_scores = np.full(xs.shape[0], -np.inf)
    return model.class_ids, np.column_stack([bg_scores, fg_scores])


def slda_predict(model: SldaModel, x: np.ndarray) -> tuple[int, dict[int, float]]:
    """Label (0 = background) and per-column scores for a single vector."""
    x = _check_normalized(x)
    class_ids, scores = slda_scores(model, x[None, :])
    row = scores[0]
    labels = (BACKGROUND,) + class_ids
    best = int(np.argmax(row))
    return labels[best], {lab: float(v) for lab, v in zip(labels, row)}


@dataclass
class StreamRegressModel:
    """Running moments for closed-form multi-output linear regression.

    Targets are laid out in 4-wide blocks: block 0 is background, block
    j >= 1 holds the box deltas for class_ids[j-1]; an example's y is
    zero outside its own class block.
    """

    dim: int
    class_ids: tuple[int, ...] = ()
    shrinkage: float = REGRESS_SHRINKAGE
    count: int = 0
    mu_x: np.ndarray = field(default=None, repr=False)
    mu_y: np.ndarray = field(default=None, repr=False)
    sigma_x: np.ndarray = field(default=None, repr=False)
    sigma_xy: np.ndarray = field(default=None, repr=False)
    _version: int = 0
    _ab_cache: Optional[tuple[int, np.ndarray, np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        self.class_ids = tuple(int(c) for c in self.class_ids)
        m = self.num_targets
        if self.mu_x is None:
            self.mu_x = np.zeros(self.dim)
        if self.mu_y is None:
            self.mu_y = np.zeros(m)
        if self.sigma_x is None:
            self.sigma_x = np.zeros((self.dim, self.dim))
        if self.sigma_xy is None:
            self.sigma_xy = np.zeros((self.dim, m))

    @property
    def num_targets(self) -> int:
        return 4 * (len(self.class_ids) + 1)

    def column_of(self, class_id: int) -> int:
        if class_id == BACKGROUND:
            return 0
        return 1 + self.class_ids.index(class_id)

    def target_vector(self, class_id: int, deltas=None) -> np.ndarray:
        """Block-one-hot target: zeros everywhere except the class's 4 slots.

        Background examples regress to all zeros.
        """
        y = np.zeros(self.num_targets)
        if class_id != BACKGROUND:
            col = self.column_of(class_id)
            y[4 * col : 4 * col + 4] = np.asarray(deltas, dtype=np.float64)
        return y

    def add_class(self, class_id: int) -> None:
        """Grow y by one 4-wide block of zeros; exactly as if every past y
        had carried the block (their entries there were all zero)."""
        if class_id == BACKGROUND or class_id in self.class_ids:
            raise ValueError(f"class {class_id} cannot be added")
        self.class_ids = self.class_ids + (int(class_id),)
        self.mu_y = np.append(self.mu_y, np.zeros(4))
        self.sigma_xy = np.hstack([self.sigma_xy, np.zeros((self.dim, 4))])
        self._version += 1


def regress_update(model: StreamRegressModel, x: np.ndarray, y: np.ndarray) -> None:
    """One streaming moment update; covariances move before the means."""
    x = _check_normalized(x)
    y = np.asarray(y, dtype=np.float64)
    if x.shape[0] != model.dim or y.shape != (model.num_targets,):
        raise ValueError(
            f"expected x of dim {model.dim} and y of dim {model.num_targets}, "
            f"got {x.shape} and {y.shape}"
        )
    model.count += 1
    n = model.count
    dx = x - model.mu_x
    dy = y - model.mu_y
    model.sigma_x += ((n - 1) / n * np.outer(dx, dx) - model.sigma_x) / n
    model.sigma_xy += ((n - 1) / n * np.outer(dx, dy) - model.sigma_xy) / n
    model.mu_x += dx / n
    model.mu_y += dy / n
    model._version += 1


def _regress_coeffs(model: StreamRegressModel) -> tuple[np.ndarray, np.ndarray]:
    if model._ab_cache is not None and model._ab_cache[0] == model._version:
        return model._ab_cache[1], model._ab_cache[2]
    eps = model.shrinkage
    shrunk = (1.0 - eps) * model.sigma_x + eps * np.eye(model.dim)
    a = np.linalg.solve(shrunk, model.sigma_xy)
    b = model.mu_y - model.mu_x @ a
    model._ab_cache = (model._version, a, b)
    return a, b


def regress_predict(model: StreamRegressModel, x: np.ndarray) -> np.ndarray:
    if model.count < 1:
        raise ModelEmptyError("regressor has seen no data")
    x = np.asarray(x, dtype=np.float64)
    a, b = _regress_coeffs(model)
    return x @ a + b


def slda_detect(
    slda: SldaModel,
    regress: StreamRegressModel,
    boxes: Sequence[BoundingBox],
    pooled: np.ndarray,
    image_w: int,
    image_h: int,
) -> list[Detection]:
    """Classify each proposal, regress its box, and keep non-background hits.

    Scores are the softmax of the discriminant row, so downstream AP sees
    values in [0, 1]. Proposals whose decoded box degenerates are dropped.
    """
    if slda.class_ids != regress.class_ids:
        raise ValueError(
            f"classifier classes {slda.class_ids} != regressor classes {regress.class_ids}"
        )
    if len(boxes) == 0:
        return []
    xs, ok = normalize_rows(np.atleast_2d(pooled))
    class_ids, scores = slda_scores(slda, xs)
    preds = regress_predict(regress, xs)
    finite = np.isfinite(scores)
    shifted = np.where(finite, scores, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)

    out = []
    for i, box in enumerate(boxes):
        if not ok[i]:
            continue
        col = int(np.argmax(scores[i]))
        if col == 0:
            continue
        class_id = class_ids[col - 1]
        block = preds[i, 4 * col : 4 * col + 4]
        try:
            decoded = clip_box(decode_deltas(box, block), image_w, image_h)
        except (DeltaOverflowError, EmptyBoxError):
            continue
        out.append(Detection(decoded, class_id, float(probs[i, col])))
    return out


def save_slda_regress(path, slda: SldaModel, regress: StreamRegressModel) -> None:
    from .fileio import atomic_write_bytes

    mean_keys = sorted(slda.means)
    header = {
        "dim": slda.dim,
        "slda_shrinkage": slda.shrinkage,
        "cov_count": slda.cov_count,
        "cov_frozen": slda.cov_frozen,
        "slda_class_ids": list(slda.class_ids),
        "mean_keys": [[c, int(b)] for c, b in mean_keys],
        "counts": [slda.counts[k] for k in mean_keys],
        "regress_shrinkage": regress.shrinkage,
        "regress_class_ids": list(regress.class_ids),
        "regress_count": regress.count,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [SLDA_MAGIC, struct.pack("<I", len(blob)), blob]
    arrays = [slda.means[k] for k in mean_keys]
    arrays += [slda.cov, regress.mu_x, regress.mu_y, regress.sigma_x, regress.sigma_xy]
    for arr in arrays:
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    atomic_write_bytes(path, b"".join(parts))


def load_slda_regress(path) -> tuple[SldaModel, StreamRegressModel]:
    from .fileio import ParseError

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SLDA_MAGIC:
        raise ParseError(str(path), 0, f"bad magic {raw[:4]!r}")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    try:
        header = json.loads(raw[8 : 8 + hlen])
    except (ValueError, UnicodeDecodeError) as exc:
        raise ParseError(str(path), 8, f"bad header: {exc}") from None
    dim = int(header["dim"])
    offset = 8 + hlen

    def take(shape):
        nonlocal offset
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(raw):
            raise ParseError(str(path), offset, "truncated tensor")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset = end
        return arr

    mean_keys = [(int(c), bool(b)) for c, b in header["mean_keys"]]
    means = {k: take((dim,)) for k in mean_keys}
    slda = SldaModel(
        dim=dim,
        shrinkage=float(header["slda_shrinkage"]),
        means=means,
        counts={k: int(c) for k, c in zip(mean_keys, header["counts"])},
        cov=take((dim, dim)),
        cov_count=int(header["cov_count"]),
        cov_frozen=bool(header["cov_frozen"]),
        class_ids=tuple(int(c) for c in header["slda_class_ids"]),
    )
    class_ids = tuple(int(c) for c in header["regress_class_ids"])
    m = 4 * (len(class_ids) + 1)
    regress = StreamRegressModel(
        dim=dim,
        class_ids=class_ids,
        shrinkage=float(header["regress_shrinkage"]),
        count=int(header["regress_count"]),
        mu_x=take((dim,)),
        mu_y=take((m,)),
        sigma_x=take((dim, dim)),
        sigma_xy=take((dim, m)),
    )
    if offset != len(raw):
        raise ParseError(str(path), offset, f"{len(raw) - offset} trailing bytes")
    return slda, regress
