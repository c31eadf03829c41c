"""Product quantization of feature maps into per-cell byte codes.

A model holds `s` codebooks, one per contiguous channel slice of width
d/s. Codes are nearest-centroid indices under squared Euclidean distance,
so a p x q x d float map compresses to p x q x s bytes.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import FeatureMap

MAGIC = b"RPQ1"
DEFAULT_ITERS = 25

# (points, centroids) distance blocks are evaluated in chunks this tall to
# bound peak memory; the value does not affect results.
_CHUNK = 1024


class PqConfigError(ValueError):
    pass


class PqCodeError(ValueError):
    """Codes out of range for the model, or shape mismatch."""


@dataclass(frozen=True)
class PQModel:
    """Immutable trained quantizer: codebooks[s][codebook_size][subvector_dim]."""

    codebooks: np.ndarray = field(repr=False)

    def __post_init__(self):
        cb = np.asarray(self.codebooks, dtype=np.float32)
        if cb.ndim != 3:
            raise PqConfigError(f"codebooks must be 3-d (s, k, sub_dim), got {cb.shape}")
        s, k, sub = cb.shape
        if s < 1 or sub < 1 or not 1 <= k <= 256:
            raise PqConfigError(f"bad codebook shape {cb.shape}: need s,sub >= 1 and 1 <= k <= 256")
        if not np.all(np.isfinite(cb)):
            raise PqConfigError("codebooks contain NaN/Inf")
        cb.flags.writeable = False
        object.__setattr__(self, "codebooks", cb)

    @property
    def num_codebooks(self) -> int:
        return self.codebooks.shape[0]

    @property
    def codebook_size(self) -> int:
        return self.codebooks.shape[1]

    @property
    def subvector_dim(self) -> int:
        return self.codebooks.shape[2]

    @property
    def dim(self) -> int:
        return self.num_codebooks * self.subvector_dim


@dataclass(frozen=True)
class QuantizedFeatureMap:
    """Byte codes for one image; grid_h x grid_w x s, one byte per code."""

    image_id: str
    codes: np.ndarray = field(repr=False)

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.uint8)
        if codes.ndim != 3 or min(codes.shape) < 1:
            raise PqCodeError(f"codes must be (p, q, s) with all dims >= 1, got {codes.shape}")
        codes.flags.writeable = False
        object.__setattr__(self, "codes", codes)

    @property
    def grid_h(self) -> int:
        return self.codes.shape[0]

    @property
    def grid_w(self) -> int:
        return self.codes.shape[1]

    @property
    def num_codebooks(self) -> int:
        return self.codes.shape[2]

    @property
    def nbytes(self) -> int:
        return self.codes.size


def _pairwise_sq_dist(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact (n, k) squared distances, chunked. Exactness keeps tie-breaking
    (lowest index wins) independent of algebraic rearrangement."""
    n = points.shape[0]
    out = np.empty((n, centroids.shape[0]), dtype=np.float64)
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        diff = points[lo:hi, None, :] - centroids[None, :, :]
        out[lo:hi] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator, iters: int) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding.

    Empty clusters are repaired by stealing the point currently farthest
    from its assigned centroid, so all k centroids stay live.
    """
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = points[first]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = float(d2.sum())
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centroids[j] = points[idx]
        np.minimum(d2, np.sum((points - centroids[j]) ** 2, axis=1), out=d2)

    for _ in range(iters):
        dists = _pairwise_sq_dist(points, centroids)
        assign = np.argmin(dists, axis=1)
        own_d2 = dists[np.arange(n), assign]
        counts = np.bincount(assign, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # steal only from clusters that keep at least one point, so a
            # chain of repairs can never orphan an earlier donor
            stealable = np.where(counts[assign] > 1, own_d2, -np.inf)
            far = int(np.argmax(stealable))
            counts[assign[far]] -= 1
            assign[far] = j
            counts[j] += 1
            own_d2[far] = 0.0
        new_centroids = np.zeros_like(centroids)
        np.add.at(new_centroids, assign, points)
        new_centroids /= counts[:, None]
        if np.array_equal(new_centroids, centroids):
            break
        centroids = new_centroids
    return centroids


def train_pq(
    samples: np.ndarray,
    num_codebooks: int,
    codebook_size: int,
    seed: int,
    iters: int = DEFAULT_ITERS,
) -> PQModel:
    """Fit one k-means codebook per contiguous channel slice.

    Deterministic given the arguments: each subspace trains with its own
    generator spawned from `seed` so subspaces cannot interact.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 1:
        raise PqConfigError(f"samples must be a non-empty (n, d) array, got {samples.shape}")
    n, d = samples.shape
    if num_codebooks < 1 or d % num_codebooks != 0:
        raise PqConfigError(f"num_codebooks {num_codebooks} must divide feature dim {d}")
    if not 1 <= codebook_size <= 256:
        raise PqConfigError(f"codebook_size must be in [1, 256], got {codebook_size}")
    if n < codebook_size:
        raise PqConfigError(f"need at least codebook_size={codebook_size} samples, got {n}")
    if iters < 1:
        raise PqConfigError(f"iters must be >= 1, got {iters}")

    sub = d // num_codebooks
    seeds = np.random.SeedSequence(seed).spawn(num_codebooks)
    codebooks = np.empty((num_codebooks, codebook_size, sub), dtype=np.float32)
    for i in range(num_codebooks):
        rng = np.random.default_rng(seeds[i])
        part = samples[:, i * sub : (i + 1) * sub]
        codebooks[i] = _kmeans(part, codebook_size, rng, iters).astype(np.float32)
    return PQModel(codebooks)


def subsample_locations(fmap: FeatureMap, k: int, seed: int) -> np.ndarray:
    """k distinct spatial cells drawn uniformly without replacement, as (k, d)."""
    total = fmap.grid_h * fmap.grid_w
    if not 1 <= k <= total:
        raise ValueError(f"k must be in [1, {total}], got {k}")
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=k, replace=False)
    flat = fmap.values.reshape(total, fmap.channels)
    return flat[picks].astype(np.float64)


def encode(model: PQModel, fmap: FeatureMap) -> QuantizedFeatureMap:
    """Nearest-centroid code per cell per subspace. Ties pick the lowest index."""
    if fmap.channels != model.dim:
        raise PqCodeError(
            f"feature dim {fmap.channels} != model dim {model.dim} "
            f"({model.num_codebooks} x {model.subvector_dim})"
        )
    p, q = fmap.grid_h, fmap.grid_w
    flat = fmap.values.reshape(p * q, model.dim).astype(np.float64)
    sub = model.subvector_dim
    codes = np.empty((p * q, model.num_codebooks), dtype=np.uint8)
    for i in range(model.num_codebooks):
        dists = _pairwise_sq_dist(
            flat[:, i * sub : (i + 1) * sub], model.codebooks[i].astype(np.float64)
        )
        codes[:, i] = np.argmin(dists, axis=1).astype(np.uint8)
    return QuantizedFeatureMap(fmap.image_id, codes.reshape(p, q, model.num_codebooks))


def decode(model: PQModel, qmap: QuantizedFeatureMap) -> FeatureMap:
    """Concatenate indexed centroids back into a p x q x d float map."""
    if qmap.num_codebooks != model.num_codebooks:
        raise PqCodeError(
            f"codes have {qmap.num_codebooks} subspaces, model has {model.num_codebooks}"
        )
    if int(qmap.codes.max(initial=0)) >= model.codebook_size:
        raise PqCodeError(
            f"code {int(qmap.codes.max())} out of range for codebook_size {model.codebook_size}"
        )
    p, q, s = qmap.codes.shape
    # codebooks[i][codes[..., i]] for each subspace, laid out side by side
    parts = [model.codebooks[i][qmap.codes[:, :, i]] for i in range(s)]
    values = np.concatenate(parts, axis=2)
    return FeatureMap(qmap.image_id, values)


def save_pq(model: PQModel, path) -> None:
    from .fileio import atomic_write_bytes

    atomic_write_bytes(path, serialize_pq(model))


def serialize_pq(model: PQModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(
        struct.pack(
            "<III", model.num_codebooks, model.codebook_size, model.subvector_dim
        )
    )
    buf.write(np.ascontiguousarray(model.codebooks, dtype="<f4").tobytes())
    return buf.getvalue()


def load_pq(path) -> PQModel:
    from .fileio import ParseError

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ParseError(str(path), 0, f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise ParseError(str(path), len(raw), "truncated header")
    s, k, sub = struct.unpack_from("<III", raw, 4)
    if s < 1 or not 1 <= k <= 256 or sub < 1:
        raise ParseError(str(path), 4, f"invalid dimensions s={s} k={k} sub={sub}")
    need = 16 + s * k * sub * 4
    if len(raw) != need:
        raise ParseError(str(path), min(len(raw), need), f"expected {need} bytes, got {len(raw)}")
    cb = np.frombuffer(raw, dtype="<f4", offset=16).reshape(s, k, sub)
    if not np.all(np.isfinite(cb)):
        raise ParseError(str(path), 16, "non-finite centroid values")
    return PQModel(cb.copy())


def model_digest(model: PQModel) -> str:
    """Stable content hash used to pair byte codes with the model that made them."""
    return hashlib.sha256(serialize_pq(model)).hexdigest()


def quantization_mse(model: PQModel, samples: np.ndarray) -> float:
    """Mean squared reconstruction error of d-dim vectors, for diagnostics."""
    samples = np.asarray(samples, dtype=np.float64)
    sub = model.subvector_dim
    total = 0.0
    for i in range(model.num_codebooks):
        part = samples[:, i * sub : (i + 1) * sub]
        dists = _pairwise_sq_dist(part, model.codebooks[i].astype(np.float64))
        total += float(dists.min(axis=1).sum())
    return total / (samples.shape[0] * model.dim)
