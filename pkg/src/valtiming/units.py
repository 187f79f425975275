"""k-means pseudo-target units over MFCC frames."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import FeatureSequence

KMEANS_MAGIC = b"VTKM"
KMEANS_VERSION = 1
_HEADER = struct.Struct("<4sIII")

# rows of the point matrix handled per distance block
_CHUNK = 4096


class UnitError(ValueError):
    pass


@dataclass
class KMeansModel:
    centroids: np.ndarray
    inertia: float = 0.0
    # inertia after each assignment step; not persisted
    history: list[float] = field(default_factory=list, compare=False)

    def __post_init__(self) -> None:
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or len(self.centroids) < 1:
            raise UnitError("centroids must be a non-empty K x d matrix")
        if not np.all(np.isfinite(self.centroids)):
            raise UnitError("centroids must be finite")

    @property
    def K(self) -> int:
        return len(self.centroids)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def save(self, path: str | Path) -> None:
        blob = _HEADER.pack(KMEANS_MAGIC, KMEANS_VERSION, self.K, self.dim)
        blob += struct.pack("<d", self.inertia)
        blob += self.centroids.astype("<f8").tobytes()
        Path(path).write_bytes(blob)

    @classmethod
    def load(cls, path: str | Path) -> "KMeansModel":
        blob = Path(path).read_bytes()
        if len(blob) < _HEADER.size + 8:
            raise UnitError(f"{path}: truncated k-means file")
        magic, version, k, d = _HEADER.unpack_from(blob)
        if magic != KMEANS_MAGIC:
            raise UnitError(f"{path}: bad magic {magic!r}")
        if version != KMEANS_VERSION:
            raise UnitError(f"{path}: unsupported version {version}")
        (inertia,) = struct.unpack_from("<d", blob, _HEADER.size)
        body = blob[_HEADER.size + 8 :]
        if len(body) != 8 * k * d:
            raise UnitError(f"{path}: expected {k}x{d} centroids, got {len(body)} bytes")
        centroids = np.frombuffer(body, dtype="<f8").reshape(k, d).astype(np.float64)
        return cls(centroids, inertia)


@dataclass
class UnitSequence:
    units: np.ndarray
    frame_rate: float = 100.0

    def __post_init__(self) -> None:
        self.units = np.asarray(self.units, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.units)


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # explicit differences keep exact zeros for coincident points
    out = np.empty((len(points), len(centroids)))
    for start in range(0, len(points), _CHUNK):
        block = points[start : start + _CHUNK]
        diff = block[:, None, :] - centroids[None, :, :]
        out[start : start + _CHUNK] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [points[rng.integers(len(points))]]
    closest = _sq_distances(points, centroids[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all remaining points coincide with chosen centroids
            idx = rng.integers(len(points))
        else:
            idx = min(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"),
                      len(points) - 1)
        centroids.append(points[idx])
        closest = np.minimum(closest, _sq_distances(points, points[idx][None])[:, 0])
    return np.array(centroids)


def fit_kmeans(
    frames: np.ndarray,
    K: int = 100,
    max_iters: int = 100,
    seed: int = 0,
    max_frames: int = 200_000,
) -> KMeansModel:
    """k-means++ seeding followed by Lloyd iterations.

    Iterates until the assignment no longer changes or ``max_iters`` is hit.
    If more than ``max_frames`` frames are given, a seeded uniform subset is
    used. A cluster that goes empty is re-seeded at the point currently
    farthest from its own centroid.
    """
    points = np.asarray(frames, dtype=np.float64)
    if points.ndim != 2:
        raise UnitError("frames must be an N x d matrix")
    if not np.all(np.isfinite(points)):
        raise UnitError("frames must be finite")
    if K < 1:
        raise UnitError("K must be >= 1")
    if len(points) < K:
        raise UnitError(f"need at least K={K} frames, got {len(points)}")
    rng = np.random.default_rng(seed)
    if len(points) > max_frames:
        points = points[np.sort(rng.choice(len(points), max_frames, replace=False))]

    centroids = _kmeans_pp(points, K, rng)
    assign = None
    history: list[float] = []
    for _ in range(max_iters):
        dist = _sq_distances(points, centroids)
        new_assign = dist.argmin(axis=1)
        point_dist = dist[np.arange(len(points)), new_assign]
        history.append(float(point_dist.sum()))
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        counts = np.bincount(assign, minlength=K)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for c in np.flatnonzero(~nonempty):
            far = int(point_dist.argmax())
            centroids[c] = points[far]
            point_dist[far] = 0.0
    else:
        # hit max_iters: report the inertia of the centroids actually returned
        history.append(float(_sq_distances(points, centroids).min(axis=1).sum()))
    return KMeansModel(centroids, history[-1], history)


def assign_units(model: KMeansModel, feats: FeatureSequence, frame_rate: float = 100.0) -> UnitSequence:
    """Nearest centroid per frame; ties go to the lowest centroid index."""
    if feats.dim != model.dim:
        raise UnitError(f"feature dim {feats.dim} != centroid dim {model.dim}")
    units = _sq_distances(feats.frames, model.centroids).argmin(axis=1)
    return UnitSequence(units, frame_rate)


def align_units(units: UnitSequence, target_len: int) -> UnitSequence:
    """Nearest-index resampling to ``target_len`` frames (half rounds up)."""
    T = len(units)
    if T == 0:
        raise UnitError("cannot align an empty unit sequence")
    if target_len < 1:
        raise UnitError("target_len must be >= 1")
    # floor(i*T/target_len + 1/2) in exact integer arithmetic
    idx = [min(T - 1, (2 * i * T + target_len) // (2 * target_len)) for i in range(target_len)]
    return UnitSequence(units.units[idx], units.frame_rate * target_len / T)
