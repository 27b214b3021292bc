"""Trajectory data model, exact discrete Fréchet distance and forecasting metrics."""

from __future__ import annotations

from dataclasses import dataclass
from math import comb
from typing import NamedTuple, Sequence

import numpy as np

from .errors import InvalidInputError, ResourceError

DEFAULT_HORIZONS = (5, 10, 15, 20, 25, 30)
DEFAULT_MISS_THRESHOLD = 2.0
BRUTE_FORCE_LIMIT = 8


class Point2(NamedTuple):
    x: float
    y: float


def _as_points(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim == 1 and arr.size == 2:
        arr = arr.reshape(1, 2)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise InvalidInputError(f"expected an (n, 2) point array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Uniformly sampled 2D trajectory; ``dt`` is metadata only."""

    points: np.ndarray
    dt: float = 0.1

    def __post_init__(self):
        pts = _as_points(self.points)
        if len(pts) < 1:
            raise InvalidInputError("trajectory needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("trajectory points must be finite")
        if not self.dt > 0:
            raise InvalidInputError(f"dt must be positive, got {self.dt}")
        pts = pts.copy()
        pts.flags.writeable = False
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "dt", float(self.dt))

    def __len__(self):
        return len(self.points)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return self.dt == other.dt and np.array_equal(self.points, other.points)

    def __getitem__(self, i) -> Point2:
        x, y = self.points[i]
        return Point2(float(x), float(y))

    def head(self, n: int) -> "Trajectory":
        """First ``n`` points."""
        if not 1 <= n <= len(self):
            raise InvalidInputError(f"cannot take {n} points from a trajectory of length {len(self)}")
        return Trajectory(self.points[:n], self.dt)

    def translated(self, offset) -> "Trajectory":
        return Trajectory(self.points + np.asarray(offset, dtype=np.float64), self.dt)


class HorizonSet(tuple):
    """Sorted, distinct, positive prediction horizons."""

    def __new__(cls, horizons=DEFAULT_HORIZONS):
        hs = tuple(int(h) for h in horizons)
        if not hs:
            raise InvalidInputError("horizon set must be non-empty")
        if any(h < 1 for h in hs):
            raise InvalidInputError(f"horizons must be >= 1: {hs}")
        if any(b <= a for a, b in zip(hs, hs[1:])):
            raise InvalidInputError(f"horizons must be strictly increasing: {hs}")
        return super().__new__(cls, hs)

    @property
    def max(self) -> int:
        return self[-1]

    def index_of(self, f: int) -> int:
        try:
            return self.index(int(f))
        except ValueError:
            raise InvalidInputError(f"horizon {f} not in {tuple(self)}") from None


@dataclass(frozen=True, eq=False)
class ModeSet:
    """K equal-length predicted trajectories with mode probabilities."""

    trajectories: np.ndarray  # (K, n, 2)
    probs: np.ndarray
    dt: float = 0.1

    def __post_init__(self):
        trajs = np.asarray(self.trajectories, dtype=np.float64)
        if trajs.ndim != 3 or trajs.shape[2] != 2 or trajs.shape[0] < 1 or trajs.shape[1] < 1:
            raise InvalidInputError(f"mode trajectories must be (K, n, 2), got {trajs.shape}")
        if not np.all(np.isfinite(trajs)):
            raise InvalidInputError("mode trajectories must be finite")
        probs = np.asarray(self.probs, dtype=np.float64).reshape(-1)
        if probs.shape[0] != trajs.shape[0]:
            raise InvalidInputError("one probability per mode required")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
            raise InvalidInputError("mode probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "trajectories", trajs)
        object.__setattr__(self, "probs", probs)

    @classmethod
    def uniform(cls, trajectories, dt: float = 0.1) -> "ModeSet":
        trajs = np.asarray(trajectories, dtype=np.float64)
        k = trajs.shape[0]
        return cls(trajs, np.full(k, 1.0 / k), dt)

    @property
    def num_modes(self) -> int:
        return self.trajectories.shape[0]

    @property
    def length(self) -> int:
        return self.trajectories.shape[1]

    def mode(self, k: int) -> Trajectory:
        return Trajectory(self.trajectories[k], self.dt)

    def truncated(self, n: int) -> "ModeSet":
        if not 1 <= n <= self.length:
            raise InvalidInputError(f"cannot truncate {self.length}-step modes to {n}")
        return ModeSet(self.trajectories[:, :n], self.probs, self.dt)


def points_of(traj) -> np.ndarray:
    if isinstance(traj, Trajectory):
        return traj.points
    return _as_points(traj)


def relative_displacements(traj) -> list[Point2]:
    pts = points_of(traj)
    if len(pts) < 2:
        raise InvalidInputError("need at least two points for displacements")
    return [Point2(float(dx), float(dy)) for dx, dy in np.diff(pts, axis=0)]


def _paired(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    a, b = points_of(pred), points_of(gt)
    if len(a) != len(b):
        raise InvalidInputError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 1:
        raise InvalidInputError("empty trajectory")
    return a, b


def ade(pred, gt) -> float:
    a, b = _paired(pred, gt)
    return float(np.mean(np.hypot(*(a - b).T)))


def fde(pred, gt) -> float:
    a, b = _paired(pred, gt)
    d = a[-1] - b[-1]
    return float(np.hypot(d[0], d[1]))


def best_mode_metrics(modes: ModeSet, gt) -> tuple[float, float, int]:
    """Return ``(minADE, minFDE, best_index)``; the index is the FDE argmin."""
    g = points_of(gt)
    if modes.length != len(g):
        raise InvalidInputError(f"mode length {modes.length} != ground truth length {len(g)}")
    err = np.hypot(*(modes.trajectories - g[None]).transpose(2, 0, 1))  # (K, n)
    ades = err.mean(axis=1)
    fdes = err[:, -1]
    best = int(np.argmin(fdes))  # first minimum, i.e. lowest index on ties
    return float(ades.min()), float(fdes[best]), best


def batch_mode_errors(preds: np.ndarray, gts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized min-over-modes ADE and FDE for ``preds`` (B, K, n, 2), ``gts`` (B, n, 2)."""
    err = np.linalg.norm(preds - gts[:, None], axis=-1)
    return err.mean(axis=2).min(axis=1), err[:, :, -1].min(axis=1)


def miss_rate(per_agent_modes: Sequence[ModeSet], gts: Sequence, threshold: float = DEFAULT_MISS_THRESHOLD) -> float:
    if len(per_agent_modes) != len(gts):
        raise InvalidInputError(f"{len(per_agent_modes)} mode sets for {len(gts)} ground truths")
    if not threshold > 0:
        raise InvalidInputError("miss threshold must be positive")
    if not per_agent_modes:
        return 0.0
    misses = sum(best_mode_metrics(m, g)[1] > threshold for m, g in zip(per_agent_modes, gts))
    return misses / len(per_agent_modes)


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix; shared by the DP and the brute-force oracle."""
    diff = a[..., :, None, :] - b[..., None, :, :]
    return np.hypot(diff[..., 0], diff[..., 1])  # no underflow on tiny offsets


def _nonempty_pair(X, Y) -> tuple[np.ndarray, np.ndarray]:
    a, b = points_of(X), points_of(Y)
    if len(a) == 0 or len(b) == 0:
        raise InvalidInputError("Fréchet distance of an empty trajectory")
    return a, b


def discrete_frechet(X, Y) -> float:
    a, b = _nonempty_pair(X, Y)
    dist = pairwise_distances(a, b)
    m, n = dist.shape
    ca = np.empty((m, n))
    ca[0, 0] = dist[0, 0]
    for i in range(1, m):
        ca[i, 0] = max(ca[i - 1, 0], dist[i, 0])
    for j in range(1, n):
        ca[0, j] = max(ca[0, j - 1], dist[0, j])
    for i in range(1, m):
        for j in range(1, n):
            ca[i, j] = max(dist[i, j], min(ca[i - 1, j], ca[i, j - 1], ca[i - 1, j - 1]))
    return float(ca[-1, -1])


def monotone_couplings(m: int, n: int):
    """Yield every monotone coupling of index ranges ``m`` and ``n`` as a list of pairs."""
    moves = ((1, 0), (0, 1), (1, 1))

    def walk(path):
        i, j = path[-1]
        if (i, j) == (m - 1, n - 1):
            yield list(path)
            return
        for di, dj in moves:
            if i + di < m and j + dj < n:
                path.append((i + di, j + dj))
                yield from walk(path)
                path.pop()

    yield from walk([(0, 0)])


def brute_force_frechet(X, Y) -> float:
    a, b = _nonempty_pair(X, Y)
    if len(a) > BRUTE_FORCE_LIMIT or len(b) > BRUTE_FORCE_LIMIT:
        raise ResourceError(f"brute force limited to {BRUTE_FORCE_LIMIT} points per curve")
    dist = pairwise_distances(a, b).tolist()
    return float(min(max(dist[i][j] for i, j in path) for path in monotone_couplings(len(a), len(b))))


def count_couplings(m: int, n: int) -> int:
    """Delannoy number D(m-1, n-1)."""
    return sum(comb(m - 1, k) * comb(n - 1, k) * 2**k for k in range(min(m, n)))
