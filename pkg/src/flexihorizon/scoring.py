"""Horizon scoring: accuracy per step, optimal-horizon labels and label persistence."""

from __future__ import annotations

import gzip
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidInputError, ParseError
from .fdk import FdkParams, fdk_distance_batch
from .trajgeo import HorizonSet, ModeSet, discrete_frechet, points_of

SCORE_KERNELS = ("frechet", "exact", "ade", "fde")


@dataclass(frozen=True)
class ScoreRow:
    f: int
    d: float
    q: float


@dataclass(frozen=True)
class HorizonLabel:
    agent_id: str
    f_gt: int
    q: float
    horizons: tuple
    scores: tuple = field(default=(), compare=False)

    @property
    def one_hot(self) -> np.ndarray:
        out = np.zeros(len(self.horizons))
        out[self.horizons.index(self.f_gt)] = 1.0
        return out

    @property
    def class_index(self) -> int:
        return self.horizons.index(self.f_gt)


def step_score(d: float, f: int) -> float:
    if f < 1:
        raise InvalidInputError(f"horizon must be >= 1, got {f}")
    if d < 0:
        raise InvalidInputError(f"distance must be non-negative, got {d}")
    return d / f


def _kernel_distances(preds: np.ndarray, gts: np.ndarray, params: FdkParams, kernel: str) -> np.ndarray:
    """Per-pair distance between ``preds`` (N, f, 2) and ``gts`` (N, f, 2)."""
    if kernel == "frechet":
        return fdk_distance_batch(preds, gts, params)
    if kernel == "exact":
        return np.array([discrete_frechet(p, g) for p, g in zip(preds, gts)])
    err = np.linalg.norm(preds - gts, axis=-1)
    if kernel == "ade":
        return err.mean(axis=1)
    if kernel == "fde":
        return err[:, -1]
    raise InvalidInputError(f"unknown score kernel {kernel!r}; expected one of {SCORE_KERNELS}")


def label_from_distances(agent_id: str, horizons, d) -> HorizonLabel:
    """Score table and argmin label from per-horizon distances."""
    horizons = HorizonSet(horizons)
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (len(horizons),):
        raise InvalidInputError("one distance per horizon required")
    rows = tuple(ScoreRow(f, float(df), step_score(float(df), f)) for f, df in zip(horizons, d))
    qs = [r.q for r in rows]
    best = int(np.argmin(qs))  # first minimum: smallest horizon wins ties
    return HorizonLabel(agent_id, horizons[best], qs[best], tuple(horizons), rows)


def _check_agent(preds: Mapping[int, ModeSet], gt: np.ndarray, horizons: HorizonSet):
    for f in horizons:
        if f not in preds:
            raise InvalidInputError(f"missing predictions for horizon {f}")
        if f > len(gt):
            raise InvalidInputError(f"horizon {f} exceeds ground-truth length {len(gt)}")
        if preds[f].length != f:
            raise InvalidInputError(f"horizon {f} predictions have {preds[f].length} steps")


def best_horizon(
    preds_per_horizon: Mapping[int, ModeSet],
    gt,
    params: FdkParams = FdkParams(),
    kernel: str = "frechet",
    horizons=None,
    agent_id: str = "",
) -> tuple[HorizonLabel, tuple[ScoreRow, ...]]:
    """Score every horizon and return the label with its score table."""
    hs = HorizonSet(sorted(preds_per_horizon) if horizons is None else horizons)
    g = points_of(gt)
    _check_agent(preds_per_horizon, g, hs)
    d = []
    for f in hs:
        modes = preds_per_horizon[f].trajectories
        gts = np.broadcast_to(g[:f], modes.shape)
        d.append(_kernel_distances(modes, gts, params, kernel).min())
    label = label_from_distances(agent_id, hs, np.array(d))
    return label, label.scores


def label_dataset(
    fixed_horizon_predictions: Sequence[Mapping[int, ModeSet]],
    gts: Sequence,
    params: FdkParams = FdkParams(),
    kernel: str = "frechet",
    horizons=None,
    agent_ids: Sequence[str] | None = None,
) -> list[HorizonLabel]:
    """Label every agent with its optimal horizon; kernels run batched per horizon."""
    if len(fixed_horizon_predictions) != len(gts):
        raise InvalidInputError("one prediction map per ground truth required")
    if not gts:
        return []
    hs = HorizonSet(sorted(fixed_horizon_predictions[0]) if horizons is None else horizons)
    ids = [str(i) for i in range(len(gts))] if agent_ids is None else [str(a) for a in agent_ids]
    g_all = [points_of(g) for g in gts]
    for preds, g in zip(fixed_horizon_predictions, g_all):
        _check_agent(preds, g, hs)

    d = np.empty((len(gts), len(hs)))
    for col, f in enumerate(hs):
        modes = [p[f].trajectories for p in fixed_horizon_predictions]
        counts = [m.shape[0] for m in modes]
        stacked = np.concatenate(modes)
        targets = np.concatenate([np.broadcast_to(g[:f], m.shape) for g, m in zip(g_all, modes)])
        flat = _kernel_distances(stacked, targets, params, kernel)
        splits = np.split(flat, np.cumsum(counts)[:-1])
        d[:, col] = [s.min() for s in splits]
    return [label_from_distances(aid, hs, row) for aid, row in zip(ids, d)]


def class_distribution(labels: Sequence[HorizonLabel], horizons=None) -> dict[int, int]:
    counts = Counter(l.f_gt for l in labels)
    keys = horizons if horizons is not None else sorted(counts)
    return {int(f): counts.get(f, 0) for f in keys}


def oracle_predictions(gts: Sequence, horizons, num_modes: int = 6, noise: float = 0.05, seed: int = 0):
    """Ground-truth futures corrupted by random-walk noise that grows with the step index."""
    hs = HorizonSet(horizons)
    rng = np.random.default_rng(seed)
    out = []
    for g in gts:
        pts = points_of(g)
        walk = np.cumsum(rng.normal(0.0, noise, size=(len(hs), num_modes, hs.max, 2)), axis=2)
        out.append({
            f: ModeSet.uniform(pts[None, :f] + walk[i, :, :f]) for i, f in enumerate(hs)
        })
    return out


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def write_labels(labels: Sequence[HorizonLabel], path) -> None:
    with _open(path, "w") as fh:
        for l in labels:
            rec = {"agent_id": l.agent_id, "f_gt": l.f_gt,
                   "scores": [{"f": r.f, "d": r.d, "q": r.q} for r in l.scores]}
            fh.write(json.dumps(rec) + "\n")


def read_labels(path) -> list[HorizonLabel]:
    labels = []
    with _open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                rows = tuple(ScoreRow(int(s["f"]), float(s["d"]), float(s["q"])) for s in rec["scores"])
                hs = tuple(r.f for r in rows)
                f_gt = int(rec["f_gt"])
                q = next(r.q for r in rows if r.f == f_gt)
                labels.append(HorizonLabel(str(rec["agent_id"]), f_gt, q, hs, rows))
            except (ValueError, KeyError, TypeError, StopIteration) as exc:
                raise ParseError(f"malformed label record ({exc.__class__.__name__}: {exc})", lineno) from None
    return labels
