"""Seeded synthetic driving scenarios and their JSONL persistence.

Five motion families give the horizon labeler something to separate: smooth motion
rewards long horizons, while maneuvers that start inside the future window punish
long extrapolation.
"""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, InvalidInputError, ParseError
from .trajgeo import Trajectory

KINDS = ("constant-velocity", "constant-turn", "lane-change", "stop-and-go", "late-maneuver")
SEPARABLE_KIND = "speed-coded"


@dataclass(frozen=True)
class Scenario:
    kind: str
    speed: float
    heading: float = 0.0
    turn_rate: float = 0.0
    onset: int = 0
    magnitude: float = 0.0
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS and self.kind != SEPARABLE_KIND:
            raise InvalidInputError(f"unknown scenario kind {self.kind!r}")
        if self.speed < 0:
            raise InvalidInputError("speed must be non-negative")
        if self.sigma < 0:
            raise InvalidInputError("noise sigma must be non-negative")
        if self.onset < 0:
            raise InvalidInputError("onset must be non-negative")


@dataclass(frozen=True, eq=False)
class Sample:
    agent_id: str
    history: Trajectory
    future: Trajectory
    kind: str

    def __post_init__(self):
        if self.history.dt != self.future.dt:
            raise InvalidInputError("history and future must share dt")

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.agent_id, self.kind) == (other.agent_id, other.kind) and \
            self.history == other.history and self.future == other.future


@dataclass(frozen=True)
class GeneratorConfig:
    history_len: int = 20
    future_len: int = 30
    dt: float = 0.1
    mixture: tuple = tuple((k, 1.0) for k in KINDS)
    speed_range: tuple = (2.0, 12.0)
    noise: float = 0.05

    def __post_init__(self):
        if self.history_len < 2 or self.future_len < 1:
            raise ConfigurationError("need history_len >= 2 and future_len >= 1")
        if not self.dt > 0:
            raise ConfigurationError("dt must be positive")
        mix = dict(self.mixture)
        if not mix or any(k not in KINDS for k in mix):
            raise ConfigurationError(f"mixture kinds must be drawn from {KINDS}")
        w = np.array(list(mix.values()), dtype=float)
        if np.any(~np.isfinite(w)) or np.any(w < 0) or w.sum() <= 0:
            raise ConfigurationError("mixture weights must be non-negative with a positive sum")
        if self.noise < 0:
            raise ConfigurationError("noise must be non-negative")

    @property
    def weights(self) -> tuple[tuple[str, ...], np.ndarray]:
        kinds = tuple(k for k, _ in self.mixture)
        w = np.array([v for _, v in self.mixture], dtype=float)
        return kinds, w / w.sum()


def _speed_profile(sc: Scenario, n: int, history_len: int, dt: float) -> np.ndarray:
    v = np.full(n, sc.speed)
    if sc.kind == "stop-and-go":
        # brake to a halt from onset, wait, then pull away again
        t = (np.arange(n) - (history_len + sc.onset)) * dt
        brake = np.clip(1 - t / 1.0, 0, 1)
        restart = np.clip((t - 1.5) / 1.0, 0, 1)
        v = sc.speed * np.maximum(brake, restart)
    return v


def _heading_profile(sc: Scenario, n: int, history_len: int, dt: float) -> np.ndarray:
    steps = np.arange(n)
    head = np.full(n, sc.heading)
    if sc.kind == "constant-turn":
        head = sc.heading + sc.turn_rate * dt * steps
    elif sc.kind == "late-maneuver":
        head = head + np.where(steps >= history_len + sc.onset, sc.magnitude, 0.0)
    return head


def simulate(sc: Scenario, history_len: int, future_len: int, dt: float) -> np.ndarray:
    """Noise-free positions for ``history_len + future_len`` steps; the last history point is at the origin."""
    n = history_len + future_len
    v = _speed_profile(sc, n, history_len, dt)
    head = _heading_profile(sc, n, history_len, dt)
    step = np.stack([np.cos(head), np.sin(head)], axis=1) * (v * dt)[:, None]
    pos = np.concatenate([np.zeros((1, 2)), np.cumsum(step[1:], axis=0)])
    if sc.kind == "lane-change":
        # smooth lateral shift of `magnitude` metres over about two seconds
        t = (np.arange(n) - (history_len + sc.onset)) * dt
        lateral = sc.magnitude / (1 + np.exp(-3.0 * (t - 1.0)))
        lateral -= lateral[history_len - 1]
        normal = np.array([-np.sin(sc.heading), np.cos(sc.heading)])
        pos = pos + lateral[:, None] * normal
    return pos - pos[history_len - 1]


def _draw_scenario(kind: str, cfg: GeneratorConfig, rng: np.random.Generator, seed: int) -> Scenario:
    speed = rng.uniform(*cfg.speed_range)
    heading = rng.uniform(-np.pi, np.pi)
    sign = rng.choice([-1.0, 1.0])
    onset = int(rng.integers(1, max(2, cfg.future_len // 2)))
    turn = magnitude = 0.0
    if kind == "constant-turn":
        turn = sign * rng.uniform(0.1, 0.5)
    elif kind == "lane-change":
        magnitude = sign * rng.uniform(2.5, 4.0)
    elif kind == "late-maneuver":
        magnitude = sign * rng.uniform(np.pi / 4, np.pi / 2)
    return Scenario(kind, speed, heading, turn, onset, magnitude, cfg.noise, seed)


def _make_sample(agent_id: str, sc: Scenario, cfg: GeneratorConfig, origin, rng) -> Sample:
    pos = simulate(sc, cfg.history_len, cfg.future_len, cfg.dt) + origin
    hist = pos[: cfg.history_len] + rng.normal(0.0, sc.sigma, size=(cfg.history_len, 2))
    fut = pos[cfg.history_len :]
    return Sample(agent_id, Trajectory(hist, cfg.dt), Trajectory(fut, cfg.dt), sc.kind)


def generate(n: int, config: GeneratorConfig = GeneratorConfig(), seed: int = 0) -> list[Sample]:
    """``n`` samples, a pure function of ``(config, seed)``."""
    if n < 0:
        raise InvalidInputError("sample count must be non-negative")
    rng = np.random.default_rng(seed)
    kinds, probs = config.weights
    out = []
    for i in range(n):
        kind = kinds[rng.choice(len(kinds), p=probs)]
        sc = _draw_scenario(kind, config, rng, seed)
        origin = rng.uniform(-50, 50, size=2)
        out.append(_make_sample(f"agent{i:06d}", sc, config, origin, rng))
    return out


def generate_separable(n: int, horizons: Sequence[int], config: GeneratorConfig = GeneratorConfig(), seed: int = 0):
    """Straight-line samples whose speed bucket encodes a horizon class.

    Returns ``(samples, horizon_labels)``; class ``c`` drives at roughly ``2 + 2c`` m/s, so the
    label is readable from the history alone.
    """
    rng = np.random.default_rng(seed)
    out, classes = [], []
    for i in range(n):
        c = int(rng.integers(len(horizons)))
        speed = 2.0 + 2.0 * c + rng.uniform(-0.5, 0.5)
        sc = Scenario(SEPARABLE_KIND, speed, rng.uniform(-np.pi, np.pi), sigma=config.noise, seed=seed)
        out.append(_make_sample(f"sep{i:06d}", sc, config, rng.uniform(-50, 50, size=2), rng))
        classes.append(int(horizons[c]))
    return out, classes


def _fmt(arr: np.ndarray) -> str:
    return "[" + ",".join(f"[{x:.17g},{y:.17g}]" for x, y in arr) + "]"


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode + "t", encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def sample_to_line(s: Sample) -> str:
    return (
        f'{{"agent_id": {json.dumps(s.agent_id)}, "kind": {json.dumps(s.kind)}, "dt": {s.history.dt!r}, '
        f'"history": {_fmt(s.history.points)}, "future": {_fmt(s.future.points)}}}'
    )


def write_jsonl(samples: Sequence[Sample], path) -> None:
    with _open(path, "w") as fh:
        for s in samples:
            fh.write(sample_to_line(s) + "\n")


def read_jsonl(path) -> list[Sample]:
    out = []
    with _open(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                dt = float(rec["dt"])
                out.append(Sample(
                    str(rec["agent_id"]),
                    Trajectory(np.array(rec["history"], dtype=float), dt),
                    Trajectory(np.array(rec["future"], dtype=float), dt),
                    str(rec["kind"]),
                ))
            except (ValueError, KeyError, TypeError) as exc:
                raise ParseError(f"malformed sample record ({exc.__class__.__name__}: {exc})", lineno) from None
    return out


def split(samples: Sequence, train_fraction: float = 0.8, seed: int = 0) -> tuple[list, list, list[int]]:
    """Seeded shuffle split; also returns the permutation for run manifests."""
    if not 0 < train_fraction < 1:
        raise InvalidInputError("train fraction must lie in (0, 1)")
    perm = np.random.default_rng(seed).permutation(len(samples)).tolist()
    cut = int(round(train_fraction * len(samples)))
    return [samples[i] for i in perm[:cut]], [samples[i] for i in perm[cut:]], perm
