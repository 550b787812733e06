"""Realisations of a finite-intensity Poisson random measure on [0, T] x Z."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .model import IntensitySpec
from .rng import substream

NOISE_TAG = "point-path"


@dataclass(frozen=True, eq=False)
class PointPath:
    """Sorted jump times in (0, T] with one mark row per event."""

    horizon: float
    times: np.ndarray
    marks: np.ndarray
    source_seed: int = -1
    intensity: IntensitySpec | None = None

    def __post_init__(self) -> None:
        times = np.asarray(self.times, dtype=float).reshape(-1)
        marks = np.asarray(self.marks, dtype=float)
        if marks.ndim == 1:
            marks = marks.reshape(times.size, -1) if times.size else marks.reshape(0, max(marks.size, 1))
        if marks.shape[0] != times.size:
            raise ValueError("one mark per event required")
        if times.size:
            if np.any(np.diff(times) <= 0):
                raise ValueError("event times must be strictly increasing")
            if times[0] <= 0 or times[-1] > self.horizon:
                raise ValueError("event times must lie in (0, T]")
        times.setflags(write=False)
        marks.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "marks", marks)

    @classmethod
    def from_events(cls, horizon: float, events, mark_dim: int = 1, source_seed: int = -1) -> PointPath:
        """Build from ``[(t, z), ...]`` pairs; ``z`` may be a scalar or a sequence."""
        events = list(events)
        times = np.array([e[0] for e in events], dtype=float)
        marks = np.array([np.atleast_1d(e[1]) for e in events], dtype=float).reshape(len(events), -1)
        if not events:
            marks = np.zeros((0, mark_dim))
        return cls(horizon, times, marks, source_seed)

    @property
    def n_events(self) -> int:
        return self.times.size

    def events(self) -> list[tuple[float, np.ndarray]]:
        return [(float(t), m.copy()) for t, m in zip(self.times, self.marks)]

    def same_events(self, other: PointPath) -> bool:
        return (
            self.horizon == other.horizon
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.marks, other.marks)
        )

    def history_at(self, t: float) -> tuple[int, float]:
        """(number of events at or before t, time of the last one or 0)."""
        k = int(np.searchsorted(self.times, t, side="right"))
        return k, float(self.times[k - 1]) if k else 0.0

    def to_text(self) -> str:
        lines = [f"horizon={self.horizon!r}", f"seed={self.source_seed}"]
        for t, m in zip(self.times, self.marks):
            lines.append(",".join(f"{v:.17g}" for v in (t, *m)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> PointPath:
        horizon, seed, rows = None, -1, []
        for no, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("horizon="):
                horizon = float(line.split("=", 1)[1])
            elif line.startswith("seed="):
                seed = int(line.split("=", 1)[1])
            else:
                try:
                    rows.append([float(v) for v in line.split(",")])
                except ValueError as exc:
                    raise ValueError(f"line {no}: cannot parse event {raw!r}") from exc
        if horizon is None:
            raise ValueError("missing horizon= line")
        if rows and len({len(r) for r in rows}) != 1:
            raise ValueError("events have inconsistent mark dimensions")
        arr = np.array(rows, dtype=float) if rows else np.zeros((0, 2))
        return cls(horizon, arr[:, 0], arr[:, 1:], seed)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> PointPath:
        return cls.from_text(Path(path).read_text())


def sample_point_path(intensity: IntensitySpec, horizon: float, seed: int, index: int = 0) -> PointPath:
    """Poisson count, then i.i.d. uniform times on (0, T] sorted, then i.i.d. marks.

    ``index`` selects the path within a family sharing one master seed.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    rng = substream(seed, NOISE_TAG, index)
    k = int(rng.poisson(intensity.total_rate * horizon)) if intensity.total_rate > 0 else 0
    # 1 - U lies in (0, 1]
    times = np.sort(horizon * (1.0 - rng.random(k)))
    while k > 1 and np.any(np.diff(times) == 0):
        dup = np.flatnonzero(np.diff(times) == 0) + 1
        times[dup] = horizon * (1.0 - rng.random(dup.size))
        times.sort()
    marks = intensity.sample_marks(rng, k) if k else np.zeros((0, intensity.mark_dim))
    return PointPath(horizon, times, marks, seed, intensity)


def sample_point_paths(intensity: IntensitySpec, horizon: float, seed: int, n_paths: int) -> list[PointPath]:
    return [sample_point_path(intensity, horizon, seed, k) for k in range(n_paths)]


def counting_measure(path: PointPath, t: float, mark_predicate: Callable[[np.ndarray], bool] | None = None) -> int:
    if not 0 <= t <= path.horizon:
        raise ValueError(f"t={t} outside [0, {path.horizon}]")
    k = int(np.searchsorted(path.times, t, side="right"))
    if mark_predicate is None:
        return k
    return sum(1 for m in path.marks[:k] if mark_predicate(m))


def jump_count(path: PointPath) -> int:
    return path.n_events
