"""Piecewise-constant relaxed feedback controls.

A :class:`ControlKernel` stores one probability vector over a finite control
grid per (time cell, space cell).  Space cells tile a box; states outside the
box use the nearest boundary cell.  A :class:`JumpHistoryPolicy` selects one
kernel per (number of jumps so far, last-jump bucket), which keeps the control
adapted to the common noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import Problem

ROW_TOL = 1e-12


def _edges_ok(e: np.ndarray) -> bool:
    return e.ndim == 1 and e.size >= 2 and bool(np.all(np.diff(e) > 0))


@dataclass(frozen=True, eq=False)
class ControlKernel:
    time_edges: np.ndarray
    space_edges: tuple[np.ndarray, ...]
    control_grid: np.ndarray
    table: np.ndarray

    def __post_init__(self) -> None:
        te = np.asarray(self.time_edges, dtype=float)
        se = tuple(np.asarray(e, dtype=float) for e in self.space_edges)
        grid = np.asarray(self.control_grid, dtype=float)
        if grid.ndim == 1:
            grid = grid[:, None]
        tab = np.asarray(self.table, dtype=float)
        if not _edges_ok(te) or not all(_edges_ok(e) for e in se):
            raise ValueError("cell edges must be strictly increasing with at least one cell")
        shape = (te.size - 1, int(np.prod([e.size - 1 for e in se])), grid.shape[0])
        if tab.shape != shape:
            raise ValueError(f"table shape {tab.shape} does not match cells/grid {shape}")
        if np.any(tab < 0) or np.any(np.abs(tab.sum(axis=-1) - 1.0) > ROW_TOL):
            raise ValueError("each cell must hold a probability vector")
        object.__setattr__(self, "time_edges", te)
        object.__setattr__(self, "space_edges", se)
        object.__setattr__(self, "control_grid", grid)
        object.__setattr__(self, "table", tab)

    # construction -----------------------------------------------------------------
    @classmethod
    def constant(cls, time_edges, space_edges, control_grid, vector) -> ControlKernel:
        grid = np.asarray(control_grid, dtype=float)
        n_t = len(time_edges) - 1
        n_s = int(np.prod([len(e) - 1 for e in space_edges]))
        vec = np.asarray(vector, dtype=float)
        return cls(time_edges, tuple(space_edges), grid, np.broadcast_to(vec, (n_t, n_s, vec.size)).copy())

    @classmethod
    def dirac(cls, time_edges, space_edges, control_grid, index: int) -> ControlKernel:
        n_u = len(control_grid)
        vec = np.zeros(n_u)
        vec[index] = 1.0
        return cls.constant(time_edges, space_edges, control_grid, vec)

    @classmethod
    def uniform(cls, time_edges, space_edges, control_grid) -> ControlKernel:
        n_u = len(control_grid)
        return cls.constant(time_edges, space_edges, control_grid, np.full(n_u, 1.0 / n_u))

    @classmethod
    def random(cls, time_edges, space_edges, control_grid, rng: np.random.Generator) -> ControlKernel:
        n_t = len(time_edges) - 1
        n_s = int(np.prod([len(e) - 1 for e in space_edges]))
        tab = rng.dirichlet(np.ones(len(control_grid)), size=(n_t, n_s))
        return cls(time_edges, tuple(space_edges), control_grid, _renormalise(tab))

    @classmethod
    def from_feedback(cls, fn: Callable[[float, np.ndarray], np.ndarray], time_edges, space_edges, control_grid) -> ControlKernel:
        """Dirac on the grid point nearest to ``fn(t, x)`` at each cell's centre.

        The time used is the cell's left edge; outer space cells use the
        midpoint of their finite edges.
        """
        grid = np.asarray(control_grid, dtype=float)
        grid = grid[:, None] if grid.ndim == 1 else grid
        centres = [0.5 * (e[1:] + e[:-1]) for e in space_edges]
        mesh = np.meshgrid(*centres, indexing="ij")
        xc = np.stack([m.ravel() for m in mesh], axis=1)
        n_t = len(time_edges) - 1
        tab = np.zeros((n_t, xc.shape[0], grid.shape[0]))
        for k in range(n_t):
            u = np.asarray(fn(float(time_edges[k]), xc), dtype=float).reshape(xc.shape[0], -1)
            idx = np.argmin(((u[:, None, :] - grid[None]) ** 2).sum(-1), axis=1)
            tab[k, np.arange(xc.shape[0]), idx] = 1.0
        return cls(time_edges, tuple(space_edges), grid, tab)

    # lookup -----------------------------------------------------------------------
    @property
    def n_time_cells(self) -> int:
        return self.time_edges.size - 1

    @property
    def space_shape(self) -> tuple[int, ...]:
        return tuple(e.size - 1 for e in self.space_edges)

    @property
    def n_space_cells(self) -> int:
        return self.table.shape[1]

    @property
    def n_controls(self) -> int:
        return self.control_grid.shape[0]

    def time_cell(self, t) -> np.ndarray:
        k = np.searchsorted(self.time_edges, t, side="right") - 1
        return np.clip(k, 0, self.n_time_cells - 1)

    def space_cell(self, x: np.ndarray) -> np.ndarray:
        return space_cell_index(self.space_edges, x)

    def probs(self, t, x: np.ndarray) -> np.ndarray:
        return self.table[self.time_cell(t), self.space_cell(x)]

    def compatible(self, other: ControlKernel) -> bool:
        return (
            np.array_equal(self.time_edges, other.time_edges)
            and len(self.space_edges) == len(other.space_edges)
            and all(np.array_equal(a, b) for a, b in zip(self.space_edges, other.space_edges))
            and np.array_equal(self.control_grid, other.control_grid)
        )

    def with_table(self, table: np.ndarray) -> ControlKernel:
        return ControlKernel(self.time_edges, self.space_edges, self.control_grid, table)

    def entropy(self) -> np.ndarray:
        """Shannon entropy (nats) per cell, shape (time cells, space cells)."""
        p = self.table
        with np.errstate(divide="ignore", invalid="ignore"):
            h = -np.where(p > 0, p * np.log(p), 0.0)
        return h.sum(axis=-1)

    def is_dirac(self) -> bool:
        return bool(np.all(self.table.max(axis=-1) == 1.0))

    # serialisation ----------------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "time_edges": self.time_edges.tolist(),
            "space_edges": [e.tolist() for e in self.space_edges],
            "control_grid": self.control_grid.tolist(),
            "table": self.table.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ControlKernel:
        return cls(
            np.array(d["time_edges"]),
            tuple(np.array(e) for e in d["space_edges"]),
            np.array(d["control_grid"]),
            np.array(d["table"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> ControlKernel:
        return cls.from_dict(json.loads(Path(path).read_text()))


def _renormalise(tab: np.ndarray) -> np.ndarray:
    tab = np.asarray(tab, dtype=float)
    return tab / tab.sum(axis=-1, keepdims=True)


def space_cell_index(space_edges: Sequence[np.ndarray], x: np.ndarray) -> np.ndarray:
    """Flat (C-order) cell index of each state; outside states clip to the boundary cell."""
    idx = None
    for a, e in enumerate(space_edges):
        ia = np.searchsorted(e[1:-1], x[..., a], side="right")
        idx = ia if idx is None else idx * (e.size - 1) + ia
    return idx


def strictify(kernel: ControlKernel, flow=None, problem: Problem | None = None) -> ControlKernel:
    """All mass on each cell's most likely grid point (ties: smallest index).

    ``flow`` and ``problem`` are accepted for interface symmetry and unused.
    """
    idx = np.argmax(kernel.table, axis=-1)
    tab = np.zeros_like(kernel.table)
    np.put_along_axis(tab, idx[..., None], 1.0, axis=-1)
    return kernel.with_table(tab)


@dataclass(frozen=True)
class KernelLayout:
    """Cell structure shared by kernels solved on one problem."""

    time_edges: np.ndarray
    space_edges: tuple[np.ndarray, ...]
    control_grid: np.ndarray

    def dirac(self, index: int) -> ControlKernel:
        return ControlKernel.dirac(self.time_edges, self.space_edges, self.control_grid, index)

    def midpoint_index(self) -> int:
        """Grid point closest to the centre of the grid's bounding box."""
        g = self.control_grid
        centre = 0.5 * (g.min(axis=0) + g.max(axis=0))
        return int(np.argmin(((g - centre) ** 2).sum(axis=1)))

    def nearest_index(self, u) -> int:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return int(np.argmin(((self.control_grid - u) ** 2).sum(axis=1)))


def make_layout(
    problem: Problem,
    n_time_cells: int = 8,
    n_space_cells: int = 16,
    control_points: int = 41,
    control_range: tuple[float, float] | None = (-5.0, 5.0),
    jump_times: Sequence[float] = (),
    space_scale: float = 6.0,
    space_centre: np.ndarray | None = None,
    space_std: np.ndarray | None = None,
) -> KernelLayout:
    """Uniform time cells (plus the given jump times), a box of ``n_space_cells``
    per axis around ``mean +- space_scale * std`` of the initial law, and a
    tensor control grid clipped to the control set."""
    T = problem.horizon
    base = np.linspace(0.0, T, n_time_cells + 1)
    extra = [t for t in jump_times if 0 < t < T and np.min(np.abs(base - t)) > 1e-12 * T]
    time_edges = np.unique(np.concatenate([base, np.asarray(extra, dtype=float)]))
    law = problem.initial_law
    centre = law.mean if space_centre is None else np.atleast_1d(space_centre)
    std = law.std if space_std is None else np.atleast_1d(space_std)
    scale = np.where(std > 0, std, 1.0)
    space_edges = tuple(
        np.linspace(c - space_scale * s, c + space_scale * s, n_space_cells + 1) for c, s in zip(centre, scale)
    )
    cs = problem.control_set
    if cs.is_finite:
        grid = cs.points.copy()
    elif control_range is None:
        grid = cs.grid(control_points)
    else:
        grid = cs.grid(control_points, lows=control_range[0], highs=control_range[1])
    return KernelLayout(time_edges, space_edges, grid)


@dataclass(frozen=True, eq=False)
class JumpHistoryPolicy:
    """Kernels indexed by (min(jumps so far, cap), bucket of the last jump time).

    Key 0 is "no jump yet"; keys 1.. enumerate (count, bucket) pairs.  All
    kernels share one cell layout.
    """

    kernels: tuple[ControlKernel, ...]
    jump_cap: int
    n_buckets: int
    horizon: float

    def __post_init__(self) -> None:
        if len(self.kernels) != self.n_keys(self.jump_cap, self.n_buckets):
            raise ValueError("one kernel per history key required")
        if not all(self.kernels[0].compatible(k) for k in self.kernels[1:]):
            raise ValueError("policy kernels must share cells and control grid")

    @staticmethod
    def n_keys(jump_cap: int, n_buckets: int) -> int:
        return 1 + jump_cap * n_buckets

    @classmethod
    def uniform_from(cls, kernel: ControlKernel, jump_cap: int, n_buckets: int, horizon: float) -> JumpHistoryPolicy:
        return cls(tuple([kernel] * cls.n_keys(jump_cap, n_buckets)), jump_cap, n_buckets, horizon)

    def key(self, n_jumps: int, last_time: float) -> int:
        if n_jumps == 0 or self.jump_cap == 0:
            return 0
        b = min(int(last_time / self.horizon * self.n_buckets), self.n_buckets - 1)
        return 1 + (min(n_jumps, self.jump_cap) - 1) * self.n_buckets + b

    def keys_along(self, node_times: np.ndarray, jump_times: np.ndarray) -> np.ndarray:
        """History key in force at each node (a jump at a node counts at that node)."""
        n = np.searchsorted(jump_times, node_times, side="right")
        last = np.where(n > 0, jump_times[np.maximum(n - 1, 0)] if jump_times.size else 0.0, 0.0)
        return np.array([self.key(int(k), float(s)) for k, s in zip(n, last)], dtype=np.int64)

    def kernel_for(self, n_jumps: int, last_time: float) -> ControlKernel:
        return self.kernels[self.key(n_jumps, last_time)]

    def with_kernels(self, kernels: Sequence[ControlKernel]) -> JumpHistoryPolicy:
        return JumpHistoryPolicy(tuple(kernels), self.jump_cap, self.n_buckets, self.horizon)

    def to_dict(self) -> dict:
        return {
            "jump_cap": self.jump_cap,
            "n_buckets": self.n_buckets,
            "horizon": self.horizon,
            "kernels": [k.to_dict() for k in self.kernels],
        }

    @classmethod
    def from_dict(cls, d: dict) -> JumpHistoryPolicy:
        return cls(tuple(ControlKernel.from_dict(k) for k in d["kernels"]), d["jump_cap"], d["n_buckets"], d["horizon"])
