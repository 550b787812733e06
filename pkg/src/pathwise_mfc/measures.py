"""Empirical measures, measure flows, Wasserstein-2 and a restricted Skorokhod distance."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment, linprog

from .rng import substream

# above this many transport variables the exact solvers are replaced by slicing
EXACT_LP_LIMIT = 4_000_000
DEFAULT_PROJECTIONS = 64


@dataclass(frozen=True, eq=False)
class ParticleCloud:
    """Weighted particle approximation of a probability measure on R^n.

    ``points`` has shape ``(..., N, n)``.  Leading axes are batch axes: the
    particle engine hands coefficients one cloud per batch element stacked
    together.  Statistics keep a singleton particle axis so they broadcast
    against state arrays of shape ``(..., M, n)``.
    """

    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim < 2 or pts.shape[-2] < 1:
            raise ValueError("a particle cloud needs at least one particle")
        if not np.isfinite(pts).all():
            raise ValueError("particle positions must be finite")
        object.__setattr__(self, "points", pts)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (pts.shape[-2],):
                raise ValueError(f"weights shape {w.shape} does not match {pts.shape[-2]} particles")
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ValueError("weights must be nonnegative and sum to 1")
            object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> ParticleCloud:
        return cls(np.asarray(points, dtype=float))

    @property
    def n_particles(self) -> int:
        return self.points.shape[-2]

    @property
    def dim(self) -> int:
        return self.points.shape[-1]

    @cached_property
    def w(self) -> np.ndarray:
        """Weights as an explicit array (uniform when none were given)."""
        if self.weights is None:
            return np.full(self.n_particles, 1.0 / self.n_particles)
        return self.weights

    def expect(self, values: np.ndarray) -> np.ndarray:
        """Weighted average over the particle axis of ``values`` shaped ``(..., N)``."""
        if self.weights is None:
            return values.mean(axis=-1)
        return values @ self.weights

    @cached_property
    def _mean(self) -> np.ndarray:
        if self.weights is None:
            return self.points.mean(axis=-2, keepdims=True)
        return np.einsum("...ij,i->...j", self.points, self.weights)[..., None, :]

    def mean(self) -> np.ndarray:
        return self._mean

    def moment(self, order: float = 2.0) -> np.ndarray:
        """M_p per batch element, shaped ``(..., 1)``."""
        norms = np.linalg.norm(self.points, axis=-1)
        return self.expect(norms**order)[..., None] ** (1.0 / order)

    @cached_property
    def m2(self) -> np.ndarray:
        return self.moment(2.0)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.points)))


@dataclass(frozen=True, eq=False)
class MeasureFlow:
    """Cadlag flow of particle clouds on a time grid.

    ``clouds`` holds the (right-continuous) value at every node, shape
    ``(S+1, N, n)``.  ``left_limits`` holds the value just before each node in
    ``jump_nodes``.
    """

    times: np.ndarray
    clouds: np.ndarray
    jump_nodes: np.ndarray
    left_limits: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or np.any(np.diff(t) <= 0):
            raise ValueError("flow grid must be strictly increasing")
        if self.clouds.shape[0] != t.size:
            raise ValueError("one cloud per grid node required")
        if self.left_limits.shape[0] != len(self.jump_nodes):
            raise ValueError("one left limit per jump node required")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "jump_nodes", np.asarray(self.jump_nodes, dtype=int))

    @property
    def n_nodes(self) -> int:
        return self.times.size

    @property
    def n_particles(self) -> int:
        return self.clouds.shape[1]

    @cached_property
    def _jump_pos(self) -> dict[int, int]:
        return {int(j): k for k, j in enumerate(self.jump_nodes)}

    def cloud(self, node: int) -> ParticleCloud:
        return ParticleCloud(self.clouds[node], self.weights)

    def left_cloud(self, node: int) -> ParticleCloud:
        """mu_{t-} at a node; equals ``cloud(node)`` away from jumps."""
        k = self._jump_pos.get(int(node))
        if k is None:
            return self.cloud(node)
        return ParticleCloud(self.left_limits[k], self.weights)

    def node_of(self, t: float) -> int:
        """Index of the last node at or before ``t``."""
        j = int(np.searchsorted(self.times, t, side="right")) - 1
        return min(max(j, 0), self.n_nodes - 1)

    def at(self, t: float) -> ParticleCloud:
        return self.cloud(self.node_of(t))

    def is_jump_node(self, node: int) -> bool:
        return int(node) in self._jump_pos

    def to_csv(self, path: str | Path) -> None:
        write_flow_csv(path, self)


@dataclass(frozen=True)
class PiecewisePath:
    """A cadlag path given by node values.

    Between consecutive nodes the path is linear, except that it may jump at
    nodes listed in ``jump_times``.  ``left_values`` gives the limit from the
    left at each jump time; by default the path is flat up to the jump.
    """

    grid: np.ndarray
    values: np.ndarray
    jump_times: tuple[float, ...] = ()
    left_values: np.ndarray | None = None

    def __post_init__(self) -> None:
        g = np.asarray(self.grid, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if g.ndim != 1 or v.shape[0] != g.size:
            raise ValueError("one value per grid node required")
        if np.any(np.diff(g) <= 0):
            raise ValueError("grid must be strictly increasing")
        if not np.all(np.isfinite(v)):
            raise ValueError("path values must be finite")
        jt = tuple(float(t) for t in self.jump_times)
        idx = np.searchsorted(g, jt)
        if any(i >= g.size or g[i] != t for i, t in zip(idx, jt)):
            raise ValueError("jump times must be grid nodes")
        if any(i == 0 for i in idx):
            raise ValueError("a path cannot jump at its first node")
        if self.left_values is None:
            lv = v[idx - 1] if jt else np.zeros((0, v.shape[1]))
        else:
            lv = np.asarray(self.left_values, dtype=float).reshape(len(jt), v.shape[1])
        object.__setattr__(self, "grid", g)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "left_values", lv)

    @property
    def horizon(self) -> tuple[float, float]:
        return float(self.grid[0]), float(self.grid[-1])

    def _segments(self):
        """Per node interval: left value, right value (before any jump at its right end)."""
        v = self.values
        end = v[1:].copy()
        jidx = np.searchsorted(self.grid, self.jump_times)
        end[jidx - 1] = self.left_values
        return v[:-1], end

    def evaluate(self, t: np.ndarray, side: str = "right") -> np.ndarray:
        """Path value at times ``t``; ``side='left'`` gives left limits."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        g = self.grid
        start, end = self._segments()
        if side == "right":
            k = np.searchsorted(g, t, side="right") - 1
        else:
            k = np.searchsorted(g, t, side="left") - 1
        k = np.clip(k, 0, g.size - 2)
        frac = ((t - g[k]) / (g[k + 1] - g[k]))[:, None]
        out = start[k] + frac * (end[k] - start[k])
        if side == "right":
            at_last = t >= g[-1]
            out[at_last] = self.values[-1]
        else:
            at_first = t <= g[0]
            out[at_first] = self.values[0]
        return out


class W2Result(NamedTuple):
    value: float
    method: str
    n_projections: int = 0
    mc_error: float = 0.0


def _check_pair(a: ParticleCloud, b: ParticleCloud) -> None:
    if a.points.ndim != 2 or b.points.ndim != 2:
        raise ValueError("wasserstein2 works on single (unbatched) clouds")
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")


def _w2sq_1d(x: np.ndarray, wx: np.ndarray, y: np.ndarray, wy: np.ndarray) -> float:
    """Squared W2 between weighted samples on the line via quantile functions."""
    ix, iy = np.argsort(x, kind="stable"), np.argsort(y, kind="stable")
    xs, ys = x[ix], y[iy]
    cx, cy = np.cumsum(wx[ix]), np.cumsum(wy[iy])
    cx /= cx[-1]
    cy /= cy[-1]
    breaks = np.unique(np.concatenate(([0.0], cx, cy)))
    breaks = breaks[breaks <= 1.0]
    ds = np.diff(breaks)
    mid = breaks[:-1] + 0.5 * ds
    qx = xs[np.minimum(np.searchsorted(cx, mid), xs.size - 1)]
    qy = ys[np.minimum(np.searchsorted(cy, mid), ys.size - 1)]
    return float(np.sum(ds * (qx - qy) ** 2))


def _w2sq_exact(a: ParticleCloud, b: ParticleCloud) -> float:
    cost = ((a.points[:, None, :] - b.points[None, :, :]) ** 2).sum(axis=-1)
    if a.weights is None and b.weights is None and a.n_particles == b.n_particles:
        r, c = linear_sum_assignment(cost)
        return float(cost[r, c].mean())
    n, m = cost.shape
    a_eq = np.zeros((n + m, n * m))
    for i in range(n):
        a_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        a_eq[n + j, j::m] = 1.0
    b_eq = np.concatenate([a.w, b.w])
    res = linprog(cost.ravel(), A_eq=a_eq, b_eq=b_eq, bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(max(res.fun, 0.0))


def wasserstein2_report(
    a: ParticleCloud,
    b: ParticleCloud,
    method: str = "auto",
    n_projections: int = DEFAULT_PROJECTIONS,
    seed: int = 0,
) -> W2Result:
    """W2 between two clouds, with the method that produced it.

    ``auto`` picks the quantile formula in one dimension, the exact transport
    problem when ``N*M <= EXACT_LP_LIMIT`` and sliced W2 above that.
    """
    _check_pair(a, b)
    if method == "auto":
        if a.dim == 1:
            method = "quantile"
        elif a.n_particles * b.n_particles <= EXACT_LP_LIMIT:
            method = "exact"
        else:
            method = "sliced"
    if method == "quantile":
        if a.dim != 1:
            raise ValueError("quantile method needs one-dimensional clouds")
        v = _w2sq_1d(a.points[:, 0], a.w, b.points[:, 0], b.w)
        return W2Result(float(np.sqrt(v)), "quantile")
    if method == "exact":
        return W2Result(float(np.sqrt(_w2sq_exact(a, b))), "exact")
    if method == "sliced":
        rng = substream(seed, "sliced-w2")
        dirs = rng.standard_normal((n_projections, a.dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pa, pb = a.points @ dirs.T, b.points @ dirs.T
        per = np.array([_w2sq_1d(pa[:, k], a.w, pb[:, k], b.w) for k in range(n_projections)])
        # sliced W2 is scaled by the dimension so that it matches W2 for isotropic shifts
        est = a.dim * per.mean()
        value = float(np.sqrt(est))
        se_sq = a.dim * per.std(ddof=1) / np.sqrt(n_projections) if n_projections > 1 else 0.0
        err = se_sq / (2 * value) if value > 0 else float(np.sqrt(se_sq))
        return W2Result(value, "sliced", n_projections, float(err))
    raise ValueError(f"unknown method {method!r}")


def wasserstein2(a: ParticleCloud, b: ParticleCloud, method: str = "auto") -> float:
    return wasserstein2_report(a, b, method=method).value


def moment(cloud: ParticleCloud, order: float) -> float:
    """(sum_i w_i |x_i|^p)^(1/p)."""
    if order < 1:
        raise ValueError("moment order must be >= 1")
    if cloud.points.ndim != 2:
        raise ValueError("moment works on a single cloud")
    return float(cloud.moment(order)[0])


class SkorokhodDistance(NamedTuple):
    value: float
    mode: str  # "anchored" or "identity-only"

    def __float__(self) -> float:
        return self.value


def _sup_gap(a: PiecewisePath, b: PiecewisePath, knots_a: np.ndarray, knots_b: np.ndarray) -> float:
    """sup_t |a(t) - b(delta(t))| for the piecewise-linear delta through (knots_a, knots_b)."""

    def delta(t):
        return np.interp(t, knots_a, knots_b)

    def delta_inv(s):
        return np.interp(s, knots_b, knots_a)

    bp = np.unique(np.concatenate([a.grid, delta_inv(b.grid), knots_a]))
    worst = 0.0
    for side in ("right", "left"):
        diff = a.evaluate(bp, side) - b.evaluate(delta(bp), side)
        worst = max(worst, float(np.max(np.linalg.norm(diff, axis=1))))
    return worst


def skorokhod_distance_restricted(a: PiecewisePath, b: PiecewisePath) -> SkorokhodDistance:
    """Skorokhod J1 distance over time changes that map a's jumps onto b's jumps.

    The admissible class is the identity plus the piecewise-linear time change
    sending the i-th jump time of ``a`` to the i-th jump time of ``b``.  When
    the jump counts differ only the identity is tried.
    """
    t0a, t1a = a.horizon
    t0b, t1b = b.horizon
    if abs(t0a - t0b) > 1e-12 or abs(t1a - t1b) > 1e-12:
        raise ValueError("both paths must cover the same interval [0, T]")
    ident = np.array([t0a, t1a])
    identity_value = _sup_gap(a, b, ident, ident)
    if len(a.jump_times) != len(b.jump_times):
        return SkorokhodDistance(identity_value, "identity-only")
    ka = np.array([t0a, *a.jump_times, t1a])
    kb = np.array([t0b, *b.jump_times, t1b])
    shift = float(np.max(np.abs(ka - kb)))
    anchored = shift + _sup_gap(a, b, ka, kb)
    return SkorokhodDistance(min(anchored, identity_value), "anchored")


def write_cloud_rows(writer, cloud_points: np.ndarray, weights: np.ndarray, time: float) -> None:
    for i, (x, w) in enumerate(zip(cloud_points, weights)):
        writer.writerow([f"{time:.17g}", i, *(f"{v:.17g}" for v in x), f"{w:.17g}"])


def write_cloud_csv(path: str | Path, cloud: ParticleCloud, time: float = 0.0) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["time", "index", *(f"x{k}" for k in range(cloud.dim)), "weight"])
        write_cloud_rows(wr, cloud.points, cloud.w, time)


def write_flow_csv(path: str | Path, flow: MeasureFlow) -> None:
    """One row per particle per node; left limits at jump nodes are not written."""
    w = flow.cloud(0).w
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["time", "index", *(f"x{k}" for k in range(flow.clouds.shape[2])), "weight"])
        for j, t in enumerate(flow.times):
            write_cloud_rows(wr, flow.clouds[j], w, t)


def read_cloud_csv(path: str | Path) -> dict[float, ParticleCloud]:
    rows: dict[float, list[list[float]]] = {}
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        next(rd)
        for row in rd:
            rows.setdefault(float(row[0]), []).append([float(v) for v in row[2:]])
    out = {}
    for t, rr in rows.items():
        arr = np.array(rr)
        w = arr[:, -1]
        uniform = np.allclose(w, 1.0 / w.size, rtol=0, atol=1e-15)
        out[t] = ParticleCloud(arr[:, :-1], None if uniform else w / w.sum())
    return out


__all__ = [
    "ParticleCloud",
    "MeasureFlow",
    "PiecewisePath",
    "W2Result",
    "SkorokhodDistance",
    "wasserstein2",
    "wasserstein2_report",
    "moment",
    "skorokhod_distance_restricted",
    "write_cloud_csv",
    "write_flow_csv",
    "read_cloud_csv",
]
