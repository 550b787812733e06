"""Particle propagation for a frozen jump path.

Between jumps particles follow Euler-Maruyama steps under a relaxed feedback
kernel; at jump nodes the left limit is stored and the jump map applied.

Several jump paths can be simulated together ("lanes").  Lanes are padded
with zero-length steps so that every base time step occupies the same node
range in every lane; padding steps draw no noise, so a lane simulated alone
and inside a batch sees identical random numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .kernels import ControlKernel, JumpHistoryPolicy, space_cell_index
from .measures import MeasureFlow, ParticleCloud, PiecewisePath
from .model import CoefficientError, Problem, check_finite
from .noise import PointPath, sample_point_path
from .rng import substream


class SimulationError(RuntimeError):
    pass


# --------------------------------------------------------------------------- grids
@dataclass(frozen=True, eq=False)
class SimGrid:
    """Uniform nodes of spacing <= step_hint plus every jump time of the path."""

    times: np.ndarray
    jump_nodes: np.ndarray
    marks: np.ndarray
    step_hint: float

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def jump_times(self) -> np.ndarray:
        return self.times[self.jump_nodes]


def n_base_steps(horizon: float, step_hint: float) -> int:
    if not step_hint > 0:
        raise ValueError("step_hint must be positive")
    return max(1, int(np.ceil(horizon / step_hint - 1e-9)))


def make_grid(horizon: float, step_hint: float, path: PointPath | None = None) -> SimGrid:
    base = np.linspace(0.0, horizon, n_base_steps(horizon, step_hint) + 1)
    if path is None or path.n_events == 0:
        return SimGrid(base, np.zeros(0, dtype=int), np.zeros((0, 1)), step_hint)
    if path.horizon != horizon:
        raise ValueError("path horizon differs from the simulation horizon")
    times = np.union1d(base, path.times)
    return SimGrid(times, np.searchsorted(times, path.times), np.array(path.marks), step_hint)


@dataclass(frozen=True, eq=False)
class LaneGrid:
    """Padded node layout for one or more jump paths (shape ``(L, S+1)``)."""

    times: np.ndarray
    jump: np.ndarray
    marks: np.ndarray
    pad: np.ndarray
    real_step: np.ndarray
    grids: tuple[SimGrid, ...]
    base_nodes: np.ndarray

    @property
    def n_lanes(self) -> int:
        return self.times.shape[0]

    @property
    def n_steps(self) -> int:
        return self.times.shape[1] - 1

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.times, axis=1)

    @property
    def weights(self) -> np.ndarray:
        """Trapezoid weights 0.5 (dt_{j-1} + dt_j) per node."""
        dt = self.dts
        w = np.zeros_like(self.times)
        w[:, :-1] += 0.5 * dt
        w[:, 1:] += 0.5 * dt
        return w


def make_lanes(paths: Sequence[PointPath | None], horizon: float, step_hint: float, mark_dim: int = 1) -> LaneGrid:
    S0 = n_base_steps(horizon, step_hint)
    base = np.linspace(0.0, horizon, S0 + 1)
    L = len(paths)
    grids = tuple(make_grid(horizon, step_hint, p) for p in paths)
    on_base: list[dict[int, np.ndarray]] = []
    inside: list[list[list[tuple[float, np.ndarray]]]] = []
    for p in paths:
        ob, ins = {}, [[] for _ in range(S0)]
        if p is not None:
            if p.n_events:
                mark_dim = p.marks.shape[1]
            for t, z in zip(p.times, p.marks):
                k = int(np.searchsorted(base, t))
                if k <= S0 and base[k] == t:
                    ob[k] = z
                else:
                    ins[k - 1].append((float(t), z))
        on_base.append(ob)
        inside.append(ins)
    width = [max(len(inside[l][k]) for l in range(L)) for k in range(S0)]
    n_nodes = S0 + 1 + sum(width)
    times = np.zeros((L, n_nodes))
    jump = np.zeros((L, n_nodes), dtype=bool)
    pad = np.zeros((L, n_nodes), dtype=bool)
    marks = np.zeros((L, n_nodes, mark_dim))
    base_nodes = np.zeros(S0 + 1, dtype=int)
    for l in range(L):
        j = 0
        for k in range(S0 + 1):
            base_nodes[k] = j
            times[l, j] = base[k]
            if k in on_base[l]:
                jump[l, j] = True
                marks[l, j] = on_base[l][k]
            j += 1
            if k == S0:
                break
            extra = inside[l][k]
            n_pad = width[k] - len(extra)
            times[l, j : j + n_pad] = base[k]
            pad[l, j : j + n_pad] = True
            j += n_pad
            for t, z in extra:
                times[l, j] = t
                jump[l, j] = True
                marks[l, j] = z
                j += 1
    real = ~pad[:, 1:]
    real_step = np.where(real, np.cumsum(real, axis=1) - 1, -1)
    return LaneGrid(times, jump, marks, pad, real_step, grids, base_nodes)


# --------------------------------------------------------------------------- controls
def _support(tables: np.ndarray):
    """Per row: ascending support columns, their probabilities and cumulative sums."""
    nz = tables > 0
    count = nz.sum(axis=1)
    smax = int(count.max())
    order = np.argsort(~nz, axis=1, kind="stable")[:, :smax]
    idx = np.where(np.arange(smax) < count[:, None], order, order[np.arange(len(order)), count - 1][:, None])
    p = np.where(np.arange(smax) < count[:, None], np.take_along_axis(tables, idx, axis=1), 0.0)
    cum = np.cumsum(p, axis=1)
    cum[np.arange(smax)[None, :] >= count[:, None] - 1] = 1.0
    return idx, p, cum, count


class ControlPlan:
    """Stacked probability rows plus the base row used by every (lane, node).

    The row of a particle at node j is ``row_base[lane, j] + space_cell(x)``.
    """

    def __init__(self, tables: np.ndarray, row_base: np.ndarray, space_edges, control_grid: np.ndarray):
        self.tables = np.array(tables, dtype=float)
        self.row_base = np.asarray(row_base, dtype=np.int64)
        self.space_edges = tuple(space_edges)
        self.control_grid = np.asarray(control_grid, dtype=float)
        self.n_space = int(np.prod([e.size - 1 for e in self.space_edges]))
        self.refresh()

    def refresh(self) -> None:
        self.s_idx, self.s_p, self.s_cum, self.s_n = _support(self.tables)

    @property
    def all_dirac(self) -> bool:
        return bool(np.all(self.s_n == 1))

    def set_row(self, r: int, vec: np.ndarray) -> None:
        self.tables[r] = vec
        self.refresh()

    def extended(self, extra: np.ndarray) -> ControlPlan:
        """Same plan with ``extra`` rows appended (used for candidate vectors)."""
        return ControlPlan(np.vstack([self.tables, extra]), self.row_base, self.space_edges, self.control_grid)

    def copy(self) -> ControlPlan:
        return ControlPlan(self.tables.copy(), self.row_base, self.space_edges, self.control_grid)


def plan_for_kernel(kernel: ControlKernel, lanes: LaneGrid) -> ControlPlan:
    C = kernel.n_space_cells
    row_base = kernel.time_cell(lanes.times) * C
    return ControlPlan(kernel.table.reshape(-1, kernel.n_controls), row_base, kernel.space_edges, kernel.control_grid)


def plan_for_policy(policy: JumpHistoryPolicy, lanes: LaneGrid) -> ControlPlan:
    k0 = policy.kernels[0]
    block = k0.n_time_cells * k0.n_space_cells
    tcell = k0.time_cell(lanes.times) * k0.n_space_cells
    keys = np.zeros_like(tcell)
    for l, g in enumerate(lanes.grids):
        keys[l] = policy.keys_along(lanes.times[l], g.jump_times)
    tables = np.vstack([k.table.reshape(-1, k0.n_controls) for k in policy.kernels])
    return ControlPlan(tables, keys * block + tcell, k0.space_edges, k0.control_grid)


def plan_for(control: ControlKernel | JumpHistoryPolicy, lanes: LaneGrid) -> ControlPlan:
    if isinstance(control, JumpHistoryPolicy):
        return plan_for_policy(control, lanes)
    return plan_for_kernel(control, lanes)


# --------------------------------------------------------------------------- noise
@dataclass(frozen=True, eq=False)
class NoiseBlock:
    """Brownian increments ``(B, N, S, d)`` (already scaled by sqrt(dt)) and
    control uniforms ``(B, N, S)`` aligned with the padded steps."""

    dW: np.ndarray
    uniforms: np.ndarray

    def subset(self, b: np.ndarray, i: np.ndarray, start: int) -> NoiseBlock:
        return NoiseBlock(self.dW[b, i, start:][None], self.uniforms[b, i, start:][None])

    def tile(self, reps: int) -> NoiseBlock:
        return NoiseBlock(np.tile(self.dW, (1, reps, 1, 1)), np.tile(self.uniforms, (1, reps, 1)))


def stream_tags(stream: str) -> tuple[str, str, str]:
    return f"{stream}/init", f"{stream}/bm", f"{stream}/ctrl"


def draw_initial(problem: Problem, n: int, seed: int, stream: str, indices: Sequence[int]) -> np.ndarray:
    tag = stream_tags(stream)[0]
    return np.stack([problem.initial_law.sample(substream(seed, tag, int(k)), n) for k in indices])


def draw_noise(lanes: LaneGrid, n: int, d: int, seed: int, stream: str, indices: Sequence[int]) -> NoiseBlock:
    """Particle-major draws so that the first n' particles do not depend on n."""
    _, tag_bm, tag_u = stream_tags(stream)
    L, S = lanes.n_lanes, lanes.n_steps
    dW = np.zeros((L, n, S, d))
    uni = np.zeros((L, n, S))
    dts = lanes.dts
    for l, k in enumerate(indices):
        real = lanes.real_step[l] >= 0
        n_real = int(real.sum())
        z = substream(seed, tag_bm, int(k)).standard_normal((n, n_real, d))
        dW[l][:, real] = z * np.sqrt(dts[l, real])[None, :, None]
        uni[l][:, real] = substream(seed, tag_u, int(k)).random((n, n_real))
    return NoiseBlock(dW, uni)


# --------------------------------------------------------------------------- engine
@dataclass
class EngineOutput:
    states: np.ndarray | None  # (S+1-start, B, N, n)
    lefts: dict[int, np.ndarray]
    cost: np.ndarray  # (B, N)
    cost_before: np.ndarray | None  # (S+1-start, B, N)
    rows: np.ndarray | None  # (S+1-start, B, N)
    final: np.ndarray


def _cloud(x: np.ndarray) -> ParticleCloud:
    return ParticleCloud(x)


def run_engine(
    problem: Problem,
    lanes: LaneGrid,
    plan: ControlPlan,
    x: np.ndarray,
    noise: NoiseBlock,
    lane_of: np.ndarray,
    *,
    start: int = 0,
    x_is_left: bool = False,
    mode: str = "self",
    frozen: MeasureFlow | None = None,
    prefix_cost: np.ndarray | None = None,
    record_states: bool = True,
    record_rows: bool = False,
    override: tuple[int, np.ndarray] | None = None,
) -> EngineOutput:
    """Advance states ``x`` of shape ``(B, N, n)`` from node ``start`` to the end.

    ``lane_of`` (shape ``(B, 1)`` or ``(B, N)``) gives the lane of each batch
    row or particle.  Noise arrays are indexed by absolute step number and
    must cover steps ``start..S-1`` at offset ``start`` (see ``NoiseBlock.subset``)
    or the full range when their step axis has length S.
    ``mode='self'`` uses the current cloud of each batch row as the mean-field
    argument; ``mode='frozen'`` reads it from ``frozen`` (single lane only).
    """
    if mode not in ("self", "frozen"):
        raise ValueError("mode must be 'self' or 'frozen'")
    if mode == "frozen":
        if frozen is None or lanes.n_lanes != 1:
            raise ValueError("frozen mode needs a flow and a single lane")
        if frozen.times.shape != lanes.times[0].shape or not np.array_equal(frozen.times, lanes.times[0]):
            raise ValueError("frozen flow grid does not match the simulation grid")
    S = lanes.n_steps
    B, N, n = x.shape
    x = np.array(x, dtype=float)
    offs = start if noise.dW.shape[2] == S - start else 0
    if noise.dW.shape[2] not in (S, S - start):
        raise ValueError("noise does not cover the simulated steps")
    lane_of = np.asarray(lane_of)
    if lane_of.size > 1 and np.all(lane_of == lane_of.flat[0]) and lane_of.shape[0] == 1:
        lane_of = lane_of[:, :1]
    # node-major copies so that per-step slices are contiguous
    times_l = np.moveaxis(lanes.times[:, start:].T[:, lane_of], 0, 0)
    dts_l = np.diff(times_l, axis=0)
    w_l = lanes.weights[:, start:].T[:, lane_of]
    jump_l = lanes.jump[:, start:].T[:, lane_of]
    jump_any = jump_l.reshape(jump_l.shape[0], -1).any(axis=1)
    marks_l = np.moveaxis(lanes.marks[:, start:], 1, 0)[:, lane_of]
    rb_l = plan.row_base[:, start:].T[:, lane_of]
    grid = plan.control_grid
    cost = np.zeros((B, N)) if prefix_cost is None else np.array(prefix_cost, dtype=float)
    n_rec = S - start + 1
    states = np.empty((n_rec, B, N, n)) if record_states else None
    cost_before = np.empty((n_rec, B, N)) if record_rows else None
    rows_rec = np.empty((n_rec, B, N), dtype=np.int64) if record_rows else None
    lefts: dict[int, np.ndarray] = {}
    s_n, s_idx, s_p, s_cum = plan.s_n, plan.s_idx, plan.s_p, plan.s_cum

    for j in range(start, S + 1):
        jr = j - start
        tj = times_l[jr]
        if (j > start or x_is_left) and jump_any[jr]:
            lefts[j] = x.copy()
            mu_left = frozen.left_cloud(j) if mode == "frozen" else _cloud(x)
            g = check_finite("jump", problem.jump(tj, x, mu_left, marks_l[jr]), t=tj, node=j)
            x = np.where(jump_l[jr][..., None], x + g, x)
        if states is not None:
            states[j - start] = x
        mu = frozen.cloud(j) if mode == "frozen" else _cloud(x)
        rows = rb_l[jr] + space_cell_index(plan.space_edges, x)
        if override is not None:
            rows = np.where(rows == override[0], override[1], rows)
        if rows_rec is not None:
            rows_rec[j - start] = rows
            cost_before[j - start] = cost
        s = int(s_n[rows].max())
        if s == 1:
            ui = s_idx[rows, 0]
            u = grid[ui]
            fexp = problem.running_cost(tj, x, mu, u)
        else:
            sidx = s_idx[rows, :s]
            xr = np.repeat(x, s, axis=1)
            tr = np.repeat(tj, s, axis=1) if np.ndim(tj) and tj.shape[-1] == N and N > 1 else tj
            fr = problem.running_cost(tr, xr, mu, grid[sidx].reshape(B, N * s, -1)).reshape(B, N, s)
            fexp = (fr * s_p[rows, :s]).sum(axis=-1)
            if j < S:
                choice = (s_cum[rows, :s] < noise.uniforms[:, :, j - offs, None]).sum(axis=-1)
                ui = np.take_along_axis(sidx, np.minimum(choice, s - 1)[..., None], axis=-1)[..., 0]
                u = grid[ui]
        cost = cost + w_l[jr] * fexp
        if j == S:
            break
        b = problem.drift(tj, x, mu, u)
        sg = problem.diffusion(tj, x, mu, u)
        x = x + b * dts_l[jr][..., None] + np.einsum("...ik,...k->...i", sg, noise.dW[:, :, j - offs])
        if not np.all(np.isfinite(x)):
            bad = np.argwhere(~np.isfinite(x))[0]
            raise SimulationError(f"non-finite state at step {j} (t={float(np.ravel(tj)[0]):.6g}), particle {tuple(bad[:2])}")
    check_finite("running_cost", cost, start=start)
    return EngineOutput(states, lefts, cost, cost_before, rows_rec, x)


# --------------------------------------------------------------------------- path-level objects
@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """N trajectories on a common grid; ``states`` has shape ``(S+1, N, n)``.

    ``open_end`` marks a head segment whose last node holds a left limit.
    ``start_left`` is the state just before the first node when the segment
    starts with a jump.
    """

    times: np.ndarray
    states: np.ndarray
    jump_nodes: np.ndarray
    left_limits: np.ndarray
    kernel: object = None
    seed: int | None = None
    costs: np.ndarray | None = None
    open_end: bool = False
    start_left: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.states.shape[1]

    @property
    def jump_times(self) -> np.ndarray:
        return self.times[self.jump_nodes]

    def trajectory(self, i: int) -> PiecewisePath:
        return PiecewisePath(self.times, self.states[:, i], tuple(self.jump_times), self.left_limits[:, i])

    @property
    def trajectories(self) -> list[PiecewisePath]:
        return [self.trajectory(i) for i in range(self.n_paths)]

    def marginal(self, node: int) -> ParticleCloud:
        return ParticleCloud(self.states[node])


def _lane_outputs(lanes: LaneGrid, lane: int, out: EngineOutput, b: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    keep = ~lanes.pad[lane]
    nodes = np.flatnonzero(keep)
    states = out.states[nodes, b]
    jn_pad = np.flatnonzero(lanes.jump[lane])
    lefts = np.stack([out.lefts[j][b] for j in jn_pad]) if jn_pad.size else np.zeros((0,) + states.shape[1:])
    jump_nodes = np.searchsorted(nodes, jn_pad)
    return lanes.times[lane, nodes], states, jump_nodes, lefts


def simulate(
    problem: Problem,
    paths: Sequence[PointPath | None],
    control: ControlKernel | JumpHistoryPolicy,
    step_hint: float,
    n_particles: int,
    seed: int,
    *,
    stream: str = "main",
    indices: Sequence[int] | None = None,
    mode: str = "self",
    frozen: MeasureFlow | None = None,
    init_seed: int | None = None,
    init_stream: str | None = None,
    x0: np.ndarray | None = None,
) -> list[tuple[MeasureFlow, PathEnsemble]]:
    """Simulate every path as its own population; one (flow, ensemble) per path."""
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    indices = list(range(len(paths))) if indices is None else list(indices)
    lanes = make_lanes(paths, problem.horizon, step_hint, problem.intensity.mark_dim)
    plan = plan_for(control, lanes)
    if x0 is None:
        x0 = draw_initial(
            problem, n_particles, seed if init_seed is None else init_seed, init_stream or stream, indices
        )
    noise = draw_noise(lanes, n_particles, problem.dim_noise, seed, stream, indices)
    lane_of = np.arange(lanes.n_lanes)[:, None]
    out = run_engine(problem, lanes, plan, x0, noise, lane_of, mode=mode, frozen=frozen)
    res = []
    for l in range(lanes.n_lanes):
        times, states, jn, lefts = _lane_outputs(lanes, l, out, l)
        flow = MeasureFlow(times, states, jn, lefts)
        ens = PathEnsemble(times, states, jn, lefts, control, seed, out.cost[l])
        res.append((flow, ens))
    return res


def propagate_fp(
    problem: Problem,
    path: PointPath | None,
    kernel: ControlKernel | JumpHistoryPolicy,
    grid: SimGrid | float,
    n_particles: int,
    seed: int,
    **kw,
) -> tuple[MeasureFlow, PathEnsemble]:
    """Particle solution of the pathwise Fokker-Planck equation under ``kernel``."""
    step = grid.step_hint if isinstance(grid, SimGrid) else float(grid)
    if isinstance(grid, SimGrid):
        ref = make_grid(problem.horizon, step, path)
        if not np.array_equal(ref.times, grid.times):
            raise ValueError("grid does not match the path's jump times")
    if isinstance(kernel, ControlKernel) and (kernel.time_edges[0] > 0 or kernel.time_edges[-1] < problem.horizon):
        raise ValueError("kernel time cells do not cover [0, T]")
    idx = kw.pop("index", 0)
    return simulate(problem, [path], kernel, step, n_particles, seed, indices=[idx], **kw)[0]


def apply_jump(cloud: ParticleCloud, t: float, mark, mu_left: ParticleCloud, problem: Problem) -> ParticleCloud:
    x = cloud.points
    z = np.atleast_1d(np.asarray(mark, dtype=float)).reshape((1,) * (x.ndim - 1) + (-1,))
    g = check_finite("jump", problem.jump(t, x, mu_left, z), t=t, mark=mark)
    return ParticleCloud(x + g, cloud.weights)


def jump_increments(ensemble: PathEnsemble, path: PointPath, flow: MeasureFlow, problem: Problem) -> np.ndarray:
    """gamma(t_i, X_{t_i-}, mu_{t_i-}, z_i) for every jump, shape (J, N, n)."""
    jt = ensemble.jump_times
    if jt.size != path.n_events or not np.array_equal(jt, path.times):
        raise ValueError("ensemble jump nodes do not match the path")
    if not np.array_equal(flow.times, ensemble.times):
        raise ValueError("flow and ensemble grids differ")
    out = np.zeros_like(ensemble.left_limits)
    for k, (node, z) in enumerate(zip(ensemble.jump_nodes, path.marks)):
        xl = ensemble.left_limits[k]
        out[k] = check_finite("jump", problem.jump(float(jt[k]), xl, flow.left_cloud(node), z[None, :]), node=node)
    return out


def extract_continuous_part(ensemble: PathEnsemble, path: PointPath, flow: MeasureFlow, problem: Problem) -> list[PiecewisePath]:
    """Y = X minus the accumulated jump increments; continuous by construction."""
    inc = jump_increments(ensemble, path, flow, problem)
    acc = np.zeros_like(ensemble.states)
    for k, node in enumerate(ensemble.jump_nodes):
        acc[node:] += inc[k]
    y = ensemble.states - acc
    return [PiecewisePath(ensemble.times, y[:, i]) for i in range(ensemble.n_paths)]


def reconstruct(y: Sequence[PiecewisePath], ensemble: PathEnsemble, path: PointPath, flow: MeasureFlow, problem: Problem) -> np.ndarray:
    """X rebuilt from continuous parts, shape (S+1, N, n)."""
    inc = jump_increments(ensemble, path, flow, problem)
    acc = np.zeros_like(ensemble.states)
    for k, node in enumerate(ensemble.jump_nodes):
        acc[node:] += inc[k]
    return np.stack([p.values for p in y], axis=1) + acc


# --------------------------------------------------------------------------- splicing
def head_segment(ensemble: PathEnsemble, t2: float) -> PathEnsemble:
    """Restriction to [t_0, t2) whose last node stores the left limit at t2."""
    node = int(np.searchsorted(ensemble.times, t2))
    if node >= ensemble.times.size or ensemble.times[node] != t2:
        raise ValueError("t2 must be a grid node")
    jpos = int(np.searchsorted(ensemble.jump_nodes, node))
    states = ensemble.states[: node + 1].copy()
    if jpos < ensemble.jump_nodes.size and ensemble.jump_nodes[jpos] == node:
        states[node] = ensemble.left_limits[jpos]
    return PathEnsemble(
        ensemble.times[: node + 1], states, ensemble.jump_nodes[:jpos], ensemble.left_limits[:jpos],
        ensemble.kernel, ensemble.seed, open_end=True,
    )


def tail_simulator(
    problem: Problem,
    path: PointPath,
    kernel: ControlKernel,
    step_hint: float,
    flow: MeasureFlow,
    seed: int,
    t2: float,
    stream: str = "main",
    index: int = 0,
) -> Callable[[np.ndarray], PathEnsemble]:
    """Simulator for [t2, T] that starts each particle at its left limit at t2,
    applies the jump and continues against ``flow`` as the mean-field argument."""
    lanes = make_lanes([path], problem.horizon, step_hint, problem.intensity.mark_dim)
    plan = plan_for_kernel(kernel, lanes)
    start = int(np.searchsorted(lanes.times[0], t2))
    if start >= lanes.times.shape[1] or lanes.times[0, start] != t2:
        raise ValueError("t2 must be a grid node")

    def run(left_states: np.ndarray) -> PathEnsemble:
        n = left_states.shape[0]
        noise = draw_noise(lanes, n, problem.dim_noise, seed, stream, [index])
        out = run_engine(
            problem, lanes, plan, left_states[None], noise, np.zeros((1, 1), dtype=int),
            start=start, x_is_left=True, mode="frozen", frozen=flow,
        )
        times = lanes.times[0, start:]
        jn = np.flatnonzero(lanes.jump[0, start:])
        later = jn[jn > 0]
        lefts = np.stack([out.lefts[start + j][0] for j in later]) if later.size else np.zeros((0, n, problem.dim_state))
        sl = out.lefts[start][0] if 0 in jn else None
        return PathEnsemble(times, out.states[:, 0], later, lefts, kernel, seed, out.cost[0], start_left=sl)

    return run


def concatenate(
    head: PathEnsemble,
    tail_generator: Callable[[np.ndarray], PathEnsemble],
    t2: float,
    problem: Problem,
    path: PointPath,
    flow: MeasureFlow,
    tol: float = 1e-10,
) -> PathEnsemble:
    """Splice head values on [t1, t2) with tails started from each head endpoint."""
    if not head.open_end or head.times[-1] != t2:
        raise ValueError("head must be an open segment ending at t2")
    k = int(np.searchsorted(path.times, t2))
    if k >= path.n_events or path.times[k] != t2:
        raise ValueError("t2 is not a jump time of the path")
    eta = head.states[-1]
    tail = tail_generator(eta)
    if tail.times[0] != t2:
        raise ValueError("tail segment must start at t2")
    node = flow.node_of(t2)
    expected = apply_jump(ParticleCloud(eta), t2, path.marks[k], flow.left_cloud(node), problem).points
    gap = float(np.max(np.abs(tail.states[0] - expected)))
    if gap > tol:
        raise SimulationError(f"tail violates the jump condition at t2={t2}: max gap {gap:.3g}")
    times = np.concatenate([head.times[:-1], tail.times])
    states = np.concatenate([head.states[:-1], tail.states])
    n_head = head.times.size - 1
    jump_nodes = np.concatenate([head.jump_nodes, [n_head], tail.jump_nodes + n_head]).astype(int)
    lefts = np.concatenate([head.left_limits, eta[None], tail.left_limits])
    return PathEnsemble(times, states, jump_nodes, lefts, head.kernel, head.seed)


# --------------------------------------------------------------------------- common noise
@dataclass
class CommonNoiseSample:
    path: PointPath
    flow: MeasureFlow
    ensemble: PathEnsemble
    cost: float
    cost_se: float
    particle_costs: np.ndarray = field(repr=False, default=None)


def simulate_common_noise_system(
    problem: Problem,
    policy: ControlKernel | JumpHistoryPolicy,
    n_particles: int,
    n_common_paths: int,
    grid_hint: float,
    seed: int,
    *,
    paths: Sequence[PointPath] | None = None,
    stream: str = "main",
) -> list[CommonNoiseSample]:
    """One shared jump path per outer sample; each population evolves with the
    policy's kernel for its jump history.  Paths are drawn from the problem's
    intensity with the outer sample index as substream index."""
    if paths is None:
        paths = [sample_point_path(problem.intensity, problem.horizon, seed, k) for k in range(n_common_paths)]
    elif len(paths) != n_common_paths:
        raise ValueError("n_common_paths does not match the supplied paths")
    out = []
    for k, p in enumerate(paths):
        flow, ens = simulate(problem, [p], policy, grid_hint, n_particles, seed, stream=stream, indices=[k])[0]
        c = ens.costs
        se = float(c.std(ddof=1) / np.sqrt(c.size)) if c.size > 1 else 0.0
        out.append(CommonNoiseSample(p, flow, ens, float(c.mean()), se, c))
    return out


__all__ = [
    "CoefficientError",
    "CommonNoiseSample",
    "ControlPlan",
    "EngineOutput",
    "LaneGrid",
    "NoiseBlock",
    "PathEnsemble",
    "SimGrid",
    "SimulationError",
    "apply_jump",
    "concatenate",
    "draw_initial",
    "draw_noise",
    "extract_continuous_part",
    "head_segment",
    "jump_increments",
    "make_grid",
    "make_lanes",
    "plan_for",
    "plan_for_kernel",
    "plan_for_policy",
    "propagate_fp",
    "reconstruct",
    "run_engine",
    "simulate",
    "simulate_common_noise_system",
    "tail_simulator",
]
