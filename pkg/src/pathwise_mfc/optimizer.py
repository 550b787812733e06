"""Cost evaluation, derivative-free kernel optimisation and LQ oracles.

The optimiser is block coordinate descent over kernel rows (one probability
vector per cell).  Rows are visited backward in time and, within a time
cell, in ascending space-cell order.  Every candidate for a row is simulated
from the cached state at the start of its time cell with the same random
numbers as the incumbent, and a change is kept only when the paired
improvement exceeds ``accept_se`` standard errors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .dynamics import (
    ControlPlan,
    LaneGrid,
    NoiseBlock,
    draw_initial,
    draw_noise,
    make_lanes,
    plan_for,
    run_engine,
    simulate,
)
from .kernels import ControlKernel, JumpHistoryPolicy, KernelLayout, make_layout, strictify
from .measures import MeasureFlow
from .model import LqParams, Problem, check_finite
from .noise import PointPath
from .rng import substream


@dataclass(frozen=True)
class OptConfig:
    step: float = 2.0**-6
    n_time_cells: int = 8
    n_space_cells: int = 16
    control_points: int = 41
    control_range: tuple[float, float] | None = (-5.0, 5.0)
    space_scale: float = 6.0
    space_centre: float | None = None
    space_std: float | None = None
    n_train: int = 1000
    n_eval: int = 2000
    restarts: int = 0
    max_sweeps: int = 4
    accept_se: float = 1.0
    steps: tuple[int, ...] = (0, 1, 2, 4, 8, 16)
    mixtures: bool = True

    def __post_init__(self) -> None:
        for name in ("step", "n_time_cells", "n_space_cells", "control_points", "n_train", "n_eval", "max_sweeps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.restarts < 0 or self.accept_se < 0:
            raise ValueError("restarts and accept_se must be nonnegative")

    def layout(self, problem: Problem, path: PointPath | None = None) -> KernelLayout:
        return make_layout(
            problem,
            self.n_time_cells,
            self.n_space_cells,
            self.control_points,
            self.control_range,
            () if path is None else path.times,
            self.space_scale,
            None if self.space_centre is None else np.atleast_1d(self.space_centre),
            None if self.space_std is None else np.atleast_1d(self.space_std),
        )

    def refined(self) -> OptConfig:
        """Twice the space cells and control-grid resolution."""
        return replace(self, n_space_cells=2 * self.n_space_cells, control_points=2 * self.control_points - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["steps"] = list(self.steps)
        d["control_range"] = None if self.control_range is None else list(self.control_range)
        return d


# --------------------------------------------------------------------------- costs
def trapezoid_weights(times: np.ndarray) -> np.ndarray:
    dt = np.diff(times)
    w = np.zeros_like(times)
    w[:-1] += 0.5 * dt
    w[1:] += 0.5 * dt
    return w


def kernel_expectation(fn: Callable, kernel: ControlKernel, t: float, x: np.ndarray, mu) -> np.ndarray:
    """Per-particle integral of ``fn(t, x, mu, u)`` against ``kernel(t, x, du)``.

    ``fn`` returns one value per particle; the integral runs over the grid
    points charged by any particle's vector.
    """
    p = kernel.probs(t, x)
    cols = np.flatnonzero(p.max(axis=0) > 0)
    out = np.zeros(x.shape[0])
    for c in cols:
        u = np.broadcast_to(kernel.control_grid[c], (x.shape[0], kernel.control_grid.shape[1]))
        out += p[:, c] * fn(t, x, mu, u)
    return out


def evaluate_cost(
    flow: MeasureFlow, kernel: ControlKernel, problem: Problem, mean_field: MeasureFlow | None = None
) -> float:
    """Trapezoid-in-time integral of the kernel-averaged running cost over the flow.

    Jump nodes use the right-limit cloud.  ``mean_field`` supplies the
    measure argument when it differs from the flow itself (game setting).
    """
    if kernel.time_edges[0] > flow.times[0] or kernel.time_edges[-1] < flow.times[-1]:
        raise ValueError("kernel time cells do not cover the flow grid")
    if mean_field is not None and not np.array_equal(mean_field.times, flow.times):
        raise ValueError("mean-field flow grid differs from the flow grid")
    w = trapezoid_weights(flow.times)
    total = 0.0
    for j, t in enumerate(flow.times):
        cloud = flow.cloud(j)
        mu = cloud if mean_field is None else mean_field.cloud(j)
        vals = kernel_expectation(problem.running_cost, kernel, float(t), cloud.points, mu)
        check_finite("running_cost", vals, t=t)
        total += w[j] * float(cloud.expect(vals))
    return total


# --------------------------------------------------------------------------- oracles
@dataclass(frozen=True)
class RiccatiSolution:
    """Backward solution on a fine grid; at jump times two entries (left, right)."""

    times: np.ndarray
    P: np.ndarray
    H: np.ndarray
    L: np.ndarray
    b_gain: float
    cost_r: float

    def _at(self, arr: np.ndarray, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.times.size - 2)
        t0, t1 = self.times[k], self.times[k + 1]
        frac = np.where(t1 > t0, (t - t0) / np.where(t1 > t0, t1 - t0, 1.0), 0.0)
        return arr[k] + frac * (arr[k + 1] - arr[k])

    def p_at(self, t) -> np.ndarray:
        return self._at(self.P, t)

    def h_at(self, t) -> np.ndarray:
        return self._at(self.H, t)

    def feedback(self, t: float, x: np.ndarray) -> np.ndarray:
        """Optimal control -(b/r)(P x + H)."""
        return -(self.b_gain / self.cost_r) * (self.p_at(t) * x + self.h_at(t))


def _rk4(f, y, t, h):
    k1 = f(t, y)
    k2 = f(t + h / 2, y + h / 2 * k1)
    k3 = f(t + h / 2, y + h / 2 * k2)
    k4 = f(t + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _solve_backward(rhs, jump_map, horizon: float, jump_times: np.ndarray, y_T: np.ndarray, h_max: float):
    """Integrate y' = rhs(t, y) from T to 0, applying jump_map at each jump time.

    Returns the (increasing) time grid and states, with the right value listed
    after the left value at each jump time.
    """
    cuts = [horizon] + [float(t) for t in jump_times[::-1]] + [0.0]
    ts, ys = [horizon], [y_T.copy()]
    y = y_T.copy()
    for a, b in zip(cuts[:-1], cuts[1:]):
        n = max(1, int(np.ceil((a - b) / h_max)))
        h = (a - b) / n
        for i in range(n):
            t = a - i * h
            y = _rk4(rhs, y, t, -h)
            if not np.all(np.isfinite(y)) or np.max(np.abs(y)) > 1e12:
                raise ValueError(f"Riccati solution blows up near t={t - h:.6g}; parameters rejected")
            ts.append(a - (i + 1) * h if i < n - 1 else b)
            ys.append(y.copy())
        if b > 0:
            y = jump_map(y)
            ts.append(b)
            ys.append(y.copy())
    order = np.arange(len(ts))[::-1]
    return np.array(ts)[order], np.array(ys)[order]


def tracking_riccati_oracle(
    params: LqParams,
    path: PointPath,
    horizon: float,
    initial_mean: float,
    initial_std: float,
    coupling: float = 0.0,
    target_mean: Callable[[float], float] | None = None,
    h_max: float = 1e-3,
) -> tuple[float, RiccatiSolution]:
    """LQ value with state cost q (x - s mbar(t))^2 for a given mean path mbar.

    V(t, x) = P x^2 + 2 H x + L with P as in the plain regulator,
    H' = -a H + (b^2/r) P H + q s mbar, L' = (b^2/r) H^2 - sigma^2 P - q s^2 mbar^2,
    and at a jump P(t-) = (1+c)^2 P(t), H(t-) = (1+c) H(t), L continuous.
    """
    a, bg, sg, c = params.a, params.b_gain, params.sigma, params.jump_scale
    q, r, s = params.cost_q, params.cost_r, coupling
    k = bg * bg / r
    mbar = target_mean or (lambda t: 0.0)

    def rhs(t, y):
        P, H, _ = y
        m = float(mbar(t)) if s else 0.0
        return np.array([-2 * a * P + k * P * P - q, -a * H + k * P * H + q * s * m, k * H * H - sg * sg * P - q * s * s * m * m])

    def jump_map(y):
        return np.array([(1 + c) ** 2 * y[0], (1 + c) * y[1], y[2]])

    ts, ys = _solve_backward(rhs, jump_map, horizon, np.asarray(path.times), np.zeros(3), h_max)
    P0, H0, L0 = ys[0]
    value = P0 * (initial_mean**2 + initial_std**2) + 2 * H0 * initial_mean + L0
    return float(value), RiccatiSolution(ts, ys[:, 0], ys[:, 1], ys[:, 2], bg, r)


def riccati_oracle(
    params: LqParams, path: PointPath, horizon: float, initial_mean: float, initial_std: float, h_max: float = 1e-3
) -> tuple[float, RiccatiSolution]:
    """Optimal LQ cost for a frozen jump path and the gain trajectory -(b/r) P(t)."""
    return tracking_riccati_oracle(params, path, horizon, initial_mean, initial_std, 0.0, None, h_max)


def adapted_riccati_value(params: LqParams, rate: float, horizon: float, initial_mean: float, initial_std: float) -> float:
    """Optimal cost over controls that only see the past of the jumps.

    The jump term enters the Riccati equation through its compensator:
    P' = -2aP + (b^2/r)P^2 - q - rate((1+c)^2 - 1) P.
    """
    a, bg, sg, c = params.a, params.b_gain, params.sigma, params.jump_scale
    k = bg * bg / params.cost_r
    lam = rate * ((1 + c) ** 2 - 1)

    def rhs(t, y):
        P, _ = y
        return np.array([-2 * a * P + k * P * P - params.cost_q - lam * P, -sg * sg * P])

    _, ys = _solve_backward(rhs, lambda y: y, horizon, np.zeros(0), np.zeros(2), 1e-3)
    return float(ys[0, 0] * (initial_mean**2 + initial_std**2) + ys[0, 1])


def riccati_kernel(sol: RiccatiSolution, layout: KernelLayout) -> ControlKernel:
    """Dirac kernel selecting the grid control nearest to the oracle feedback."""
    return ControlKernel.from_feedback(sol.feedback, layout.time_edges, layout.space_edges, layout.control_grid)


# --------------------------------------------------------------------------- descent
@dataclass
class DescentStats:
    sweeps: int = 0
    accepted: int = 0
    evaluated: int = 0
    converged: bool = False
    objective: list[float] = field(default_factory=list)
    improvements: list[dict] = field(default_factory=list)
    accepted_per_sweep: list[int] = field(default_factory=list)


def _candidate_vectors(vec: np.ndarray, grid: np.ndarray, steps: Sequence[int], mixtures: bool) -> np.ndarray:
    n_u = grid.shape[0]
    mean_u = vec @ grid
    c = int(np.argmin(((grid - mean_u) ** 2).sum(axis=1)))
    idx: list[int] = []
    if grid.shape[1] == 1:
        for s in steps:
            for sgn in (1, -1):
                idx.append(min(max(c + sgn * s, 0), n_u - 1))
    else:
        spacing = [np.diff(np.unique(grid[:, a])) for a in range(grid.shape[1])]
        h = np.array([sp.min() if sp.size else 1.0 for sp in spacing])
        idx.append(c)
        for s in steps:
            for a in range(grid.shape[1]):
                for sgn in (1, -1):
                    target = grid[c].copy()
                    target[a] += sgn * s * h[a]
                    idx.append(int(np.argmin(((grid - target) ** 2).sum(axis=1))))
    cands = []
    for i in sorted(set(idx)):
        v = np.zeros(n_u)
        v[i] = 1.0
        cands.append(v)
    if mixtures and grid.shape[1] == 1:
        for nb in (c - 1, c + 1):
            if 0 <= nb < n_u:
                v = np.zeros(n_u)
                v[c] = v[nb] = 0.5
                cands.append(v)
    cands = [v for v in cands if not np.array_equal(v, vec)]
    return np.array(cands) if cands else np.zeros((0, n_u))


class _Descent:
    """Coordinate descent state for one simulation layout."""

    def __init__(self, problem, lanes: LaneGrid, plan: ControlPlan, x0, noise: NoiseBlock, cfg: OptConfig, mode, frozen):
        self.problem, self.lanes, self.plan = problem, lanes, plan
        self.x0, self.noise, self.cfg = x0, noise, cfg
        self.mode, self.frozen = mode, frozen
        self.B, self.N = x0.shape[:2]
        self.flat = mode == "frozen" or not problem.mean_field_dependent
        self.lane_of = np.arange(self.B)[:, None]
        self.stats = DescentStats()
        self._full_run()

    def _full_run(self) -> None:
        out = run_engine(self.problem, self.lanes, self.plan, self.x0, self.noise, self.lane_of,
                         mode=self.mode, frozen=self.frozen, record_rows=True)
        self.states, self.rows, self.cost_before, self.cost = out.states, out.rows, out.cost_before, out.cost

    def _rerun_from(self, j0: int) -> None:
        out = run_engine(self.problem, self.lanes, self.plan, self.states[j0], self.noise, self.lane_of,
                         start=j0, mode=self.mode, frozen=self.frozen, prefix_cost=self.cost_before[j0],
                         record_rows=True)
        self.states[j0:], self.rows[j0:], self.cost_before[j0:] = out.states, out.rows, out.cost_before
        self.cost = out.cost

    @property
    def objective(self) -> float:
        return float(self.cost.mean())

    def _groups(self) -> list[tuple[int, int, int]]:
        """(start node, end node, base row) per block of rows sharing a time cell and key."""
        rb = self.plan.row_base
        out = []
        for v in np.unique(rb):
            nodes = np.flatnonzero((rb == v).any(axis=0))
            out.append((int(nodes[0]), int(nodes[-1]) + 1, int(v)))
        out.sort(key=lambda g: (-g[0], g[2]))
        return out

    def _try_row(self, r: int, j0: int, j1: int) -> bool:
        seg = self.rows[j0:j1]
        mask = (seg == r).any(axis=0)
        if not mask.any():
            return False
        cands = _candidate_vectors(self.plan.tables[r], self.plan.control_grid, self.cfg.steps, self.cfg.mixtures)
        if cands.shape[0] == 0:
            return False
        C, Q = cands.shape[0], self.plan.tables.shape[0]
        ext = self.plan.extended(cands)
        if self.flat:
            b_idx, i_idx = np.nonzero(mask)
            P = b_idx.size
            x = np.tile(self.states[j0][b_idx, i_idx], (C, 1))[None]
            lane_of = np.tile(b_idx, C)[None]
            prefix = np.tile(self.cost_before[j0][b_idx, i_idx], C)[None]
            noise = self.noise.subset(b_idx, i_idx, j0).tile(C)
            repl = (Q + np.repeat(np.arange(C), P))[None]
            out = run_engine(self.problem, self.lanes, ext, x, noise, lane_of, start=j0, mode=self.mode,
                             frozen=self.frozen, prefix_cost=prefix, record_states=False, override=(r, repl))
            delta = out.cost.reshape(C, P) - self.cost[b_idx, i_idx][None]
        else:
            x = np.tile(self.states[j0], (C, 1, 1))
            lane_of = np.tile(self.lane_of, (C, 1))
            prefix = np.tile(self.cost_before[j0], (C, 1))
            noise = NoiseBlock(np.tile(self.noise.dW[:, :, j0:], (C, 1, 1, 1)), np.tile(self.noise.uniforms[:, :, j0:], (C, 1, 1)))
            repl = np.repeat(Q + np.arange(C), self.B)[:, None] * np.ones((1, self.N), dtype=np.int64)
            out = run_engine(self.problem, self.lanes, ext, x, noise, lane_of, start=j0, mode=self.mode,
                             frozen=self.frozen, prefix_cost=prefix, record_states=False, override=(r, repl))
            delta = (out.cost.reshape(C, self.B, self.N) - self.cost[None]).reshape(C, -1)
        self.stats.evaluated += C
        total = self.B * self.N
        mean = delta.sum(axis=1) / total
        var = np.maximum((delta**2).sum(axis=1) / total - mean**2, 0.0)
        se = np.sqrt(var / max(total - 1, 1))
        best = int(np.argmin(mean))
        if mean[best] < 0 and -mean[best] > self.cfg.accept_se * se[best]:
            self.plan.set_row(r, cands[best])
            self._rerun_from(j0)
            self.stats.accepted += 1
            self.stats.improvements.append(
                {"row": r, "improvement": float(-mean[best]), "se": float(se[best]), "objective": self.objective}
            )
            self.stats.objective.append(self.objective)
            return True
        return False

    def run(self) -> DescentStats:
        st = self.stats
        st.objective.append(self.objective)
        C = self.plan.n_space
        for _ in range(self.cfg.max_sweeps):
            st.sweeps += 1
            acc = 0
            for j0, j1, base in self._groups():
                for r in range(base, base + C):
                    acc += self._try_row(r, j0, j1)
            st.accepted_per_sweep.append(acc)
            if acc == 0:
                st.converged = True
                break
        return st


# --------------------------------------------------------------------------- solves
@dataclass
class PathwiseSolveResult:
    kernel: ControlKernel
    value: float
    value_se: float
    diagnostics: dict
    eval_costs: np.ndarray = field(repr=False, default=None)

    @property
    def stalled(self) -> bool:
        return bool(self.diagnostics.get("stalled", False))


def _layout_kernels(layout: KernelLayout, restarts: int, seed: int, init: ControlKernel | None):
    starts = [init if init is not None else layout.dirac(layout.midpoint_index())]
    for r in range(restarts):
        starts.append(ControlKernel.random(layout.time_edges, layout.space_edges, layout.control_grid, substream(seed, "restart", r)))
    return starts


def evaluate_control(
    problem: Problem,
    path: PointPath | None,
    control: ControlKernel | JumpHistoryPolicy,
    step: float,
    n: int,
    seed: int,
    index: int = 0,
    stream: str = "eval",
    mode: str = "self",
    frozen: MeasureFlow | None = None,
) -> np.ndarray:
    """Per-particle realised costs on an evaluation stream."""
    _, ens = simulate(problem, [path], control, step, n, seed, stream=stream, indices=[index], mode=mode, frozen=frozen)[0]
    return ens.costs


def _mean_se(c: np.ndarray) -> tuple[float, float]:
    return float(c.mean()), float(c.std(ddof=1) / np.sqrt(c.size)) if c.size > 1 else 0.0


def optimize_pathwise(
    problem: Problem,
    path: PointPath | None,
    opt_config: OptConfig,
    seed: int = 0,
    *,
    index: int = 0,
    mode: str = "self",
    frozen: MeasureFlow | None = None,
    init_kernel: ControlKernel | None = None,
    layout: KernelLayout | None = None,
) -> PathwiseSolveResult:
    """Optimise a feedback kernel for one frozen jump path.

    Training uses the ``train`` random streams, the reported value an
    independent ``eval`` stream (both indexed by ``index``).
    """
    cfg = opt_config
    layout = layout or cfg.layout(problem, path)
    if init_kernel is not None and not (
        np.array_equal(init_kernel.time_edges, layout.time_edges)
        and all(np.array_equal(a, b) for a, b in zip(init_kernel.space_edges, layout.space_edges))
    ):
        raise ValueError("initial kernel does not match the cell layout")
    lanes = make_lanes([path], problem.horizon, cfg.step, problem.intensity.mark_dim)
    x0 = draw_initial(problem, cfg.n_train, seed, "train", [index])
    noise = draw_noise(lanes, cfg.n_train, problem.dim_noise, seed, "train", [index])
    best = None
    runs = []
    for k, start in enumerate(_layout_kernels(layout, cfg.restarts, seed, init_kernel)):
        plan = plan_for(start, lanes)
        d = _Descent(problem, lanes, plan, x0, noise, cfg, mode, frozen)
        initial = d.objective
        st = d.run()
        runs.append({"start": k, "initial_objective": initial, "objective": d.objective, "sweeps": st.sweeps,
                     "accepted": st.accepted, "converged": st.converged})
        if best is None or d.objective < best[0]:
            best = (d.objective, start.with_table(plan.tables.reshape(start.table.shape)), st)
    objective, kernel, st = best
    costs = evaluate_control(problem, path, kernel, cfg.step, cfg.n_eval, seed, index, mode=mode, frozen=frozen)
    value, se = _mean_se(costs)
    diag = {
        "sweeps": st.sweeps,
        "accepted": st.accepted,
        "evaluated": st.evaluated,
        "converged": st.converged,
        "stalled": not st.converged,
        "train_objective": objective,
        "objective_history": st.objective,
        "accepted_per_sweep": st.accepted_per_sweep,
        "improvements": st.improvements,
        "restarts": runs,
    }
    return PathwiseSolveResult(kernel, value, se, diag, costs)


@dataclass
class PolicySolveResult:
    policy: JumpHistoryPolicy
    value: float
    value_se: float
    path_values: np.ndarray
    path_ses: np.ndarray
    diagnostics: dict
    eval_costs: list[np.ndarray] = field(repr=False, default_factory=list)


@dataclass(frozen=True)
class PolicyConfig:
    jump_cap: int = 1
    n_buckets: int = 1
    n_train_per_path: int = 200

    def __post_init__(self) -> None:
        if self.jump_cap < 0 or self.n_buckets < 1 or self.n_train_per_path < 1:
            raise ValueError("invalid policy configuration")


def optimize_policy(
    problem: Problem,
    paths: Sequence[PointPath],
    opt_config: OptConfig,
    policy_config: PolicyConfig,
    seed: int = 0,
    init: JumpHistoryPolicy | None = None,
) -> PolicySolveResult:
    """Optimise a jump-history policy jointly over the given common-noise paths.

    Path k trains on stream index k and is evaluated on the ``eval`` stream
    with index k, so results pair with per-path solves of the same paths.
    """
    cfg = opt_config
    layout = cfg.layout(problem, None)
    if init is None:
        init = JumpHistoryPolicy.uniform_from(layout.dirac(layout.midpoint_index()), policy_config.jump_cap,
                                              policy_config.n_buckets, problem.horizon)
    lanes = make_lanes(list(paths), problem.horizon, cfg.step, problem.intensity.mark_dim)
    idx = list(range(len(paths)))
    n = policy_config.n_train_per_path
    x0 = draw_initial(problem, n, seed, "train", idx)
    noise = draw_noise(lanes, n, problem.dim_noise, seed, "train", idx)
    plan = plan_for(init, lanes)
    d = _Descent(problem, lanes, plan, x0, noise, cfg, "self", None)
    st = d.run()
    block = init.kernels[0].table.size // init.kernels[0].n_controls
    shape = init.kernels[0].table.shape
    kernels = [init.kernels[q].with_table(plan.tables[q * block:(q + 1) * block].reshape(shape)) for q in range(len(init.kernels))]
    policy = init.with_kernels(kernels)
    costs = [evaluate_control(problem, p, policy, cfg.step, cfg.n_eval, seed, k) for k, p in enumerate(paths)]
    vals = np.array([c.mean() for c in costs])
    ses = np.array([c.std(ddof=1) / np.sqrt(c.size) for c in costs])
    value = float(vals.mean())
    se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else float(ses[0])
    diag = {"sweeps": st.sweeps, "accepted": st.accepted, "converged": st.converged, "stalled": not st.converged,
            "train_objective": d.objective, "objective_history": st.objective,
            "accepted_per_sweep": st.accepted_per_sweep}
    return PolicySolveResult(policy, value, se, vals, ses, diag, costs)


__all__ = [
    "OptConfig",
    "PathwiseSolveResult",
    "PolicyConfig",
    "PolicySolveResult",
    "RiccatiSolution",
    "adapted_riccati_value",
    "evaluate_control",
    "evaluate_cost",
    "kernel_expectation",
    "optimize_pathwise",
    "optimize_policy",
    "riccati_kernel",
    "riccati_oracle",
    "strictify",
    "tracking_riccati_oracle",
    "trapezoid_weights",
]
