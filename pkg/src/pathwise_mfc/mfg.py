"""Pathwise mean-field games: best response, fixed-point iteration, assembly."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .dynamics import simulate
from .kernels import ControlKernel
from .measures import MeasureFlow
from .model import Problem
from .noise import PointPath, sample_point_paths
from .optimizer import OptConfig, evaluate_control, optimize_pathwise
from .parallel import parallel_map
from .rng import substream


@dataclass(frozen=True)
class IterConfig:
    """Fixed-point settings.

    ``scheme='picard'`` mixes a fraction ``damping`` of new particles into the
    flow at every iteration; ``'fictitious'`` uses fraction 1/(k+2) instead.
    Convergence needs the flow residual below ``tol`` and exploitability below
    ``max(exploit_rel * |value|, exploit_se * SE)``.
    """

    max_iters: int = 8
    damping: float = 1.0
    tol: float = 0.02
    n_particles: int = 4000
    exploit_rel: float = 0.02
    exploit_se: float = 3.0
    consistency_tol: float = 0.05
    scheme: str = "picard"
    opt: OptConfig = field(default_factory=OptConfig)

    def __post_init__(self) -> None:
        if self.max_iters < 1 or self.n_particles < 2:
            raise ValueError("max_iters >= 1 and n_particles >= 2 required")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        if self.scheme not in ("picard", "fictitious"):
            raise ValueError("scheme must be 'picard' or 'fictitious'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["opt"] = self.opt.to_dict()
        return d


@dataclass
class MfeResult:
    flow: MeasureFlow
    kernel: ControlKernel
    residual_history: list[float]
    exploitability: float
    exploitability_se: float
    value: float
    value_se: float
    converged: bool
    iterations: int
    consistency_w2: float | None = None
    path: PointPath | None = None

    def summary(self) -> dict:
        return {
            "residual_history": self.residual_history,
            "exploitability": self.exploitability,
            "exploitability_se": self.exploitability_se,
            "value": self.value,
            "value_se": self.value_se,
            "converged": self.converged,
            "iterations": self.iterations,
            "consistency_w2": self.consistency_w2,
        }


@dataclass
class StrongMfeEstimate:
    paths: list[PointPath]
    per_path: list[MfeResult]
    digest: str
    distinct_solves: int

    @property
    def converged_fraction(self) -> float:
        return float(np.mean([r.converged for r in self.per_path])) if self.per_path else 0.0


def _flow_w2(a: MeasureFlow, b: MeasureFlow) -> float:
    from .verify import node_w2

    d = node_w2(a.clouds, b.clouds)
    if a.jump_nodes.size:
        d = np.concatenate([d, node_w2(a.left_limits, b.left_limits)])
    return float(d.max())


def best_response_result(problem, path, frozen_flow, opt_config, seed=0, *, index=0, init_kernel=None):
    return optimize_pathwise(problem, path, opt_config, seed, index=index, mode="frozen", frozen=frozen_flow,
                             init_kernel=init_kernel)


def best_response(
    problem: Problem, path: PointPath | None, frozen_flow: MeasureFlow, opt_config: OptConfig, seed: int = 0, *,
    index: int = 0, init_kernel: ControlKernel | None = None,
) -> tuple[ControlKernel, float]:
    """Optimal kernel when every measure argument is read from ``frozen_flow``."""
    r = best_response_result(problem, path, frozen_flow, opt_config, seed, index=index, init_kernel=init_kernel)
    return r.kernel, r.value


def exploitability(
    problem: Problem, path: PointPath | None, flow: MeasureFlow, kernel: ControlKernel, opt_config: OptConfig,
    seed: int = 0, *, index: int = 0,
) -> tuple[float, float, float]:
    """Cost of ``kernel`` against ``flow`` minus a fresh best response, with paired SE.

    Returns ``(gap, se, cost_of_kernel)``; both costs use the same eval stream.
    """
    own = evaluate_control(problem, path, kernel, opt_config.step, opt_config.n_eval, seed, index,
                           mode="frozen", frozen=flow)
    br = best_response_result(problem, path, flow, opt_config, seed, index=index)
    d = own - br.eval_costs
    return float(d.mean()), float(d.std(ddof=1) / np.sqrt(d.size)), float(own.mean())


def _induced_flow(problem, path, kernel, cfg: IterConfig, seed, index, frozen=None, stream="mfe-flow") -> MeasureFlow:
    mode = "self" if frozen is None else "frozen"
    flow, _ = simulate(problem, [path], kernel, cfg.opt.step, cfg.n_particles, seed, stream=stream, indices=[index],
                       mode=mode, frozen=frozen, init_stream="mfe-flow")[0]
    return flow


def _mix(old: MeasureFlow, new: MeasureFlow, theta: float, rng: np.random.Generator) -> MeasureFlow:
    if theta >= 1:
        return new
    take = rng.random(old.n_particles) < theta
    clouds = np.where(take[None, :, None], new.clouds, old.clouds)
    lefts = np.where(take[None, :, None], new.left_limits, old.left_limits)
    return MeasureFlow(old.times, clouds, old.jump_nodes, lefts)


def solve_pathwise_mfe(
    problem: Problem, path: PointPath | None, iter_config: IterConfig, seed: int = 0, *, index: int = 0,
) -> MfeResult:
    """Damped fixed point mu -> law of the best response against mu.

    All iterations share the initial particles and Brownian increments, so the
    residual measures movement of the map, not resampling noise.
    """
    cfg = iter_config
    layout = cfg.opt.layout(problem, path)
    kernel = layout.dirac(layout.midpoint_index())
    flow = _induced_flow(problem, path, kernel, cfg, seed, index)
    history: list[float] = []
    flow_ok = False
    it = 0
    for it in range(1, cfg.max_iters + 1):
        kernel, _ = best_response(problem, path, flow, cfg.opt, seed, index=index, init_kernel=kernel)
        new = _induced_flow(problem, path, kernel, cfg, seed, index, frozen=flow)
        theta = cfg.damping if cfg.scheme == "picard" else 1.0 / (it + 1)
        mixed = _mix(flow, new, theta, substream(seed, f"mfe-mix/{it}", index))
        history.append(_flow_w2(mixed, flow))
        flow = mixed
        if not problem.mean_field_dependent or history[-1] <= cfg.tol:
            flow_ok = True
            break
    gap, se, value = exploitability(problem, path, flow, kernel, cfg.opt, seed, index=index)
    value_se = float(evaluate_control(problem, path, kernel, cfg.opt.step, cfg.opt.n_eval, seed, index,
                                      mode="frozen", frozen=flow).std(ddof=1) / np.sqrt(cfg.opt.n_eval))
    exploit_ok = gap <= max(cfg.exploit_rel * abs(value), cfg.exploit_se * se)
    return MfeResult(flow, kernel, history, gap, se, value, value_se, bool(flow_ok and exploit_ok), it, path=path)


def consistency_w2(problem: Problem, path: PointPath | None, result: MfeResult, cfg: IterConfig, seed: int,
                   index: int = 0) -> float:
    """Sup-node W2 between the MFE flow and an independent re-simulation under its kernel."""
    resim = _induced_flow(problem, path, result.kernel, cfg, seed, index, frozen=result.flow, stream="mfe-check")
    return _flow_w2(resim, result.flow)


def _mfe_job(args):
    problem, path, cfg, seed, index = args
    r = solve_pathwise_mfe(problem, path, cfg, seed, index=index)
    r.consistency_w2 = consistency_w2(problem, path, r, cfg, seed, index)
    return r


def assemble_strong_mfe(
    problem: Problem, n_paths: int, iter_config: IterConfig, seed: int = 0, *, workers: int = 1,
    paths: Sequence[PointPath] | None = None,
) -> StrongMfeEstimate:
    """One pathwise MFE per sampled jump path; identical paths are solved once."""
    paths = list(paths) if paths is not None else sample_point_paths(problem.intensity, problem.horizon, seed, n_paths)
    first: dict[str, int] = {}
    jobs = []
    for k, p in enumerate(paths):
        key = p.to_text().split("\n", 2)[-1] + repr(p.horizon)
        if key not in first:
            first[key] = len(jobs)
            jobs.append((problem, p, iter_config, seed, k))
    solved = parallel_map(_mfe_job, jobs, workers)
    per_path = []
    for p in paths:
        key = p.to_text().split("\n", 2)[-1] + repr(p.horizon)
        per_path.append(replace(solved[first[key]], path=p))
    h = hashlib.sha256()
    for p, r in zip(paths, per_path):
        h.update(p.to_text().encode())
        h.update(repr(sorted(r.summary().items())).encode())
        h.update(r.flow.clouds.tobytes())
    return StrongMfeEstimate(paths, per_path, h.hexdigest()[:16], len(jobs))


__all__ = [
    "IterConfig",
    "MfeResult",
    "StrongMfeEstimate",
    "assemble_strong_mfe",
    "best_response",
    "consistency_w2",
    "exploitability",
    "solve_pathwise_mfe",
]
