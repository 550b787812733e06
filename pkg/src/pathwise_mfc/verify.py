"""Numerical verifiers with machine-readable reports."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dynamics import simulate
from .kernels import ControlKernel, strictify
from .measures import ParticleCloud, wasserstein2
from .model import GaussianLaw, IntensitySpec, Problem, QuadraticTestFunction, generator_values, lq_params_of
from .noise import PointPath, sample_point_paths
from .optimizer import (
    OptConfig,
    PolicyConfig,
    evaluate_control,
    evaluate_cost,
    kernel_expectation,
    optimize_pathwise,
    optimize_policy,
    riccati_oracle,
)
from .parallel import parallel_map


def digest(obj) -> str:
    text = json.dumps(obj, sort_keys=True, default=_json_default)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, PointPath):
        return o.to_text()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"cannot serialise {type(o).__name__}")


@dataclass
class VerificationReport:
    check_name: str
    inputs_digest: str
    metrics: dict
    tolerances: dict
    passed: bool
    refinement_trend: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "check_name": self.check_name,
            "inputs_digest": self.inputs_digest,
            "metrics": self.metrics,
            "tolerances": self.tolerances,
            "pass": self.passed,
            "refinement_trend": self.refinement_trend,
            "details": self.details,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default)

    def summary_line(self) -> str:
        return f"{self.check_name}: {'PASS' if self.passed else 'FAIL'}"


def _problem_tag(problem: Problem) -> dict:
    return {"name": problem.name, "params": problem.params, "rate": problem.intensity.total_rate}


def node_w2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """W2 between matching nodes of two uniform particle histories ``(S+1, N, n)``."""
    if a.shape[-1] == 1 and a.shape[1] == b.shape[1]:
        sa, sb = np.sort(a[..., 0], axis=1), np.sort(b[..., 0], axis=1)
        return np.sqrt(np.mean((sa - sb) ** 2, axis=1))
    return np.array([wasserstein2(ParticleCloud(x), ParticleCloud(y)) for x, y in zip(a, b)])


def _monotone_decreasing(values: Sequence[float]) -> bool:
    return all(b < a for a, b in zip(values[:-1], values[1:]))


# --------------------------------------------------------------------------- superposition
def check_superposition(
    problem: Problem,
    path: PointPath | None,
    kernel: ControlKernel,
    levels: Sequence[tuple[int, float]],
    seed: int,
    tol: float = 0.05,
) -> VerificationReport:
    """Flow from one run versus marginals of fresh trajectories driven by that flow.

    Both runs share initial particles and use independent Brownian noise.
    """
    if not levels:
        raise ValueError("levels must be nonempty")
    metrics_by_level = []
    for n, dt in levels:
        flow, _ = simulate(problem, [path], kernel, dt, n, seed, stream="fp")[0]
        _, ens = simulate(problem, [path], kernel, dt, n, seed, stream="recon", init_stream="fp",
                          mode="frozen", frozen=flow)[0]
        d = node_w2(ens.states, flow.clouds)
        if flow.jump_nodes.size:
            d = np.concatenate([d, node_w2(ens.left_limits, flow.left_limits)])
        metrics_by_level.append(float(d.max()))
    finest = metrics_by_level[-1]
    passed = _monotone_decreasing(metrics_by_level) if len(levels) > 1 else True
    passed = passed and finest <= tol
    return VerificationReport(
        "superposition",
        digest({"problem": _problem_tag(problem), "path": path, "levels": list(levels), "seed": seed, "kernel": kernel}),
        {"w2_sup_finest": finest, "w2_sup_by_level": metrics_by_level},
        {"w2": tol},
        bool(passed),
        {"levels": [list(l) for l in levels], "w2_sup": metrics_by_level},
    )


# --------------------------------------------------------------------------- martingale residual
def _residual_level(problem, path, kernel, n, dt, seed, phis):
    flow, ens = simulate(problem, [path], kernel, dt, n, seed, stream="mart")[0]
    times = flow.times
    dts = np.diff(times)
    out = []
    for phi in phis:
        gen = np.zeros(n)
        drift_part = 0.0
        h = phi.hessian
        for j in range(times.size - 1):
            x = flow.clouds[j]
            mu = flow.cloud(j)
            t = float(times[j])
            gen += dts[j] * kernel_expectation(lambda tt, xx, mm, uu: generator_values(problem, phi, tt, xx, mm, uu), kernel, t, x, mu)
            if np.any(h):
                bhb = kernel_expectation(
                    lambda tt, xx, mm, uu: np.einsum("...i,ij,...j->...", problem.drift(tt, xx, mm, uu), h, problem.drift(tt, xx, mm, uu)),
                    kernel, t, x, mu,
                )
                drift_part += 0.5 * dts[j] ** 2 * float(bhb.mean())
        jumps = np.zeros(n)
        for k, node in enumerate(flow.jump_nodes):
            jumps += phi(flow.clouds[node]) - phi(flow.left_limits[k])
        r = phi(flow.clouds[-1]) - phi(flow.clouds[0]) - gen - jumps
        out.append({"residual": float(r.mean()), "se": float(r.std(ddof=1) / np.sqrt(n)), "drift_component": drift_part})
    return out


def check_martingale_residual(
    problem: Problem,
    path: PointPath | None,
    kernel: ControlKernel,
    phis: Sequence[QuadraticTestFunction],
    levels: Sequence[tuple[int, float]],
    seed: int,
    ratio_band: tuple[float, float] = (1.5, 3.0),
) -> VerificationReport:
    """Weak-form residual of the Fokker-Planck equation for quadratic test functions.

    The residual per particle is phi(X_T) - phi(X_0) minus the generator
    integral (left Riemann sum) minus the jump increments.  Its mean splits
    into a martingale part and the Euler bias sum_j dt_j^2 <b^T Hess b>/2
    ("drift component"), which vanishes for linear phi.
    """
    per_level = [_residual_level(problem, path, kernel, n, dt, seed, phis) for n, dt in levels]
    fin = per_level[-1]
    ok_resid = all(abs(m["residual"]) <= 3 * m["se"] for m in fin)
    ratios = []
    ok_trend = True
    for i in range(len(phis)):
        comp = [lvl[i]["drift_component"] for lvl in per_level]
        rs = [a / b if b > 0 else None for a, b in zip(comp[:-1], comp[1:])]
        ratios.append(rs)
        if any(c > 0 for c in comp):
            ok_trend &= all(r is not None and ratio_band[0] <= r <= ratio_band[1] for r in rs)
        else:
            ok_trend &= all(c == 0 for c in comp)
    return VerificationReport(
        "martingale_residual",
        digest({"problem": _problem_tag(problem), "path": path, "levels": list(levels), "seed": seed,
                "phis": [[p.A, p.b, p.c] for p in phis], "kernel": kernel}),
        {"finest": fin, "drift_ratios": ratios},
        {"residual_se_multiple": 3.0, "ratio_band": list(ratio_band)},
        bool(ok_resid and ok_trend),
        {"levels": [list(l) for l in levels], "per_level": per_level},
    )


# --------------------------------------------------------------------------- moment recursion
def check_moment_growth(
    problem: Problem,
    intensity_sweep: Sequence[float],
    p: float,
    seed: int,
    n_paths: int = 200,
    n_particles: int = 500,
    step: float = 2.0**-6,
    kernel: ControlKernel | None = None,
) -> VerificationReport:
    """Per-jump check of M_p(after)^p <= (1+2M)^p (1 + M_p(before)^p)."""
    M = problem.declared_lipschitz
    factor = (1 + 2 * M) ** p
    total_jumps = violations = 0
    worst = 0.0
    per_rate = []
    for ri, rate in enumerate(intensity_sweep):
        prob = problem.with_intensity(replace(problem.intensity, total_rate=float(rate)))
        paths = sample_point_paths(prob.intensity, prob.horizon, seed + ri, n_paths)
        if kernel is None:
            from .kernels import make_layout

            lay = make_layout(prob, 1, 1, 3, None)
            kern = lay.dirac(lay.nearest_index(np.zeros(prob.dim_control)))
        else:
            kern = kernel
        runs = simulate(prob, paths, kern, step, n_particles, seed, stream="moment")
        ks, sups = [], []
        for path, (flow, _) in zip(paths, runs):
            for k, node in enumerate(flow.jump_nodes):
                before = float(ParticleCloud(flow.left_limits[k]).moment(p)[0] ** p)
                after = float(flow.cloud(node).moment(p)[0] ** p)
                bound = factor * (1 + before)
                total_jumps += 1
                worst = max(worst, after / bound)
                violations += after > bound
            mp = np.linalg.norm(flow.clouds, axis=-1) ** p
            ks.append(path.n_events)
            sups.append(float(mp.mean(axis=1).max()))
        ks, sups = np.array(ks), np.array(sups)
        slope = float(np.polyfit(ks, np.log(sups), 1)[0]) if np.unique(ks).size > 1 else 0.0
        per_rate.append({"rate": float(rate), "mean_jumps": float(ks.mean()), "geometric_factor": float(np.exp(slope)),
                         "max_sup_moment": float(sups.max())})
    return VerificationReport(
        "moment_growth",
        digest({"problem": _problem_tag(problem), "rates": list(intensity_sweep), "p": p, "seed": seed,
                "n_paths": n_paths, "n_particles": n_particles, "step": step}),
        {"jumps_checked": total_jumps, "violations": int(violations), "worst_ratio": worst, "per_rate": per_rate},
        {"violations": 0},
        violations == 0,
    )


# --------------------------------------------------------------------------- strict vs relaxed
def visited_cell_entropy(kernel: ControlKernel, times: np.ndarray, states: np.ndarray) -> float:
    """Mean entropy over the (time, space) cells visited by the given states."""
    tc = kernel.time_cell(times)[:, None] * np.ones(states.shape[1], dtype=int)
    sc = kernel.space_cell(states)
    cells = np.unique(np.stack([tc.ravel(), sc.ravel()]), axis=1)
    return float(kernel.entropy()[cells[0], cells[1]].mean())


def check_strict_gap(
    problem: Problem, path: PointPath | None, opt_config: OptConfig, seed: int, rel_tol: float = 0.02,
    entropy_fraction: float = 0.25, result=None,
) -> VerificationReport:
    res = result or optimize_pathwise(problem, path, opt_config, seed)
    k_star = res.kernel
    k_strict = strictify(k_star)
    c_relaxed = res.eval_costs
    flow_s, ens_s = simulate(problem, [path], k_strict, opt_config.step, opt_config.n_eval, seed, stream="eval")[0]
    c_strict = ens_s.costs
    d = c_strict - c_relaxed
    gap, se = float(d.mean()), float(d.std(ddof=1) / np.sqrt(d.size))
    cost_fn = evaluate_cost(flow_s, k_strict, problem)
    flow_r, _ = simulate(problem, [path], k_star, opt_config.step, opt_config.n_eval, seed, stream="eval")[0]
    h = visited_cell_entropy(k_star, flow_r.times, flow_r.clouds)
    h_uniform = float(np.log(k_star.n_controls))
    ok_gap = gap <= 3 * se + rel_tol * abs(res.value)
    ok_h = h <= entropy_fraction * h_uniform
    return VerificationReport(
        "strict_gap",
        digest({"problem": _problem_tag(problem), "path": path, "opt": opt_config.to_dict(), "seed": seed}),
        {"gap": gap, "gap_se": se, "value_relaxed": res.value, "value_strict": float(c_strict.mean()),
         "value_strict_evaluate_cost": cost_fn, "mean_visited_entropy": h, "uniform_entropy": h_uniform},
        {"rel_tol": rel_tol, "entropy_fraction": entropy_fraction},
        bool(ok_gap and ok_h),
        details={"gap_ok": bool(ok_gap), "entropy_ok": bool(ok_h)},
    )


# --------------------------------------------------------------------------- value equivalence
def _pathwise_job(args):
    problem, path, cfg, seed, index, init = args
    r = optimize_pathwise(problem, path, cfg, seed, index=index, init_kernel=init)
    return r.value, r.value_se, r.eval_costs, r.diagnostics["stalled"], r.kernel


def pathwise_values(problem, paths, cfg, seed, workers=1, inits=None, indices=None):
    indices = list(range(len(paths))) if indices is None else list(indices)
    inits = inits or [None] * len(paths)
    jobs = [(problem, p, cfg, seed, k, i) for p, k, i in zip(paths, indices, inits)]
    return parallel_map(_pathwise_job, jobs, workers)


def _coarser(cfg: OptConfig) -> OptConfig:
    return replace(cfg, n_space_cells=max(1, cfg.n_space_cells // 2), control_points=(cfg.control_points + 1) // 2)


def lq_oracle_values(problem: Problem, paths: Sequence[PointPath]) -> np.ndarray | None:
    if problem.name not in ("lq1d",):
        return None
    lq, law = lq_params_of(problem), problem.initial_law
    m, s = float(law.mean[0]), float(law.std[0])
    return np.array([riccati_oracle(lq, p, problem.horizon, m, s)[0] for p in paths])


def check_value_equivalence(
    problem: Problem,
    n_common_paths: int,
    pathwise_opt_config: OptConfig,
    policy_class_config: PolicyConfig,
    seed: int,
    *,
    workers: int = 1,
    refine_paths: int = 10,
    oracle_rel_tol: float = 0.05,
) -> VerificationReport:
    """Integrated pathwise value versus the best jump-history policy on the same paths."""
    paths = sample_point_paths(problem.intensity, problem.horizon, seed, n_common_paths)
    lhs = pathwise_values(problem, paths, pathwise_opt_config, seed, workers)
    v_l = np.array([r[0] for r in lhs])
    stalled = int(sum(r[3] for r in lhs))
    rhs = optimize_policy(problem, paths, pathwise_opt_config, policy_class_config, seed)
    v_r = rhs.path_values
    d = v_l - v_r
    gap = float(d.mean())
    se = float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else float(np.hypot(lhs[0][1], rhs.path_ses[0]))
    # refinement budget: change between the two finest kernel resolutions on a path subset
    m = min(refine_paths, n_common_paths)
    coarse_cfg = _coarser(pathwise_opt_config)
    lhs_c = pathwise_values(problem, paths[:m], coarse_cfg, seed, workers)
    rhs_c = optimize_policy(problem, paths[:m], coarse_cfg, policy_class_config, seed)
    ch_l = float(np.mean(v_l[:m] - np.array([r[0] for r in lhs_c])))
    ch_r = float(np.mean(v_r[:m] - rhs_c.path_values))
    budget = max(abs(ch_l), abs(ch_r))
    lhs_val, rhs_val = float(v_l.mean()), float(v_r.mean())
    metrics = {
        "lhs_value": lhs_val,
        "lhs_se": float(v_l.std(ddof=1) / np.sqrt(v_l.size)) if v_l.size > 1 else lhs[0][1],
        "rhs_value": rhs_val,
        "rhs_se": rhs.value_se if v_r.size > 1 else float(rhs.path_ses[0]),
        "gap": gap,
        "gap_se": se,
        "refinement_budget": budget,
        "stalled_paths": stalled,
        "mean_jumps": float(np.mean([p.n_events for p in paths])),
    }
    passed = abs(gap) <= 3 * se + budget
    orc = lq_oracle_values(problem, paths)
    if orc is not None:
        o = float(orc.mean())
        metrics.update({"oracle_value": o, "lhs_rel_err": abs(lhs_val - o) / abs(o), "rhs_rel_err": abs(rhs_val - o) / abs(o)})
        passed = passed and metrics["lhs_rel_err"] <= oracle_rel_tol and metrics["rhs_rel_err"] <= oracle_rel_tol
    return VerificationReport(
        "value_equivalence",
        digest({"problem": _problem_tag(problem), "K": n_common_paths, "opt": pathwise_opt_config.to_dict(),
                "policy": policy_class_config.__dict__, "seed": seed, "paths": [p.to_text() for p in paths]}),
        metrics,
        {"se_multiple": 3.0, "oracle_rel_tol": oracle_rel_tol},
        bool(passed),
        {"coarse_lhs_change": ch_l, "coarse_rhs_change": ch_r, "refine_paths": m},
        {"flagged": stalled > 0},
    )


def check_zero_intensity(
    problem: Problem, opt_config: OptConfig, policy_config: PolicyConfig, seed: int, n_paths: int = 10,
    rel_tol: float = 0.02,
) -> VerificationReport:
    """With no jumps: pathwise value, common-noise policy value and the no-jump oracle agree."""
    prob = problem.with_intensity(replace(problem.intensity, total_rate=0.0))
    empty = PointPath(prob.horizon, np.zeros(0), np.zeros((0, prob.intensity.mark_dim)))
    pw = optimize_pathwise(prob, empty, opt_config, seed)
    paths = sample_point_paths(prob.intensity, prob.horizon, seed, n_paths)
    pol = optimize_policy(prob, paths, opt_config, policy_config, seed)
    c_all = np.concatenate(pol.eval_costs)
    cn_val, cn_se = float(c_all.mean()), float(c_all.std(ddof=1) / np.sqrt(c_all.size))
    vals = {"pathwise": (pw.value, pw.value_se), "common_noise": (cn_val, cn_se)}
    orc = lq_oracle_values(prob, [empty])
    if orc is not None:
        vals["oracle"] = (float(orc[0]), 0.0)
    names = list(vals)
    pairs, ok = {}, True
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            (a, sa), (b, sb) = vals[names[i]], vals[names[j]]
            diff, se = abs(a - b), float(np.hypot(sa, sb))
            band = 3 * se + rel_tol * max(abs(a), abs(b))
            pairs[f"{names[i]}-{names[j]}"] = {"diff": diff, "band": band}
            ok &= diff <= band
    return VerificationReport(
        "zero_intensity",
        digest({"problem": _problem_tag(prob), "opt": opt_config.to_dict(), "seed": seed, "n_paths": n_paths}),
        {"values": {k: {"value": v, "se": s} for k, (v, s) in vals.items()}, "pairs": pairs,
         "all_paths_empty": all(p.n_events == 0 for p in paths)},
        {"se_multiple": 3.0, "rel_tol": rel_tol},
        bool(ok),
    )


# --------------------------------------------------------------------------- value continuity
def check_value_continuity(
    problem: Problem,
    base_lambda: GaussianLaw,
    perturbation_scales: Sequence[float],
    opt_config: OptConfig,
    seed: int,
    *,
    n_paths: int = 20,
    workers: int = 1,
    rel_tol: float = 0.02,
    gap_tol: float | None = None,
    warm_start: bool = True,
) -> VerificationReport:
    """Pathwise-integrated value for the base law and mean-shifted laws.

    Every law uses the same paths, random streams and kernel cell box (taken
    from the base law), so gaps are paired differences.
    """
    scales = [float(s) for s in perturbation_scales]
    cfg = replace(opt_config, space_centre=float(base_lambda.mean[0]), space_std=float(base_lambda.std[0]))
    paths = sample_point_paths(problem.intensity, problem.horizon, seed, n_paths)
    base_prob = problem.with_initial_law(base_lambda)
    base = pathwise_values(base_prob, paths, cfg, seed, workers)
    v0 = np.array([r[0] for r in base])
    inits = [r[4] for r in base] if warm_start else None
    gaps, ses, shifted = [], [], []
    for s in scales:
        prob = problem.with_initial_law(base_lambda.shifted(s))
        res = pathwise_values(prob, paths, cfg, seed, workers, inits)
        d = np.array([r[0] for r in res]) - v0
        gaps.append(float(d.mean()))
        ses.append(float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else float(np.hypot(res[0][1], base[0][1])))
        shifted.append(float(np.mean([r[0] for r in res])))
    abs_gaps = [abs(g) for g in gaps]
    monotone = all(b <= a for a, b in zip(abs_gaps[:-1], abs_gaps[1:]))
    passed = monotone
    metrics = {"base_value": float(v0.mean()), "scales": scales, "gaps": gaps, "gap_se": ses, "shifted_values": shifted,
               "monotone": monotone}
    if problem.name == "lq1d":
        lq, m = lq_params_of(problem), float(base_lambda.mean[0])
        p0 = np.array([riccati_oracle(lq, p, problem.horizon, 0.0, 0.0)[1].P[0] for p in paths])
        od = [float(np.mean(p0 * (s * s + 2 * m * s))) for s in scales]
        match = [abs(g - o) <= 3 * e + rel_tol * abs(o) for g, o, e in zip(gaps, od, ses)]
        metrics.update({"oracle_gaps": od, "oracle_match": match})
        passed = passed and all(match)
    if gap_tol is not None:
        passed = passed and abs_gaps[-1] <= gap_tol + 2 * ses[-1]
    return VerificationReport(
        "value_continuity",
        digest({"problem": _problem_tag(problem), "lambda": [base_lambda.mean, base_lambda.std], "scales": scales,
                "opt": cfg.to_dict(), "seed": seed, "n_paths": n_paths, "warm": warm_start}),
        metrics,
        {"se_multiple": 3.0, "rel_tol": rel_tol, "gap_tol": gap_tol},
        bool(passed),
        {"scales": scales, "abs_gaps": abs_gaps},
    )


__all__ = [
    "VerificationReport",
    "check_martingale_residual",
    "check_moment_growth",
    "check_strict_gap",
    "check_superposition",
    "check_value_continuity",
    "check_value_equivalence",
    "check_zero_intensity",
    "digest",
    "node_w2",
    "visited_cell_entropy",
]
