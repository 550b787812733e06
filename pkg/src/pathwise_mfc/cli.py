"""Command-line front end: run a config, write artifacts and a manifest, replay."""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import CHECKS, COMMANDS, ConfigError, RunConfig, config_digest, config_from_dict, parse_config
from .dynamics import SimulationError, simulate
from .kernels import make_layout
from .mfg import IterConfig, assemble_strong_mfe, consistency_w2, solve_pathwise_mfe
from .model import CoefficientError, QuadraticTestFunction, build_problem
from .noise import PointPath, sample_point_paths
from .optimizer import OptConfig, PolicyConfig, optimize_pathwise
from .verify import (
    VerificationReport,
    check_martingale_residual,
    check_moment_growth,
    check_strict_gap,
    check_superposition,
    check_value_continuity,
    check_value_equivalence,
    check_zero_intensity,
    digest,
    lq_oracle_values,
    pathwise_values,
)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


def fmt(x) -> str:
    return f"{float(x):.17g}"


def flatten(prefix: str, obj, out: dict) -> dict:
    """Dotted-key view of nested metrics; floats kept as ``repr`` strings."""
    if isinstance(obj, dict):
        for k in sorted(obj):
            flatten(f"{prefix}.{k}" if prefix else str(k), obj[k], out)
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            flatten(f"{prefix}[{i}]", v, out)
    elif isinstance(obj, (bool, np.bool_)):
        out[prefix] = repr(bool(obj))
    elif isinstance(obj, (float, np.floating)):
        out[prefix] = repr(float(obj))
    elif isinstance(obj, (int, np.integer)):
        out[prefix] = repr(int(obj))
    else:
        out[prefix] = repr(obj)
    return out


class Writer:
    """Single writer for a run; records every file it creates."""

    def __init__(self, out: Path):
        self.out = out
        self.files: list[str] = []
        out.mkdir(parents=True, exist_ok=True)

    def text(self, rel: str, content: str) -> None:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(content)
        if rel not in self.files:
            self.files.append(rel)

    def path(self, rel: str) -> Path:
        """Reserve ``rel`` for a caller that writes the file itself."""
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        if rel not in self.files:
            self.files.append(rel)
        return p

    def csv(self, rel: str, header: list[str], rows: list[list]) -> None:
        lines = [",".join(header)]
        for r in rows:
            lines.append(",".join(fmt(v) if isinstance(v, (float, np.floating)) else str(v) for v in r))
        self.text(rel, "\n".join(lines) + "\n")

    def sha(self, rel: str) -> str:
        return hashlib.sha256((self.out / rel).read_bytes()).hexdigest()


def opt_config(cfg: RunConfig) -> OptConfig:
    n = cfg.numerics
    return OptConfig(step=n.step, n_time_cells=n.n_time_cells, n_space_cells=n.n_space_cells,
                     control_points=n.control_points, control_range=tuple(n.control_range), n_train=n.n_train,
                     n_eval=n.n_eval, max_sweeps=n.max_sweeps)


def policy_config(cfg: RunConfig) -> PolicyConfig:
    n = cfg.numerics
    return PolicyConfig(jump_cap=n.jump_cap, n_buckets=n.n_buckets, n_train_per_path=n.n_train_per_path)


def iter_config(cfg: RunConfig) -> IterConfig:
    n, t = cfg.numerics, cfg.tolerances
    return IterConfig(max_iters=n.max_iters, damping=n.damping, tol=t.mfe_residual, n_particles=n.n_particles,
                      exploit_rel=t.exploit_rel, consistency_tol=t.consistency_w2, scheme=n.scheme, opt=opt_config(cfg))


def fixed_path(cfg: RunConfig, problem) -> PointPath:
    events = [(e[0], e[1:]) for e in (cfg.path or [])]
    return PointPath.from_events(problem.horizon, events, problem.intensity.mark_dim)


def zero_kernel(cfg: RunConfig, problem):
    n = cfg.numerics
    lay = make_layout(problem, 1, 1, n.control_points, tuple(n.control_range))
    return lay.dirac(lay.nearest_index(np.zeros(problem.dim_control)))


# --------------------------------------------------------------------------- checks
def run_check(name: str, cfg: RunConfig, problem) -> VerificationReport:
    n, t, seed = cfg.numerics, cfg.tolerances, cfg.seed
    path = fixed_path(cfg, problem)
    if name == "superposition":
        levels = [(int(a), float(b)) for a, b in n.levels]
        return check_superposition(problem, path, zero_kernel(cfg, problem), levels, seed, t.superposition_w2)
    if name == "martingale_residual":
        levels = [(int(a), float(b)) for a, b in n.martingale_levels]
        phis = [QuadraticTestFunction.linear(problem.dim_state), QuadraticTestFunction.square(problem.dim_state)]
        return check_martingale_residual(problem, path, zero_kernel(cfg, problem), phis, levels, seed,
                                         tuple(t.ratio_band))
    if name == "moment_growth":
        return check_moment_growth(problem, n.moment_rates, n.moment_order, seed, n.moment_paths, n.moment_particles,
                                   n.step)
    if name == "strict_gap":
        return check_strict_gap(problem, path, opt_config(cfg), seed, t.strict_rel, t.entropy_fraction)
    if name == "value_equivalence":
        return check_value_equivalence(problem, n.n_paths, opt_config(cfg), policy_config(cfg), seed,
                                       workers=cfg.workers, refine_paths=n.refine_paths, oracle_rel_tol=t.value_rel)
    if name == "zero_intensity":
        return check_zero_intensity(problem, opt_config(cfg), policy_config(cfg), seed, n.zero_paths, t.zero_rel)
    if name == "value_continuity":
        return check_value_continuity(problem, problem.initial_law, n.perturbation_scales, opt_config(cfg), seed,
                                      n_paths=n.continuity_paths, workers=cfg.workers, rel_tol=t.continuity_rel)
    if name == "pathwise_mfe":
        ic = iter_config(cfg)
        r = solve_pathwise_mfe(problem, path, ic, seed)
        w2 = consistency_w2(problem, path, r, ic, seed)
        s = r.summary()
        s["consistency_w2"] = w2
        return VerificationReport(
            "pathwise_mfe", digest({"config": config_digest(cfg), "path": path}), s,
            {"residual": ic.tol, "exploit_rel": ic.exploit_rel, "consistency_w2": ic.consistency_tol},
            bool(r.converged and w2 <= ic.consistency_tol), {"residual_history": r.residual_history},
        )
    raise ConfigError("checks", f"unknown check {name!r}")


# --------------------------------------------------------------------------- commands
def cmd_sample_noise(cfg, problem, w: Writer) -> tuple[bool, dict]:
    paths = sample_point_paths(problem.intensity, problem.horizon, cfg.seed, cfg.numerics.n_paths)
    rows = []
    for k, p in enumerate(paths):
        w.text(f"paths/path_{k:04d}.txt", p.to_text())
        rows.append([k, p.n_events])
    w.csv("paths/summary.csv", ["path", "n_events"], rows)
    counts = np.array([p.n_events for p in paths])
    return True, {"n_paths": len(paths), "total_events": int(counts.sum()), "mean_events": float(counts.mean())}


def cmd_solve_pathwise(cfg, problem, w: Writer) -> tuple[bool, dict]:
    path = fixed_path(cfg, problem)
    oc = opt_config(cfg)
    res = optimize_pathwise(problem, path, oc, cfg.seed)
    w.text("path.txt", path.to_text())
    w.text("kernel.json", json.dumps(res.kernel.to_dict()))
    flow, _ = simulate(problem, [path], res.kernel, oc.step, cfg.numerics.n_particles, cfg.seed, stream="flow")[0]
    flow.to_csv(w.path("flow.csv"))
    metrics = {"value": res.value, "value_se": res.value_se, "stalled": res.stalled, "sweeps": res.diagnostics["sweeps"]}
    orc = lq_oracle_values(problem, [path])
    if orc is not None:
        metrics["oracle"] = float(orc[0])
    w.csv("value.csv", list(metrics), [list(metrics.values())])
    return True, metrics


def cmd_value(cfg, problem, w: Writer) -> tuple[bool, dict]:
    paths = sample_point_paths(problem.intensity, problem.horizon, cfg.seed, cfg.numerics.n_paths)
    res = pathwise_values(problem, paths, opt_config(cfg), cfg.seed, cfg.workers)
    orc = lq_oracle_values(problem, paths)
    rows = []
    for k, (p, r) in enumerate(zip(paths, res)):
        row = [k, p.n_events, r[0], r[1], bool(r[3])]
        if orc is not None:
            row.append(float(orc[k]))
        rows.append(row)
    header = ["path", "n_events", "value", "se", "stalled"] + (["oracle"] if orc is not None else [])
    w.csv("values.csv", header, rows)
    v = np.array([r[0] for r in res])
    metrics = {"value": float(v.mean()), "value_se": float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else res[0][1],
               "stalled_paths": int(sum(r[3] for r in res))}
    if orc is not None:
        metrics["oracle"] = float(orc.mean())
    return True, metrics


def cmd_mfg(cfg, problem, w: Writer) -> tuple[bool, dict]:
    ic = iter_config(cfg)
    est = assemble_strong_mfe(problem, cfg.numerics.mfg_paths, ic, cfg.seed, workers=cfg.workers)
    rows = []
    for k, (p, r) in enumerate(zip(est.paths, est.per_path)):
        w.text(f"mfe/path_{k:04d}.txt", p.to_text())
        w.text(f"mfe/kernel_{k:04d}.json", json.dumps(r.kernel.to_dict()))
        r.flow.to_csv(w.path(f"mfe/flow_{k:04d}.csv"))
        rows.append([k, p.n_events, bool(r.converged), r.iterations, r.residual_history[-1], r.exploitability,
                     r.exploitability_se, r.value, r.consistency_w2])
    w.csv("mfe/summary.csv", ["path", "n_events", "converged", "iterations", "final_residual", "exploitability",
                              "exploitability_se", "value", "consistency_w2"], rows)
    consistent = all(r.consistency_w2 <= ic.consistency_tol for r in est.per_path if r.converged)
    ok = est.converged_fraction >= cfg.tolerances.converged_fraction and consistent
    metrics = {"converged_fraction": est.converged_fraction, "distinct_solves": est.distinct_solves,
               "digest": est.digest, "max_consistency_w2": max(r.consistency_w2 for r in est.per_path),
               "max_exploitability": max(r.exploitability for r in est.per_path)}
    return ok, metrics


def cmd_verify(cfg, problem, w: Writer) -> tuple[bool, dict]:
    checks = cfg.checks or list(CHECKS)
    ok, metrics, rows = True, {}, []
    for name in checks:
        rep = run_check(name, cfg, problem)
        w.text(f"reports/{name}.json", rep.to_json())
        ok &= rep.passed
        metrics[name] = {"pass": rep.passed, **rep.metrics}
        rows.append([name, rep.passed, rep.inputs_digest])
        print(rep.summary_line())
    w.csv("reports/summary.csv", ["check", "pass", "inputs_digest"], rows)
    return ok, metrics


HANDLERS = {
    "sample-noise": cmd_sample_noise,
    "solve-pathwise": cmd_solve_pathwise,
    "value": cmd_value,
    "mfg": cmd_mfg,
    "verify": cmd_verify,
}


def versions() -> dict:
    return {"pathwise_mfc": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def emit_manifest(cfg: RunConfig, ok: bool, summary: dict, w: Writer) -> dict:
    manifest = {
        "config": cfg.to_dict(),
        "config_digest": config_digest(cfg),
        "seeds": {"master": cfg.seed},
        "tolerances": cfg.to_dict()["tolerances"],
        "versions": versions(),
        "exit_status": EXIT_OK if ok else EXIT_FAIL,
        "outputs": [{"file": f, "sha256": w.sha(f)} for f in w.files],
        "summary": summary,
    }
    (w.out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def run(cfg: RunConfig) -> int:
    """Execute ``cfg``; returns the exit status."""
    if cfg.command == "replay":
        return replay(cfg)
    problem = build_problem(cfg.problem.name, cfg.problem.overrides)
    w = Writer(Path(cfg.out))
    ok, metrics = HANDLERS[cfg.command](cfg, problem, w)
    summary = flatten("", metrics, {})
    emit_manifest(cfg, ok, summary, w)
    return EXIT_OK if ok else EXIT_FAIL


def replay(cfg: RunConfig) -> int:
    """Re-run a stored manifest's config and compare summary metrics byte for byte."""
    src = Path(cfg.manifest)
    try:
        stored = json.loads(src.read_text())
        orig = config_from_dict(stored["config"])
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise ConfigError("manifest", f"cannot read manifest {src}: {e}") from None
    out = Path(cfg.out) if cfg.out != "out" else src.parent / "replay"
    again = replace(orig, workers=cfg.workers, out=str(out))
    status = run(again)
    fresh = json.loads((out / "manifest.json").read_text())
    diffs = sorted(k for k in set(stored["summary"]) | set(fresh["summary"])
                   if stored["summary"].get(k) != fresh["summary"].get(k))
    same = not diffs and status == stored["exit_status"]
    (out / "replay.json").write_text(json.dumps({"manifest": str(src), "identical": same, "differences": diffs},
                                                indent=2, sort_keys=True) + "\n")
    print(f"replay: {'identical' if same else 'DIFFERENT'} ({len(diffs)} differing metrics)")
    return EXIT_OK if same else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pathwise-mfc", description=__doc__)
    p.add_argument("command", nargs="?", choices=COMMANDS, help="overrides the config command")
    p.add_argument("targets", nargs="*", help="check names for 'verify', manifest path for 'replay'")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="master seed override")
    p.add_argument("--workers", type=int, help="worker processes")
    p.add_argument("--out", help="output directory")
    p.add_argument("--check", action="append", default=[], help="check to run (repeatable)")
    return p


def config_from_args(args) -> RunConfig:
    data: dict = {}
    if args.config:
        text = Path(args.config).read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError:
            parse_config(text)  # raises with line/column
        if not isinstance(data, dict):
            raise ConfigError("", "config must be a JSON object")
    if args.command:
        data["command"] = args.command
    checks = list(args.check)
    if data.get("command") == "replay":
        if args.targets:
            data["manifest"] = args.targets[0]
    else:
        checks = list(args.targets) + checks
    if checks:
        data["checks"] = checks
    for key in ("seed", "workers", "out"):
        v = getattr(args, key)
        if v is not None:
            data[key] = v
    return config_from_dict(data)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
        return run(cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SimulationError, CoefficientError, FloatingPointError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
