import numpy as np
import pytest

from pathwise_mfc.dynamics import simulate
from pathwise_mfc.kernels import make_layout
from pathwise_mfc.mfg import (
    IterConfig,
    _mix,
    assemble_strong_mfe,
    best_response,
    consistency_w2,
    exploitability,
    solve_pathwise_mfe,
)
from pathwise_mfc.model import LqParams, build_problem, constant_problem
from pathwise_mfc.noise import PointPath
from pathwise_mfc.optimizer import OptConfig, tracking_riccati_oracle
from pathwise_mfc.rng import substream

SMALL = OptConfig(n_train=300, n_eval=600, n_time_cells=4, n_space_cells=8, control_points=21, step=2.0**-5)
FAST = IterConfig(max_iters=4, n_particles=500, opt=SMALL)


def zero_flow(problem, path, n=4000, step=2.0**-6):
    lay = make_layout(problem, 1, 1, 3, (-1, 1))
    flow, _ = simulate(problem, [path], lay.dirac(1), step, n, 0, stream="zero")[0]
    return flow


@pytest.mark.parametrize("kw", [{"max_iters": 0}, {"damping": 0.0}, {"damping": 1.5}, {"scheme": "newton"},
                                {"n_particles": 1}])
def test_iter_config_validation(kw):
    with pytest.raises(ValueError):
        IterConfig(**kw)


def test_best_response_matches_tracking_oracle(two_jump_path):
    p = build_problem("lq1d-meanfield", {"coupling": 0.3})
    flow = zero_flow(p, two_jump_path)
    means = flow.clouds[..., 0].mean(axis=1)
    mbar = lambda t: float(np.interp(t, flow.times, means))
    oracle, _ = tracking_riccati_oracle(LqParams(0.5, 1.0, 0.2, 0.1, 1.0, 1.0), two_jump_path, 1.0, 1.0, 0.5,
                                         coupling=0.3, target_mean=mbar)
    k, value = best_response(p, two_jump_path, flow, OptConfig(n_eval=8000), seed=0)
    gap, se, cost = exploitability(p, two_jump_path, flow, k, OptConfig(n_eval=8000), seed=0)
    assert abs(value - oracle) <= 0.03 * oracle + 3 * se + 0.02
    assert cost == pytest.approx(value, rel=1e-12) and gap == pytest.approx(0.0, abs=1e-12)


def test_mix_fractions():
    p = constant_problem(0.0, 0.5)
    a, b = zero_flow(p, None, 2000), zero_flow(p, None, 2000)
    b = type(b)(b.times, b.clouds + 10.0, b.jump_nodes, b.left_limits + 10.0)
    assert _mix(a, b, 1.0, np.random.default_rng(0)) is b
    m = _mix(a, b, 0.25, substream(0, "t"))
    frac = np.mean(m.clouds[-1, :, 0] == b.clouds[-1, :, 0])
    assert frac == pytest.approx(0.25, abs=0.04)
    assert np.array_equal(m.clouds[0] == b.clouds[0], m.clouds[-1] == b.clouds[-1])


def test_flow_independent_problem_stops_after_one_iteration(lq, two_jump_path):
    r = solve_pathwise_mfe(lq, two_jump_path, FAST, seed=0)
    assert r.iterations == 1 and r.converged


def test_mfe_solver_is_deterministic(two_jump_path):
    p = build_problem("lq1d-meanfield")
    a = solve_pathwise_mfe(p, two_jump_path, FAST, seed=2)
    b = solve_pathwise_mfe(p, two_jump_path, FAST, seed=2)
    assert a.summary() == b.summary()
    assert np.array_equal(a.flow.clouds, b.flow.clouds)
    assert a.residual_history[-1] < a.residual_history[0]
    assert consistency_w2(p, two_jump_path, a, FAST, seed=2) < 0.2


def test_fictitious_play_residuals_shrink(two_jump_path):
    p = build_problem("lq1d-meanfield")
    r = solve_pathwise_mfe(p, two_jump_path, IterConfig(max_iters=3, n_particles=500, opt=SMALL, scheme="fictitious",
                                                        tol=1e-9), seed=0)
    assert r.iterations == 3
    assert r.residual_history[-1] < r.residual_history[0]


def test_assemble_dedupes_and_workers_agree():
    p = build_problem("lq1d-meanfield")
    one = PointPath.from_events(1.0, [(0.5, 1.0)])
    paths = [one, PointPath(1.0, [], np.zeros((0, 1))), PointPath.from_events(1.0, [(0.5, 1.0)])]
    cfg = IterConfig(max_iters=2, n_particles=300, opt=SMALL)
    a = assemble_strong_mfe(p, 3, cfg, seed=0, paths=paths)
    assert a.distinct_solves == 2 and len(a.per_path) == 3
    assert a.per_path[0].summary() == a.per_path[2].summary()
    b = assemble_strong_mfe(p, 3, cfg, seed=0, paths=paths, workers=2)
    assert a.digest == b.digest
    assert 0.0 <= a.converged_fraction <= 1.0
