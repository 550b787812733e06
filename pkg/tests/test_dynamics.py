import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import zero_control_second_moment_cost
from pathwise_mfc.dynamics import (
    SimulationError,
    apply_jump,
    concatenate,
    extract_continuous_part,
    head_segment,
    make_grid,
    propagate_fp,
    reconstruct,
    simulate,
    simulate_common_noise_system,
    tail_simulator,
)
from pathwise_mfc.kernels import ControlKernel, JumpHistoryPolicy, make_layout
from pathwise_mfc.measures import ParticleCloud, wasserstein2
from pathwise_mfc.model import GaussianLaw, IntensitySpec, LqParams, Problem, constant_problem, make_lq_problem
from pathwise_mfc.noise import PointPath, sample_point_paths


def zero_kernel(problem):
    lay = make_layout(problem, 4, 4, 5, (-1, 1))
    return lay.dirac(lay.nearest_index(0.0))


def test_frozen_dynamics_keep_particles_fixed():
    p = constant_problem()
    flow, ens = propagate_fp(p, None, zero_kernel(p), 0.1, 50, 0)
    assert np.all(flow.clouds == flow.clouds[0])


def test_unit_drift_translates_exactly():
    p = constant_problem(1.0)
    flow, _ = propagate_fp(p, None, zero_kernel(p), 2.0**-4, 64, 0)
    shift = flow.clouds[:, :, 0].mean(axis=1) - flow.clouds[0, :, 0].mean()
    assert np.allclose(shift, flow.times, atol=1e-12)


def test_lq_mean_with_one_jump(lq):
    path = PointPath.from_events(1.0, [(0.4, 1.0)])
    flow, _ = propagate_fp(lq, path, zero_kernel(lq), 2.0**-8, 20000, 3)
    xt = flow.clouds[-1, :, 0]
    target = 1.0 * np.exp(0.5) * 1.1
    assert abs(xt.mean() - target) <= 3 * xt.std(ddof=1) / np.sqrt(xt.size)


def test_grid_contains_jumps_and_respects_step():
    path = PointPath.from_events(1.0, [(0.3, 1.0), (0.71, 1.0)])
    g = make_grid(1.0, 0.1, path)
    assert {0.0, 0.3, 0.71, 1.0} <= set(g.times.tolist())
    assert np.diff(g.times).max() <= 0.1 + 1e-15


def test_grid_mismatch_is_rejected(lq, two_jump_path):
    with pytest.raises(ValueError):
        propagate_fp(lq, two_jump_path, zero_kernel(lq), make_grid(1.0, 0.1, None), 10, 0)


def test_apply_jump_examples(lq):
    c = ParticleCloud(np.array([[1.0], [2.0]]))
    assert np.array_equal(apply_jump(c, 0.5, 1.0, c, constant_problem()).points, c.points)
    shifted = apply_jump(c, 0.5, 1.0, c, constant_problem(jump=1.0))
    assert wasserstein2(shifted, c) == pytest.approx(1.0)
    assert np.allclose(apply_jump(c, 0.5, 1.0, c, lq).points[:, 0], [1.1, 2.2])


def test_jump_relation_holds_in_every_flow(lq):
    paths = sample_point_paths(IntensitySpec.constant_mark(3.0), 1.0, 2, 5)
    for path, (flow, _) in zip(paths, simulate(lq, paths, zero_kernel(lq), 2.0**-5, 40, 0)):
        for k, node in enumerate(flow.jump_nodes):
            again = apply_jump(ParticleCloud(flow.left_limits[k]), flow.times[node], path.marks[k],
                               ParticleCloud(flow.left_limits[k]), lq)
            assert np.array_equal(again.points, flow.clouds[node])


def test_continuous_part_examples(two_jump_path):
    p = constant_problem(0.0, 0.3, jump=1.0)
    flow, ens = propagate_fp(p, two_jump_path, zero_kernel(p), 0.05, 20, 1)
    ys = extract_continuous_part(ens, two_jump_path, flow, p)
    t = ens.times
    for i, y in enumerate(ys):
        expected = ens.states[:, i, 0] - (t >= 0.3) - (t >= 0.7)
        assert np.allclose(y.values[:, 0], expected, atol=1e-14)
        assert y.jump_times == ()
    assert np.max(np.abs(reconstruct(ys, ens, two_jump_path, flow, p) - ens.states)) <= 1e-12
    q = constant_problem(0.0, 0.3)
    flow, ens = propagate_fp(q, two_jump_path, zero_kernel(q), 0.05, 20, 1)
    assert np.array_equal(np.stack([y.values for y in extract_continuous_part(ens, two_jump_path, flow, q)], 1), ens.states)


def test_concatenate_constant_segments():
    p = constant_problem(jump=1.0, initial_law=GaussianLaw(0.0, 0.0))
    path = PointPath.from_events(1.0, [(0.5, 1.0)])
    k = zero_kernel(p)
    flow, ens = propagate_fp(p, path, k, 0.125, 8, 0)
    head = head_segment(ens, 0.5)
    spliced = concatenate(head, tail_simulator(p, path, k, 0.125, flow, 0, 0.5), 0.5, p, path, flow)
    x = spliced.states[:, :, 0]
    assert np.all(x[spliced.times < 0.5] == 0) and np.all(x[spliced.times >= 0.5] == 1)


def test_concatenate_preserves_head_and_continuity(lq):
    path = PointPath.from_events(1.0, [(0.25, 1.0), (0.5, 1.0)])
    k = zero_kernel(lq)
    flow, ens = propagate_fp(lq, path, k, 2.0**-5, 200, 0)
    head = head_segment(ens, 0.5)
    spliced = concatenate(head, tail_simulator(lq, path, k, 2.0**-5, flow, 9, 0.5, stream="tail"), 0.5, lq, path, flow)
    n_head = head.times.size - 1
    assert np.array_equal(spliced.states[:n_head], ens.states[:n_head])
    ys = extract_continuous_part(spliced, path, flow, lq)
    n1, n2 = spliced.jump_nodes
    inc1 = spliced.states[n1] - spliced.left_limits[0]
    y_left = spliced.left_limits[1] - inc1
    y_at = np.stack([y.values[n2] for y in ys])
    assert np.max(np.abs(y_at - y_left)) <= 1e-10


def test_concatenate_rejects_wrong_jump(lq):
    path = PointPath.from_events(1.0, [(0.5, 1.0)])
    k = zero_kernel(lq)
    flow, ens = propagate_fp(lq, path, k, 0.125, 8, 0)
    head = head_segment(ens, 0.5)
    bad = lambda eta: tail_simulator(lq, path, k, 0.125, flow, 0, 0.5)(eta + 1.0)  # noqa: E731
    with pytest.raises(SimulationError):
        concatenate(head, bad, 0.5, lq, path, flow)


def test_common_noise_zero_intensity_shares_flow(lq):
    p = lq.with_intensity(IntensitySpec.constant_mark(0.0))
    out = simulate_common_noise_system(p, zero_kernel(p), 100, 3, 2.0**-4, 0)
    assert all(s.path.n_events == 0 for s in out)
    assert len({s.cost for s in out}) == 3  # only the particle draws differ


def test_common_noise_zero_cost():
    p = constant_problem(0.5, 0.3, jump=0.2, intensity=IntensitySpec.constant_mark(2.0))
    assert all(s.cost == 0 for s in simulate_common_noise_system(p, zero_kernel(p), 50, 4, 0.1, 0))


def test_common_noise_lq_zero_control_matches_closed_form(lq):
    k = zero_kernel(lq)
    pol = JumpHistoryPolicy.uniform_from(k, 1, 1, 1.0)
    out = simulate_common_noise_system(lq, pol, 400, 200, 2.0**-7, 0)
    costs = np.array([s.cost for s in out])
    oracle = np.array([zero_control_second_moment_cost(0.5, 0.2, 0.1, 1.0, 1.0, 0.5, s.path.times, 1.0) for s in out])
    d = costs - oracle
    assert abs(d.mean()) <= 3 * d.std(ddof=1) / np.sqrt(d.size) + 0.01 * oracle.mean()


def test_single_and_batched_runs_agree(lq):
    paths = sample_point_paths(lq.intensity, 1.0, 4, 4)
    k = zero_kernel(lq)
    batched = simulate(lq, paths, k, 2.0**-5, 30, 5)
    for i, p in enumerate(paths):
        flow, ens = simulate(lq, [p], k, 2.0**-5, 30, 5, indices=[i])[0]
        assert np.array_equal(flow.clouds, batched[i][0].clouds)
        assert np.allclose(ens.costs, batched[i][1].costs, rtol=1e-12, atol=0)


@given(st.integers(0, 1000), st.floats(0.05, 0.3))
def test_runs_are_deterministic(seed, step):
    p = make_lq_problem(LqParams(0.3, 1, 0.5, 0.2, 1, 1), IntensitySpec.constant_mark(2.0))
    path = sample_point_paths(p.intensity, 1.0, seed, 1)[0]
    k = zero_kernel(p)
    a = propagate_fp(p, path, k, step, 16, seed)[0]
    b = propagate_fp(p, path, k, step, 16, seed)[0]
    assert np.array_equal(a.clouds, b.clouds) and np.array_equal(a.left_limits, b.left_limits)


def test_blow_up_is_reported():
    class Explode:
        def __call__(self, t, x, mu, u):
            return 1e200 * (1 + x**2)

    base = constant_problem()
    p = Problem(**{**base.__dict__, "drift": Explode()})
    with np.errstate(over="ignore"), pytest.raises(SimulationError, match="non-finite state"):
        propagate_fp(p, None, zero_kernel(p), 0.1, 4, 0)


def test_relaxed_kernel_samples_controls():
    lay_prob = constant_problem()
    lay = make_layout(lay_prob, 1, 1, 3, (-1, 1))
    k = ControlKernel.constant(lay.time_edges, lay.space_edges, lay.control_grid, [0.5, 0.0, 0.5])

    class UDrift:
        def __call__(self, t, x, mu, u):
            return u

    q = Problem(**{**lay_prob.__dict__, "drift": UDrift(), "initial_law": GaussianLaw(0.0, 0.0)})
    flow, _ = propagate_fp(q, None, k, 1.0, 4000, 0)
    x1 = flow.clouds[-1, :, 0]
    assert set(np.unique(x1)) == {-1.0, 1.0}
    assert abs(x1.mean()) <= 3 / np.sqrt(x1.size)
