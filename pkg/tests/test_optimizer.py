import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import zero_control_second_moment_cost
from pathwise_mfc.dynamics import propagate_fp
from pathwise_mfc.kernels import make_layout
from pathwise_mfc.model import ControlSet, GaussianLaw, IntensitySpec, LqParams, Problem, constant_problem
from pathwise_mfc.noise import PointPath
from pathwise_mfc.optimizer import (
    OptConfig,
    PolicyConfig,
    adapted_riccati_value,
    evaluate_control,
    evaluate_cost,
    optimize_pathwise,
    optimize_policy,
    riccati_kernel,
    riccati_oracle,
    trapezoid_weights,
)

LQ = LqParams(0.5, 1.0, 0.2, 0.1, 1.0, 1.0)
SMALL = OptConfig(n_train=300, n_eval=600, n_time_cells=4, n_space_cells=8, control_points=21, step=2.0**-5)


class XSquared:
    def __call__(self, t, x, mu, u):
        return x[..., 0] ** 2


class One:
    def __call__(self, t, x, mu, u):
        return np.ones(x.shape[:-1])


class USquared:
    def __call__(self, t, x, mu, u):
        return u[..., 0] ** 2


class UDrift:
    def __call__(self, t, x, mu, u):
        return u


def zero_kernel(problem):
    lay = make_layout(problem, 4, 4, 5, (-1, 1))
    return lay.dirac(lay.nearest_index(0.0))


@given(st.lists(st.floats(0.001, 1), min_size=1, max_size=20))
def test_trapezoid_weights_sum_to_horizon(dts):
    t = np.concatenate([[0.0], np.cumsum(dts)])
    assert trapezoid_weights(t).sum() == pytest.approx(t[-1], rel=1e-12)


def test_evaluate_cost_trivial_costs():
    p0 = constant_problem(0.3, 0.5)
    flow, _ = propagate_fp(p0, None, zero_kernel(p0), 0.1, 20, 0)
    assert evaluate_cost(flow, zero_kernel(p0), p0) == 0.0
    p1 = constant_problem(0.3, 0.5, cost=One(), horizon=1.7)
    flow, _ = propagate_fp(p1, None, zero_kernel(p1), 0.1, 20, 0)
    assert evaluate_cost(flow, zero_kernel(p1), p1) == pytest.approx(1.7, abs=1e-12)


def test_evaluate_cost_lq_zero_control(lq):
    p = lq.with_intensity(IntensitySpec.constant_mark(0.0))
    k = zero_kernel(p)
    flow, ens = propagate_fp(p, None, k, 2.0**-8, 20000, 0)
    exact = zero_control_second_moment_cost(0.5, 0.2, 0.1, 1.0, 1.0, 0.5, [], 1.0)
    se = ens.costs.std(ddof=1) / np.sqrt(ens.costs.size)
    assert abs(evaluate_cost(flow, k, p) - exact) <= 3 * se + 0.01 * exact
    assert evaluate_cost(flow, k, p) == pytest.approx(ens.costs.mean(), rel=1e-12)


def test_flat_objective_accepts_nothing():
    p = constant_problem(0.2, 0.3, cost=XSquared())
    res = optimize_pathwise(p, None, SMALL, 0)
    assert res.diagnostics["accepted"] == 0 and res.diagnostics["converged"]
    lay = SMALL.layout(p, None)
    init = evaluate_control(p, None, lay.dirac(lay.midpoint_index()), SMALL.step, SMALL.n_eval, 0)
    assert res.value == init.mean()


def test_pointwise_cost_puts_mass_on_zero():
    base = constant_problem(0.0, 0.3)
    p = Problem(**{**base.__dict__, "drift": UDrift(), "running_cost": USquared(),
                   "control_set": ControlSet.finite([[-1.0], [0.0], [1.0]])})
    lay = make_layout(p, 4, 4)
    res = optimize_pathwise(p, None, SMALL, 0, init_kernel=lay.dirac(2), layout=lay)
    visited = res.kernel.table[:, 1:-1]
    assert np.all(visited[..., 1] == 1.0)


def test_lq_one_jump_near_oracle(lq):
    path = PointPath.from_events(1.0, [(0.5, 1.0)])
    res = optimize_pathwise(lq, path, OptConfig(n_eval=8000), 0)
    oracle, _ = riccati_oracle(LQ, path, 1.0, 1.0, 0.5)
    assert abs(res.value - oracle) <= 3 * res.value_se + 0.03 * oracle
    hist = res.diagnostics["objective_history"]
    assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_richer_kernel_class_does_not_hurt(lq, two_jump_path):
    coarse = optimize_pathwise(lq, two_jump_path, SMALL, 0)
    fine = optimize_pathwise(lq, two_jump_path, OptConfig(n_train=300, n_eval=600, step=2.0**-5), 0)
    d = fine.eval_costs - coarse.eval_costs
    assert d.mean() <= 3 * d.std(ddof=1) / np.sqrt(d.size) + 0.02 * coarse.value


def test_oracle_feedback_cost_matches_oracle(lq, two_jump_path):
    value, sol = riccati_oracle(LQ, two_jump_path, 1.0, 1.0, 0.5)
    lay = make_layout(lq, 32, 64, 161, (-5, 5), jump_times=two_jump_path.times)
    k = riccati_kernel(sol, lay)
    _, ens = propagate_fp(lq, two_jump_path, k, 2.0**-7, 20000, 0)
    se = ens.costs.std(ddof=1) / np.sqrt(ens.costs.size)
    assert abs(ens.costs.mean() - value) <= 3 * se + 0.02 * value


def test_riccati_examples(two_jump_path):
    assert riccati_oracle(LqParams(0.5, 1, 0.2, 0.1, 0.0, 1.0), two_jump_path, 1.0, 1.0, 0.5)[0] == 0.0
    T = 0.3
    _, sol = riccati_oracle(LqParams(0.0, 1.0, 0.0, 0.1, 1.0, 1.0), PointPath(T, [], np.zeros((0, 1))), T, 1.0, 0.0)
    assert sol.P[0] == pytest.approx(np.tanh(T), abs=1e-8)
    no_c = LqParams(0.5, 1.0, 0.2, 0.0, 1.0, 1.0)
    v1 = riccati_oracle(no_c, two_jump_path, 1.0, 1.0, 0.5)[0]
    v2 = riccati_oracle(no_c, PointPath.from_events(1.0, [(0.9, 1.0)]), 1.0, 1.0, 0.5)[0]
    assert v1 == pytest.approx(v2, rel=1e-12)


def test_adapted_value_without_jumps_matches_pathwise():
    empty = PointPath(1.0, [], np.zeros((0, 1)))
    assert adapted_riccati_value(LQ, 0.0, 1.0, 1.0, 0.5) == pytest.approx(riccati_oracle(LQ, empty, 1.0, 1.0, 0.5)[0], rel=1e-10)


def test_riccati_blow_up_is_rejected():
    with pytest.raises(ValueError, match="blows up"):
        riccati_oracle(LqParams(5.0, 0.0, 0.2, 5.0, 1.0, 1.0),
                       PointPath.from_events(10.0, [(t, 1.0) for t in np.linspace(0.5, 9.5, 19)]), 10.0, 1.0, 0.5)


def test_policy_on_empty_paths_matches_pathwise_scale(lq):
    p = lq.with_intensity(IntensitySpec.constant_mark(0.0))
    empty = [PointPath(1.0, [], np.zeros((0, 1)))] * 3
    res = optimize_policy(p, empty, SMALL, PolicyConfig(n_train_per_path=100), 0)
    oracle = riccati_oracle(LQ, empty[0], 1.0, 1.0, 0.5)[0]
    assert abs(res.value - oracle) <= 3 * res.value_se + 0.1 * oracle
    assert len(res.path_values) == 3
