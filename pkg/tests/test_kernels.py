import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pathwise_mfc.kernels import ControlKernel, JumpHistoryPolicy, make_layout, space_cell_index, strictify

T_EDGES = np.array([0.0, 0.5, 1.0])
S_EDGES = (np.array([-1.0, 0.0, 1.0]),)
GRID = np.array([[-1.0], [0.0], [1.0]])


def kernel_with(vec):
    return ControlKernel.constant(T_EDGES, S_EDGES, GRID, vec)


def test_strictify_examples():
    d = ControlKernel.dirac(T_EDGES, S_EDGES, GRID, 2)
    assert np.array_equal(strictify(d).table, d.table)
    assert np.array_equal(strictify(kernel_with([0.2, 0.5, 0.3])).table[0, 0], [0, 1, 0])
    assert np.array_equal(strictify(kernel_with([0.5, 0.5, 0.0])).table[0, 0], [1, 0, 0])


def test_rows_must_be_probabilities():
    with pytest.raises(ValueError):
        kernel_with([0.2, 0.2, 0.2])
    with pytest.raises(ValueError):
        kernel_with([1.2, -0.2, 0.0])
    with pytest.raises(ValueError):
        ControlKernel(np.array([0.0, 0.0]), S_EDGES, GRID, np.full((1, 2, 3), 1 / 3))


def test_outside_states_use_boundary_cells():
    idx = space_cell_index(S_EDGES, np.array([[-50.0], [-0.5], [0.5], [50.0]]))
    assert idx.tolist() == [0, 0, 1, 1]


def test_two_dimensional_cells_are_c_ordered():
    edges = (np.array([0.0, 1.0, 2.0]), np.array([0.0, 1.0, 2.0, 3.0]))
    assert space_cell_index(edges, np.array([[1.5, 2.5]])).tolist() == [1 * 3 + 2]


def test_from_feedback_picks_nearest():
    k = ControlKernel.from_feedback(lambda t, x: -x, T_EDGES, S_EDGES, GRID)
    # centres +-0.5 map to -+0.5, equidistant from two grid points; the first wins
    assert k.is_dirac
    k2 = ControlKernel.from_feedback(lambda t, x: -2 * x, T_EDGES, S_EDGES, GRID)
    assert np.argmax(k2.table[0, 0]) == 2 and np.argmax(k2.table[0, 1]) == 0


@given(st.integers(0, 2**31))
def test_serialisation_round_trip(seed):
    k = ControlKernel.random(T_EDGES, S_EDGES, GRID, np.random.default_rng(seed))
    back = ControlKernel.from_dict(k.to_dict())
    assert np.array_equal(back.table, k.table) and np.array_equal(back.time_edges, k.time_edges)


@given(arrays(float, (2, 2, 3), elements=st.floats(0.01, 1)))
def test_strictify_is_dirac_on_argmax(raw):
    k = ControlKernel(T_EDGES, S_EDGES, GRID, raw / raw.sum(-1, keepdims=True))
    s = strictify(k)
    assert s.is_dirac
    assert np.array_equal(np.argmax(s.table, -1), np.argmax(k.table, -1))
    assert np.all(s.entropy() == 0)


@given(arrays(float, (2, 2, 3), elements=st.floats(0.01, 1)))
def test_entropy_bounded_by_uniform(raw):
    k = ControlKernel(T_EDGES, S_EDGES, GRID, raw / raw.sum(-1, keepdims=True))
    assert np.all(k.entropy() <= np.log(3) + 1e-12) and np.all(k.entropy() >= -1e-12)


def test_layout_cells_include_jump_times(lq):
    lay = make_layout(lq, 4, 8, 11, (-2, 2), jump_times=[0.3, 0.5])
    assert 0.3 in lay.time_edges and np.sum(lay.time_edges == 0.5) == 1
    assert lay.space_edges[0][0] == pytest.approx(1 - 3.0) and lay.control_grid.shape == (11, 1)
    assert lay.control_grid[lay.midpoint_index(), 0] == 0.0


def test_jump_history_keys():
    base = kernel_with([0, 1, 0])
    pol = JumpHistoryPolicy.uniform_from(base, 2, 2, 1.0)
    assert pol.key(0, 0.0) == 0
    assert pol.key(1, 0.2) == 1 and pol.key(1, 0.7) == 2
    assert pol.key(5, 0.7) == 4
    keys = pol.keys_along(np.array([0.0, 0.2, 0.3, 0.8]), np.array([0.3]))
    assert keys.tolist() == [0, 0, 1, 1]
    back = JumpHistoryPolicy.from_dict(pol.to_dict())
    assert back.n_keys(2, 2) == len(back.kernels) == 5
