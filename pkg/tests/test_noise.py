import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pathwise_mfc.model import IntensitySpec
from pathwise_mfc.noise import PointPath, counting_measure, jump_count, sample_point_path, sample_point_paths


def test_zero_rate_gives_empty_path():
    p = sample_point_path(IntensitySpec.constant_mark(0.0), 1.0, 3)
    assert p.n_events == 0 and jump_count(p) == 0
    assert all(counting_measure(p, t) == 0 for t in (0.0, 0.5, 1.0))


def test_same_seed_same_path():
    spec = IntensitySpec.constant_mark(3.0)
    assert sample_point_path(spec, 2.0, 11).same_events(sample_point_path(spec, 2.0, 11))
    assert not sample_point_path(spec, 2.0, 11).same_events(sample_point_path(spec, 2.0, 12))


def test_poisson_mean_count():
    spec = IntensitySpec.constant_mark(2.0)
    k = 100_000
    counts = np.array([sample_point_path(spec, 1.0, s).n_events for s in range(k)])
    assert abs(counts.mean() - 2.0) <= 3 * np.sqrt(2.0 / k)


def test_counting_examples():
    p = PointPath.from_events(1.0, [(0.3, 1.0), (0.7, 2.0)])
    assert counting_measure(p, 0.5, lambda z: True) == 1
    assert counting_measure(p, 1.0, lambda z: z[0] > 5) == 0
    assert jump_count(p) == 2 == counting_measure(p, 1.0)
    three = PointPath.from_events(1.0, [(0.1, 0), (0.2, 0), (0.9, 0)])
    assert jump_count(three) == 3
    with pytest.raises(ValueError):
        counting_measure(p, 1.5)


def test_path_invariants():
    with pytest.raises(ValueError):
        PointPath.from_events(1.0, [(0.5, 1.0), (0.5, 1.0)])
    with pytest.raises(ValueError):
        PointPath.from_events(1.0, [(0.0, 1.0)])
    with pytest.raises(ValueError):
        PointPath.from_events(1.0, [(1.2, 1.0)])


@given(st.floats(0, 5), st.floats(0.1, 3), st.integers(0, 2**31))
def test_sampled_paths_are_simple_and_in_range(rate, horizon, seed):
    p = sample_point_path(IntensitySpec.constant_mark(rate), horizon, seed)
    assert np.all(np.diff(p.times) > 0)
    assert np.all((p.times > 0) & (p.times <= horizon))


@given(st.floats(0, 5), st.integers(0, 1000))
def test_text_round_trip_is_exact(rate, seed):
    spec = IntensitySpec(rate, marks=np.array([[0.1], [1 / 3]]), mark_probs=np.array([0.5, 0.5]))
    p = sample_point_path(spec, 1.0, seed)
    q = PointPath.from_text(p.to_text())
    assert p.same_events(q) and q.source_seed == seed


@given(st.integers(0, 50), st.lists(st.floats(0, 1), min_size=2, max_size=6))
def test_counting_is_monotone_and_right_continuous(seed, ts):
    p = sample_point_path(IntensitySpec.constant_mark(4.0), 1.0, seed)
    ts = sorted(ts)
    counts = [counting_measure(p, t) for t in ts]
    assert counts == sorted(counts)
    for t in p.times:
        assert counting_measure(p, float(t)) == counting_measure(p, float(np.nextafter(t, 2)))


def test_disjoint_increments_uncorrelated():
    spec = IntensitySpec.constant_mark(3.0)
    paths = sample_point_paths(spec, 1.0, 5, 20_000)
    a = np.array([counting_measure(p, 0.5) for p in paths])
    b = np.array([counting_measure(p, 1.0) - counting_measure(p, 0.5) for p in paths])
    r = np.corrcoef(a, b)[0, 1]
    assert abs(r) <= 3 / np.sqrt(len(paths))


def test_box_marks_and_file_round_trip(tmp_path):
    spec = IntensitySpec(2.0, mark_low=np.array([0.0, -1.0]), mark_high=np.array([1.0, 1.0]))
    p = sample_point_path(spec, 1.0, 4)
    p.save(tmp_path / "p.txt")
    q = PointPath.load(tmp_path / "p.txt")
    assert q.marks.shape == (p.n_events, 2) and p.same_events(q)
