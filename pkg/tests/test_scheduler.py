import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mecoffload import _kernels
from mecoffload.scheduler import ServerConfig, schedule_arrays, schedule_step, t_mec
from mecoffload.errors import ConfigError

from oracles import event_sim_schedule, max_concurrency


def cfg(units):
    return ServerConfig(units, 4e9, 400 * 8e6)


def test_empty():
    assert schedule_step([], cfg(2)) == []


def test_hand_example_two_units():
    out = {e.task_id: e for e in schedule_step([(0, 0.1, 1.0), (1, 0.2, 1.0), (2, 0.3, 1.0)], cfg(2))}
    assert (out[0].start, out[0].finish) == (0.1, 1.1)
    assert (out[1].start, out[1].finish) == (0.2, 1.2)
    assert out[2].start == pytest.approx(1.1) and out[2].finish == pytest.approx(2.1)
    assert t_mec(out[2]) == pytest.approx(2.1)


def test_uncontended_tasks_start_on_arrival():
    tasks = [(i, 0.1 * i, 0.5) for i in range(4)]
    for e in schedule_step(tasks, cfg(4)):
        assert e.start == e.arrival
        assert t_mec(e) == e.arrival + e.service


def test_zero_service():
    out = schedule_step([(0, 0.0, 2.0), (1, 0.5, 0.0)], cfg(1))
    assert out[1].finish == out[1].start == 2.0


def test_arrival_ties_break_by_task_id():
    out = {e.task_id: e for e in schedule_step([(5, 0.3, 1.0), (2, 0.3, 1.0)], cfg(1))}
    assert out[2].start == 0.3
    assert out[5].start == pytest.approx(1.3)


def test_invalid_server():
    with pytest.raises(ConfigError):
        ServerConfig(0, 4e9, 1.0)


task_lists = st.lists(st.tuples(st.floats(0, 2), st.floats(0, 1)), max_size=8)


@settings(max_examples=200, deadline=None)
@given(raw=task_lists, units=st.integers(1, 3))
def test_matches_event_simulator(raw, units):
    tasks = [(i, a, s) for i, (a, s) in enumerate(raw)]
    ref = event_sim_schedule(tasks, units)
    for e in schedule_step(tasks, cfg(units)):
        assert (e.start, e.finish) == ref[e.task_id]
        assert e.finish == e.start + e.service
        assert e.start >= e.arrival


@settings(max_examples=200, deadline=None)
@given(raw=task_lists, units=st.integers(1, 3), seed=st.integers(0, 2**32 - 1))
def test_order_invariance_and_capacity(raw, units, seed):
    tasks = [(i, a, s) for i, (a, s) in enumerate(raw)]
    shuffled = list(tasks)
    np.random.default_rng(seed).shuffle(shuffled)
    a = {e.task_id: (e.start, e.finish) for e in schedule_step(tasks, cfg(units))}
    b = {e.task_id: (e.start, e.finish) for e in schedule_step(shuffled, cfg(units))}
    assert a == b
    assert max_concurrency(a.values()) <= units


@settings(max_examples=200, deadline=None)
@given(raw=task_lists.filter(lambda r: len(r) >= 2), units=st.integers(1, 3), data=st.data())
def test_removing_a_task_never_delays_others(raw, units, data):
    tasks = [(i, a, s) for i, (a, s) in enumerate(raw)]
    drop = data.draw(st.integers(0, len(tasks) - 1))
    full = {e.task_id: e.start for e in schedule_step(tasks, cfg(units))}
    rest = {e.task_id: e.start for e in schedule_step(tasks[:drop] + tasks[drop + 1:], cfg(units))}
    for tid, s in rest.items():
        assert s <= full[tid]


def test_numba_and_numpy_paths_agree():
    if not _kernels.HAVE_NUMBA:
        pytest.skip("numba not installed")
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 9))
        arr, svc = rng.uniform(0, 2, n), rng.uniform(0, 1, n)
        order = np.lexsort((np.arange(n), arr)).astype(np.int64)
        units = int(rng.integers(1, 4))
        a = _kernels.fifo_units_numba(arr, svc, order, units)
        b = _kernels.fifo_units_numpy(arr, svc, order, units)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_schedule_arrays_aligned_with_input():
    start, finish = schedule_arrays([3, 1], [0.5, 0.2], [1.0, 1.0], 1)
    assert start.tolist() == [1.2, 0.2]
    assert finish.tolist() == [2.2, 1.2]
