import threading
import time

import pytest

import grid_workers


def _tasks(n):
    return [((ix, iy), ix * 10 + iy) for iy in range(n) for ix in range(n)]


@pytest.mark.parametrize('workers', [1, 2, 4])
def test_results_do_not_depend_on_worker_count(workers):
    results = grid_workers.run_grid(_tasks(5), lambda key, value: value * value, workers=workers)
    assert results == {key: value * value for key, value in _tasks(5)}
    assert list(results) == [key for key, _ in _tasks(5)]


def test_work_runs_on_several_threads():
    seen = set()
    lock = threading.Lock()

    def work(key, value):
        with lock:
            seen.add(threading.get_ident())
        time.sleep(0.01)
        return value

    grid_workers.run_grid(_tasks(4), work, workers=4)
    assert len(seen) > 1


def test_first_error_in_task_order_is_raised():
    def work(key, value):
        if key in ((3, 1), (1, 2)):
            raise RuntimeError(f"failed at {key}")
        return value

    with pytest.raises(RuntimeError, match=r"\(3, 1\)"):
        grid_workers.run_grid(_tasks(4), work, workers=1)


def test_duplicate_keys_rejected():
    with pytest.raises(ValueError):
        grid_workers.run_grid([((0, 0), 1), ((0, 0), 2)], lambda k, v: v)


def test_empty_task_list():
    assert grid_workers.run_grid([], lambda k, v: v, workers=3) == {}


def test_progress_lines(capsys):
    grid_workers.run_grid(_tasks(2), lambda k, v: v, workers=1, label='cells', print_interval=2)
    out = capsys.readouterr().out
    assert '[2/4] cells' in out and '[4/4] cells' in out


@pytest.mark.parametrize('workers', [1, 3])
def test_collect_keeps_going_after_a_failure(workers):
    def work(key, value):
        if key in ((3, 1), (1, 2)):
            raise RuntimeError(f"failed at {key}")
        return value

    results, failures = grid_workers.run_grid_collect(_tasks(4), work, workers=workers)
    assert list(failures) == [(3, 1), (1, 2)]
    assert all(isinstance(e, RuntimeError) for e in failures.values())
    assert len(results) == 14
    assert (3, 1) not in results and results[(0, 0)] == 0
