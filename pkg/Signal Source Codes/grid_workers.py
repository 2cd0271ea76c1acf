"""
Worker threads for per-location work over a scan grid.

Tasks go into a Queue, daemon worker threads drain it and store results under a
lock keyed by grid index, so the output never depends on worker count or
scheduling order.
"""

import os
import threading
from queue import Empty, Queue
from typing import Callable, Dict, Hashable, Iterable, Optional, Tuple, TypeVar

WORKERS = int(os.getenv('ASCAN_WORKERS', '1'))
PRINT_INTERVAL = 0  # print progress every N finished cells (0 = quiet)

T = TypeVar('T')
R = TypeVar('R')


def run_grid(tasks: Iterable[Tuple[Hashable, T]], work: Callable[[Hashable, T], R],
             workers: Optional[int] = None, label: str = 'cells',
             print_interval: Optional[int] = None) -> Dict[Hashable, R]:
    """
    Run work(key, payload) for every task.

    Args:
        tasks: (key, payload) pairs, keys unique (grid indices)
        work: function evaluated per task; must not share mutable state
        workers: thread count (default ASCAN_WORKERS)
        label: name used in progress lines

    Returns:
        dict key -> result.  The first exception (in task order) is re-raised
        after all workers stopped.
    """
    workers = WORKERS if workers is None else int(workers)
    print_interval = PRINT_INTERVAL if print_interval is None else print_interval
    items = list(tasks)
    order = {key: i for i, (key, _) in enumerate(items)}
    if len(order) != len(items):
        raise ValueError("task keys must be unique")

    task_queue: Queue = Queue()
    for item in items:
        task_queue.put(item)

    results: Dict[Hashable, R] = {}
    errors: Dict[Hashable, BaseException] = {}
    lock = threading.Lock()
    stop_event = threading.Event()
    total = len(items)

    def worker():
        while not stop_event.is_set():
            try:
                key, payload = task_queue.get_nowait()
            except Empty:
                return
            try:
                value = work(key, payload)
            except Exception as e:
                with lock:
                    errors[key] = e
                stop_event.set()
                continue
            with lock:
                results[key] = value
                done = len(results)
            if print_interval and done % print_interval == 0:
                print(f"  [{done}/{total}] {label}")

    if workers <= 1:
        worker()
    else:
        threads = [threading.Thread(target=worker, daemon=True) for _ in range(min(workers, max(total, 1)))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()

    if errors:
        first = min(errors, key=order.__getitem__)
        raise errors[first]
    return {key: results[key] for key, _ in items if key in results}


def run_grid_collect(tasks: Iterable[Tuple[Hashable, T]], work: Callable[[Hashable, T], R],
                     workers: Optional[int] = None, label: str = 'cells',
                     print_interval: Optional[int] = None
                     ) -> Tuple[Dict[Hashable, R], Dict[Hashable, Exception]]:
    """
    Like run_grid, but a failing task is recorded and the others keep running.

    Returns:
        (results, failures), both keyed by task key in task order
    """

    def guarded(key, payload):
        try:
            return True, work(key, payload)
        except Exception as e:
            return False, e

    done = run_grid(tasks, guarded, workers, label, print_interval)
    results = {key: value for key, (ok, value) in done.items() if ok}
    failures = {key: value for key, (ok, value) in done.items() if not ok}
    return results, failures
