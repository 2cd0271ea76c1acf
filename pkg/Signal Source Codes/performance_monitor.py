"""
Timing helpers for the solver and chain benchmarks.

LoopTimer measures repeated runs of one operation, SectionTimer splits a
run into named stages.
"""

import os
import platform
import statistics
import time
from collections import deque
from typing import Callable, Dict, Optional

import numpy as np


class LoopTimer:
    """Measure and report wall time of repeated calls."""

    def __init__(self, window_size=1000):
        self.times = deque(maxlen=window_size)
        self.last_time = None
        self.sample_count = 0

    def tick(self):
        """Record an iteration boundary."""
        now = time.perf_counter()
        if self.last_time is not None:
            self.times.append(now - self.last_time)
        self.last_time = now
        self.sample_count += 1

    def record(self, seconds: float):
        """Add one measured duration directly."""
        self.times.append(float(seconds))
        self.sample_count += 1

    def get_stats(self) -> Optional[Dict[str, float]]:
        if not self.times:
            return None
        times_s = list(self.times)
        return {
            'count': len(times_s),
            'mean_s': statistics.mean(times_s),
            'median_s': statistics.median(times_s),
            'p90_s': float(np.percentile(times_s, 90)),
            'min_s': min(times_s),
            'max_s': max(times_s),
            'stdev_s': statistics.stdev(times_s) if len(times_s) > 1 else 0.0,
        }

    def print_stats(self, title: str = 'Timing'):
        stats = self.get_stats()
        if stats:
            print(f"\n=== {title} (last {stats['count']} runs) ===")
            print(f"Median: {stats['median_s']:.3f} s")
            print(f"P90:    {stats['p90_s']:.3f} s")
            print(f"Mean:   {stats['mean_s']:.3f} s")
            print(f"Min:    {stats['min_s']:.3f} s")
            print(f"Max:    {stats['max_s']:.3f} s")
            print("=" * 50)


class SectionTimer:
    """Measure time spent in named stages."""

    def __init__(self):
        self.sections: Dict[str, deque] = {}
        self.current_section = None
        self.section_start = None

    def start(self, name):
        if name not in self.sections:
            self.sections[name] = deque(maxlen=1000)
        self.current_section = name
        self.section_start = time.perf_counter()

    def end(self):
        if self.current_section and self.section_start is not None:
            elapsed = time.perf_counter() - self.section_start
            self.sections[self.current_section].append(elapsed)
            self.current_section = None
            self.section_start = None

    def means(self) -> Dict[str, float]:
        return {name: statistics.mean(t) for name, t in self.sections.items() if t}

    def print_stats(self):
        print("\n=== Section Timing Stats (ms) ===")
        section_means = sorted(self.means().items(), key=lambda x: x[1], reverse=True)
        total_time = sum(m for _, m in section_means)
        for name, mean_s in section_means:
            pct = (mean_s / total_time * 100) if total_time > 0 else 0
            print(f"{name:30s}: {1e3 * mean_s:9.3f} ms ({pct:5.1f}%)")
        print(f"{'TOTAL':30s}: {1e3 * total_time:9.3f} ms")
        print("=" * 50)


def time_call(fn: Callable[[], object], repeats: int, warmup: int = 1) -> LoopTimer:
    """Run fn `warmup` times untimed, then `repeats` times timed."""
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    for _ in range(warmup):
        fn()
    timer = LoopTimer(window_size=repeats)
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        timer.record(time.perf_counter() - start)
    return timer


def machine_info() -> Dict[str, str]:
    return {
        'platform': platform.platform(),
        'processor': platform.processor() or platform.machine(),
        'cpu_count': str(os.cpu_count()),
        'python': platform.python_version(),
        'numpy': np.__version__,
    }
