import time

import pytest

from performance_monitor import LoopTimer, SectionTimer, machine_info, time_call


def test_loop_timer_ticks():
    timer = LoopTimer(window_size=3)
    assert timer.get_stats() is None
    for _ in range(5):
        timer.tick()
    stats = timer.get_stats()
    assert stats['count'] == 3
    assert timer.sample_count == 5


def test_loop_timer_records():
    timer = LoopTimer()
    for seconds in (0.1, 0.2, 0.3, 0.4):
        timer.record(seconds)
    stats = timer.get_stats()
    assert stats['median_s'] == pytest.approx(0.25)
    assert stats['min_s'] == 0.1 and stats['max_s'] == 0.4
    assert stats['p90_s'] == pytest.approx(0.37)


def test_section_timer(capsys):
    sections = SectionTimer()
    sections.start('a')
    time.sleep(0.002)
    sections.end()
    sections.end()                      # no open section: ignored
    assert set(sections.means()) == {'a'}
    assert sections.means()['a'] > 0
    sections.print_stats()
    assert 'TOTAL' in capsys.readouterr().out


def test_time_call_counts_runs():
    calls = []
    timer = time_call(lambda: calls.append(1), repeats=3, warmup=2)
    assert len(calls) == 5
    assert timer.get_stats()['count'] == 3
    with pytest.raises(ValueError):
        time_call(lambda: None, repeats=0)


def test_machine_info_keys():
    assert {'platform', 'cpu_count', 'python', 'numpy'} <= set(machine_info())
