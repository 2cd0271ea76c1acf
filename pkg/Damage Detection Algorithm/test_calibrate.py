import numpy as np
import pytest

from calibrate import (BOX, CalibrationResult, NelderMeadOptions, ParameterMap, calibrate_grid,
                       calibrate_scan, map_statistics, misfit, nelder_mead)
from preprocess_utils import SmoothingOptions
from signal_core import (AScan, InvalidArgumentError, MaterialParams, OptimizationFailureError,
                         make_time_grid)
from synth_oracle import SyntheticPlateSpec, make_synthetic_plate
from telegraph_solver import forward_model

TRUTH = MaterialParams(0.12, 0.224)
START = MaterialParams(0.2, 0.22)


def test_quadratic_bowl():
    target = np.array([0.3, 0.23])
    result = nelder_mead(lambda p: float(np.sum((p - target) ** 2)), START)
    assert result.converged
    assert result.b == pytest.approx(0.3, abs=1e-4)
    assert result.c == pytest.approx(0.23, abs=1e-4)
    assert result.misfit < 1e-8
    assert result.evaluations > result.iterations


def test_rosenbrock_valley():
    def valley(p):
        x, y = p[0] / 0.3, p[1] / 0.225
        return 100.0 * (y - x * x) ** 2 + (1.0 - x) ** 2

    result = nelder_mead(valley, START, NelderMeadOptions(max_iterations=500))
    assert result.converged and result.iterations <= 500
    assert result.b == pytest.approx(0.3, abs=0.01)
    assert result.c == pytest.approx(0.225, abs=0.002)


def test_simplex_stays_in_the_box():
    # unconstrained minimum at b = 1 lies outside the box
    result = nelder_mead(lambda p: (p[0] - 1.0) ** 2 + (p[1] - 0.22) ** 2, START)
    assert BOX[0] <= result.b <= BOX[1] and BOX[2] <= result.c <= BOX[3]
    assert result.b == pytest.approx(0.6, abs=5e-3)


def test_start_on_the_upper_edge():
    result = nelder_mead(lambda p: float(np.sum((p - 0.4) ** 2)), MaterialParams(0.6, 0.25))
    assert result.converged


def test_non_finite_objective_everywhere():
    with pytest.raises(OptimizationFailureError):
        nelder_mead(lambda p: np.inf, START)

    def broken(p):
        raise InvalidArgumentError("no solution")

    with pytest.raises(OptimizationFailureError):
        nelder_mead(broken, START)


def test_empty_bounds():
    with pytest.raises(InvalidArgumentError):
        nelder_mead(lambda p: 0.0, START, NelderMeadOptions(bounds=(0.3, 0.3, 0.2, 0.25)))


def test_self_misfit_is_zero(small_pulse, small_plate):
    scan = forward_model(TRUTH, small_pulse, small_plate)
    assert misfit(TRUTH, scan, small_pulse, small_plate) < 1e-10
    assert misfit(START, scan, small_pulse, small_plate) > 0.01


def test_misfit_grid_mismatch(small_pulse, small_plate):
    scan = AScan(grid=make_time_grid(0.02, 1750), samples=np.zeros(1750))
    with pytest.raises(InvalidArgumentError):
        misfit(TRUTH, scan, small_pulse, small_plate)


def test_noiseless_recovery(small_pulse, small_plate):
    scan = forward_model(TRUTH, small_pulse, small_plate)
    result = calibrate_scan(scan, small_pulse, small_plate, START)
    assert result.converged
    assert abs(result.b - TRUTH.b) < 0.01
    assert abs(result.c - TRUTH.c) < 0.002


def test_pulse_from_scan_needs_t_ex(small_pulse, small_plate):
    scan = forward_model(TRUTH, small_pulse, small_plate)
    with pytest.raises(InvalidArgumentError):
        calibrate_scan(scan, None, small_plate, START)


def test_own_excitation_follows_the_smoothing_options(small_pulse, small_plate, small_grid):
    clean = forward_model(TRUTH, small_pulse, small_plate)
    rng = np.random.default_rng(11)
    scan = clean.with_samples(clean.samples + 0.01 * rng.standard_normal(small_grid.n_samples))
    implicit = calibrate_scan(scan, None, small_plate, START, t_ex=11.8)
    explicit = calibrate_scan(scan, None, small_plate, START, t_ex=11.8, smoothing=SmoothingOptions())
    tapered = calibrate_scan(scan, None, small_plate, START, t_ex=11.8,
                             smoothing=SmoothingOptions(taper_fraction=1.0))
    assert explicit.misfit == implicit.misfit and explicit.params == implicit.params
    assert tapered.misfit != implicit.misfit
    assert abs(tapered.b - TRUTH.b) < 0.05


def test_calibrate_grid_passes_the_smoothing_on(small_pulse, small_plate):
    spec = SyntheticPlateSpec(shape=(2, 1), patch=None, noise_sigma=0.01, seed=3)
    scans = make_synthetic_plate(spec, small_pulse, small_plate)
    default = calibrate_grid(scans, None, small_plate, START)
    tapered = calibrate_grid(scans, None, small_plate, START, smoothing=SmoothingOptions(taper_fraction=1.0))
    assert not np.array_equal(default.values('misfit'), tapered.values('misfit'))


def test_calibrate_grid_skips_faulty_cells(small_pulse, small_plate):
    spec = SyntheticPlateSpec(shape=(3, 1), patch=(1, 2, 0, 1))
    scans = make_synthetic_plate(spec, small_pulse, small_plate).with_faulty([(2, 0)])
    pmap = calibrate_grid(scans, small_pulse, small_plate, START, workers=2)
    assert pmap.results[(2, 0)] is None
    assert np.isnan(pmap.values('b')[0, 2])
    assert pmap.results[(1, 0)].b > pmap.results[(0, 0)].b
    assert pmap.results[(1, 0)].c < pmap.results[(0, 0)].c
    assert pmap.converged_mask().tolist() == [[True, True, False]]


def _pmap():
    def res(b, c, converged=True):
        return CalibrationResult(MaterialParams(b, c), 0.01, 20, converged)
    results = {(0, 0): res(0.1, 0.22), (1, 0): res(0.2, 0.21), (0, 1): res(0.3, 0.2, False), (1, 1): None}
    return ParameterMap(shape=(2, 2), results=results)


def test_parameter_map_layers():
    pmap = _pmap()
    b = pmap.values('b')
    assert b.shape == (2, 2) and b[1, 0] == 0.3 and np.isnan(b[1, 1])
    assert pmap.layer('c').unit == 'L/us'
    with pytest.raises(InvalidArgumentError):
        pmap.values('d')


def test_map_statistics():
    pmap = _pmap()
    mean, std = map_statistics(pmap, np.ones((2, 2), dtype=bool), 'b')
    assert mean == pytest.approx(0.2) and std == pytest.approx(0.1)
    assert map_statistics(pmap, np.array([[True, False], [False, False]]), 'b') == (0.1, 0.0)
    assert all(np.isnan(map_statistics(pmap, np.array([[False, False], [False, True]]), 'b')))


@pytest.mark.slow
def test_noisy_recovery_trials(small_pulse, small_plate):
    hits = 0
    for seed in range(50):
        spec = SyntheticPlateSpec(shape=(1, 1), patch=None, noise_sigma=0.01, seed=seed)
        scan = make_synthetic_plate(spec, small_pulse, small_plate).get(0, 0)
        result = calibrate_scan(scan, small_pulse, small_plate, START)
        if abs(result.b - TRUTH.b) < 0.05 and abs(result.c - TRUTH.c) < 0.005:
            hits += 1
    assert hits >= 48
