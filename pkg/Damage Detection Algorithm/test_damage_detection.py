import numpy as np
import pytest

from bayes_utils import McmcOptions, PosteriorChain, PriorBox
from calibrate import CalibrationResult, ParameterMap, calibrate_grid, map_statistics
from damage_detection import Thresholds, derive_thresholds, null_region, thresholds_from_values
from damage_detection import test_chain as run_test_chain
from damage_detection import test_grid as run_test_grid
from feature_utils import EchoWindow, estimate_covariance, reference_subset, select_dominant_bins
from signal_core import (AScan, InsufficientDataError, InvalidArgumentError, MaterialParams,
                         NumericalFailureError, ScanSet, make_time_grid)
from synth_oracle import SyntheticPlateSpec, make_synthetic_plate

THRESHOLDS = Thresholds(b_crit=0.25, c_crit=0.212)


def _chain(samples):
    samples = np.asarray(samples, dtype=float)
    return PosteriorChain(samples=samples, log_posterior=np.zeros(len(samples)), accepted=len(samples) // 2,
                          burn_in=0, seed=None)


def _gaussian(mean, std):
    def log_target(b, c):
        return -0.5 * (((b - mean[0]) / std[0]) ** 2 + ((c - mean[1]) / std[1]) ** 2)
    return log_target


def _dummy_scans(faulty=()):
    grid = make_time_grid(1.0, 4)
    scans = [AScan(grid=grid, samples=np.zeros(4), index=(ix, iy)) for iy in range(3) for ix in range(3)]
    return ScanSet(locations=scans, label='dummy').with_faulty(faulty)


def _log_target_for(scan):
    if scan.index == (1, 1):
        return _gaussian((0.45, 0.21), (0.03, 0.003))
    return _gaussian((0.12, 0.224), (0.03, 0.003))


# ---------------------------------------------------------------------------
# thresholds

def test_thresholds_from_values():
    values = np.arange(100.0)
    thresholds = thresholds_from_values(values, values)
    assert thresholds.b_crit == pytest.approx(98.01)
    assert thresholds.c_crit == pytest.approx(0.99)
    assert thresholds.quantile_level == 0.99


def test_thresholds_ignore_missing_cells():
    values = np.concatenate([np.arange(20.0), [np.nan] * 5])
    thresholds = thresholds_from_values(values, values, quantile=0.5)
    assert thresholds.b_crit == pytest.approx(9.5)


def test_thresholds_need_twenty_cells():
    with pytest.raises(InsufficientDataError):
        thresholds_from_values(np.arange(19.0), np.arange(19.0))
    with pytest.raises(InvalidArgumentError):
        Thresholds(0.2, 0.2, quantile_level=0.4)


def _reference_map(nx=5, ny=5, seed=0):
    rng = np.random.default_rng(seed)
    results = {(ix, iy): CalibrationResult(MaterialParams(0.12 + 0.01 * rng.standard_normal(),
                                                          0.224 + 0.001 * rng.standard_normal()), 0.01, 30, True)
               for iy in range(ny) for ix in range(nx)}
    return ParameterMap(shape=(nx, ny), results=results, label='reference')


def test_derive_thresholds_from_a_map():
    pmap = _reference_map()
    mask = np.ones((5, 5), dtype=bool)
    thresholds = derive_thresholds(pmap, mask, prior=PriorBox())
    b = pmap.values('b').ravel()
    c = pmap.values('c').ravel()
    assert thresholds.b_crit == pytest.approx(np.quantile(b, 0.99))
    assert thresholds.c_crit == pytest.approx(np.quantile(c, 0.01))
    assert thresholds.provenance == 'reference'
    assert thresholds.b_crit > np.median(b) and thresholds.c_crit < np.median(c)


def test_derive_thresholds_checks():
    pmap = _reference_map()
    with pytest.raises(InvalidArgumentError):
        derive_thresholds(pmap, np.ones((4, 5), dtype=bool))
    mask = np.zeros((5, 5), dtype=bool)
    mask[:3] = True                       # 15 cells
    with pytest.raises(InsufficientDataError):
        derive_thresholds(pmap, mask)
    with pytest.raises(InvalidArgumentError):
        derive_thresholds(pmap, np.ones((5, 5), dtype=bool), prior=PriorBox(0.05, 0.1, 0.2, 0.25))


def test_null_region_is_strict():
    inside = null_region(THRESHOLDS)
    assert inside(0.2, 0.22)
    assert not inside(0.25, 0.22)
    assert not inside(0.2, 0.212)
    assert inside(np.array([0.1, 0.3]), np.array([0.22, 0.22])).tolist() == [True, False]


# ---------------------------------------------------------------------------
# single chain

def test_chain_inside_the_null_is_kept():
    result = run_test_chain(_chain(np.tile([0.1, 0.22], (200, 1))), THRESHOLDS)
    assert result.p_null == 1.0 and not result.rejected
    assert result.standard_error == 0.0


def test_chain_outside_the_null_is_rejected():
    result = run_test_chain(_chain(np.tile([0.4, 0.21], (200, 1))), THRESHOLDS)
    assert result.p_null == 0.0 and result.rejected


def test_rejection_uses_the_level():
    samples = np.tile([0.4, 0.21], (200, 1))
    samples[:3] = [0.1, 0.22]              # 1.5 % inside
    assert not run_test_chain(_chain(samples), THRESHOLDS, level=0.01).rejected
    assert run_test_chain(_chain(samples), THRESHOLDS, level=0.02).rejected


def test_short_chain_is_insufficient():
    with pytest.raises(InsufficientDataError):
        run_test_chain(_chain(np.tile([0.1, 0.22], (50, 1))), THRESHOLDS)


# ---------------------------------------------------------------------------
# grid

def test_grid_flags_the_damaged_cell():
    scans = _dummy_scans(faulty=[(2, 2)])
    pmap = run_test_grid(scans, THRESHOLDS, PriorBox(), None, None, None, options=McmcOptions(root_seed=4),
                     log_target_for=_log_target_for, keep_chains=True)
    assert pmap.results[(2, 2)] is None
    assert pmap.results[(1, 1)].rejected and pmap.results[(1, 1)].p_null < 0.01
    for index, result in pmap.results.items():
        if index not in ((1, 1), (2, 2)):
            assert not result.rejected and result.p_null > 0.5
    rejected = pmap.values('rejected')
    assert rejected[1, 1] == 1.0 and np.isnan(rejected[2, 2])
    assert pmap.rejection_fraction() == pytest.approx(1 / 8)
    mask = np.ones((3, 3), dtype=bool)
    mask[1, 1] = False
    assert pmap.rejection_fraction(mask) == 0.0
    assert set(pmap.chains) == {idx for idx in pmap.results if idx != (2, 2)}
    assert pmap.layer('p_null').unit == 'probability'


@pytest.mark.parametrize('workers', [1, 3])
def test_grid_leaves_a_failed_cell_empty(workers, capsys):
    def log_target_for(scan):
        if scan.index == (0, 2):
            raise NumericalFailureError("non-finite forward solve")
        return _log_target_for(scan)

    pmap = run_test_grid(_dummy_scans(), THRESHOLDS, PriorBox(), None, None, None,
                         options=McmcOptions(burn_in=20, n=200, root_seed=4, workers=workers),
                         log_target_for=log_target_for)
    assert list(pmap.failures) == [(0, 2)]
    assert 'NumericalFailureError: non-finite forward solve' in pmap.failures[(0, 2)]
    assert pmap.results[(0, 2)] is None
    p_null = pmap.values('p_null')
    assert np.isnan(p_null[2, 0])
    assert np.isfinite(p_null).sum() == 8
    assert pmap.results[(1, 1)].rejected
    assert '⚠ cell (0, 2) failed' in capsys.readouterr().out


def test_grid_raises_when_every_cell_fails():
    def log_target_for(scan):
        raise NumericalFailureError(f"no solve at {scan.index}")

    with pytest.raises(NumericalFailureError, match=r"\(0, 0\)"):
        run_test_grid(_dummy_scans(), THRESHOLDS, PriorBox(), None, None, None,
                      options=McmcOptions(burn_in=20, n=200), log_target_for=log_target_for)


def test_grid_is_independent_of_worker_count():
    scans = _dummy_scans()
    runs = [run_test_grid(scans, THRESHOLDS, PriorBox(), None, None, None,
                      options=McmcOptions(burn_in=20, n=200, root_seed=8, workers=w),
                      log_target_for=_log_target_for) for w in (1, 3)]
    for index in runs[0].results:
        assert runs[0].results[index] == runs[1].results[index]


def test_grid_argument_checks():
    scans = _dummy_scans()
    with pytest.raises(InvalidArgumentError):
        run_test_grid(scans, THRESHOLDS, PriorBox(), None, None, None, level=1.0, log_target_for=_log_target_for)
    with pytest.raises(InvalidArgumentError):
        run_test_grid(scans, THRESHOLDS, PriorBox(), None, None, None, options=McmcOptions(n=50),
                  log_target_for=_log_target_for)
    with pytest.raises(InvalidArgumentError):
        run_test_grid(scans, THRESHOLDS, PriorBox(), None, None, None)


def test_rejection_fraction_needs_tested_cells():
    scans = _dummy_scans()
    pmap = run_test_grid(scans, THRESHOLDS, PriorBox(), None, None, None, options=McmcOptions(burn_in=10, n=100),
                     log_target_for=_log_target_for)
    with pytest.raises(InsufficientDataError):
        pmap.rejection_fraction(np.zeros((3, 3), dtype=bool))


# ---------------------------------------------------------------------------
# synthetic plate, solver-backed

@pytest.mark.slow
@pytest.mark.parametrize('shape, patch, seed', [((8, 7), (2, 6, 2, 6), 6), ((21, 19), (8, 12, 7, 11), 7)])
def test_damaged_patch_end_to_end(small_pulse, small_plate, shape, patch, seed):
    spec = SyntheticPlateSpec(shape=shape, patch=patch, noise_sigma=0.01, seed=seed,
                              param_jitter=(0.015, 0.001))
    assert int(spec.patch_mask().sum()) == 16
    scans = make_synthetic_plate(spec, small_pulse, small_plate, workers=4)
    undamaged = ~spec.patch_mask()

    calibrated = calibrate_grid(scans, small_pulse, small_plate, workers=4)
    base_b, std_b = map_statistics(calibrated, undamaged, 'b')
    base_c, std_c = map_statistics(calibrated, undamaged, 'c')
    patch_b, _ = map_statistics(calibrated, spec.patch_mask(), 'b')
    patch_c, _ = map_statistics(calibrated, spec.patch_mask(), 'c')
    assert patch_b - base_b > 5 * std_b
    assert patch_b - base_b > 0.1
    assert base_c - patch_c > 5 * std_c

    thresholds = derive_thresholds(calibrated, undamaged, prior=PriorBox())
    reference = reference_subset(scans, undamaged)
    window = EchoWindow()
    bins = select_dominant_bins(reference, window)
    cov = estimate_covariance(reference, window, bins)
    options = McmcOptions(burn_in=100, n=400, root_seed=0, workers=4)
    pmap = run_test_grid(scans, thresholds, PriorBox(), cov, small_pulse, small_plate, window, bins,
                     options=options)
    assert pmap.rejection_fraction(spec.patch_mask()) == 1.0
    assert pmap.rejection_fraction(undamaged) <= 0.03
