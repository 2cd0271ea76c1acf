"""
Bayesian damage test per location.

Critical values come from the calibrated parameters of the undamaged part of
the plate; a location is flagged when the posterior mass of the null region
{b < b_crit, c > c_crit} drops below the rejection level.
"""

import os
import sys
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'Signal Source Codes'))
from preprocess_utils import SmoothingOptions  # type: ignore
from scanset_io import MapLayer  # type: ignore
from signal_core import (AScan, ExcitationPulse, InsufficientDataError,  # type: ignore
                         InvalidArgumentError, PlateModel, ScanSet, cell_values)

from bayes_utils import (MIN_REGION_SAMPLES, LogTarget, McmcOptions, PosteriorChain, PriorBox,
                         chain_for_scan, location_seed, region_probability, run_cells, run_chain)
from calibrate import ParameterMap
from feature_utils import EchoWindow, FeatureCovariance

DEBUG = os.getenv('ASCAN_DEBUG', '0') == '1'

QUANTILE_LEVEL = 0.99
REJECTION_LEVEL = 0.01
MIN_THRESHOLD_CELLS = 20

LAYER_UNITS = {'p_null': 'probability', 'rejected': 'flag', 'standard_error': 'probability'}

__all__ = ['McmcOptions', 'Thresholds', 'TestResult', 'ProbabilityMap', 'derive_thresholds',
           'thresholds_from_values', 'null_region', 'test_chain', 'test_grid']


@dataclass(frozen=True)
class Thresholds:
    b_crit: float
    c_crit: float
    quantile_level: float = QUANTILE_LEVEL
    provenance: str = ''

    def __post_init__(self):
        if not 0.5 <= self.quantile_level < 1.0:
            raise InvalidArgumentError(f"quantile level must lie in [0.5, 1), got {self.quantile_level}")


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # not a pytest class

    p_null: float
    rejected: bool
    standard_error: float
    unreliable: bool = False
    diagnostics: Tuple[str, ...] = ()


@dataclass(frozen=True, eq=False)
class ProbabilityMap:
    shape: Tuple[int, int]
    results: Dict[Tuple[int, int], Optional[TestResult]]
    level: float = REJECTION_LEVEL
    thresholds: Optional[Thresholds] = None
    resolution: Tuple[float, float] = (5.0, 5.0)
    label: str = ''
    origin: Tuple[float, float] = (0.0, 0.0)
    chains: Dict[Tuple[int, int], PosteriorChain] = field(default_factory=dict)
    failures: Dict[Tuple[int, int], str] = field(default_factory=dict)

    def values(self, name: str) -> np.ndarray:
        if name not in LAYER_UNITS:
            raise InvalidArgumentError(f"unknown layer '{name}', expected one of {sorted(LAYER_UNITS)}")
        return cell_values(self.results, self.shape, name)

    def layer(self, name: str) -> MapLayer:
        return MapLayer.from_grid(self.values(name), name, LAYER_UNITS[name], self.resolution, self.origin)

    def rejection_fraction(self, mask: Optional[np.ndarray] = None) -> float:
        """Share of tested cells (inside the optional (ny, nx) mask) where the null is rejected."""
        rejected = self.values('rejected')
        tested = np.isfinite(rejected)
        if mask is not None:
            tested &= np.asarray(mask, dtype=bool)
        if not tested.any():
            raise InsufficientDataError("no tested cell in the selection")
        return float(rejected[tested].mean())

    def unreliable_cells(self):
        return [idx for idx, res in self.results.items() if res is not None and res.unreliable]


def thresholds_from_values(b_values, c_values, quantile: float = QUANTILE_LEVEL,
                           provenance: str = '') -> Thresholds:
    """b_crit at the upper quantile of b, c_crit at the lower quantile of c (linear interpolation)."""
    b_values = np.asarray(b_values, dtype=float)
    c_values = np.asarray(c_values, dtype=float)
    b_values = b_values[np.isfinite(b_values)]
    c_values = c_values[np.isfinite(c_values)]
    if min(b_values.size, c_values.size) < MIN_THRESHOLD_CELLS:
        raise InsufficientDataError(
            f"{min(b_values.size, c_values.size)} reference cells, at least {MIN_THRESHOLD_CELLS} needed")
    return Thresholds(b_crit=float(np.quantile(b_values, quantile)),
                      c_crit=float(np.quantile(c_values, 1.0 - quantile)),
                      quantile_level=quantile, provenance=provenance)


def derive_thresholds(reference_map: ParameterMap, undamaged_mask: np.ndarray,
                      quantile: float = QUANTILE_LEVEL, prior: Optional[PriorBox] = None) -> Thresholds:
    """Critical values from the calibrated cells inside the (ny, nx) undamaged mask."""
    mask = np.asarray(undamaged_mask, dtype=bool)
    nx, ny = reference_map.shape
    if mask.shape != (ny, nx):
        raise InvalidArgumentError(f"mask shape {mask.shape} does not match map (ny, nx)={(ny, nx)}")
    b = reference_map.values('b')
    c = reference_map.values('c')
    usable = mask & np.isfinite(b) & np.isfinite(c)
    thresholds = thresholds_from_values(b[usable], c[usable], quantile,
                                        provenance=reference_map.label or 'calibration map')
    if prior is not None and not prior.contains(thresholds.b_crit, thresholds.c_crit):
        raise InvalidArgumentError(f"critical values ({thresholds.b_crit}, {thresholds.c_crit}) outside the prior box")
    if DEBUG:
        print(f"✓ thresholds from {int(usable.sum())} cells: b_crit={thresholds.b_crit:.4f} "
              f"c_crit={thresholds.c_crit:.4f}")
    return thresholds


def null_region(thresholds: Thresholds) -> Callable:
    """Predicate b < b_crit and c > c_crit (strict), elementwise on arrays."""
    b_crit, c_crit = thresholds.b_crit, thresholds.c_crit

    def inside(b, c):
        result = (np.asarray(b) < b_crit) & (np.asarray(c) > c_crit)
        return bool(result) if np.ndim(result) == 0 else result
    return inside


def test_chain(chain: PosteriorChain, thresholds: Thresholds, level: float = REJECTION_LEVEL) -> TestResult:
    """Posterior probability of the null region on one chain."""
    estimate = region_probability(chain, null_region(thresholds))
    return TestResult(p_null=estimate.probability, rejected=estimate.probability < level,
                      standard_error=estimate.standard_error, unreliable=chain.unreliable,
                      diagnostics=chain.diagnostics)


test_chain.__test__ = False


def test_grid(scans: ScanSet, thresholds: Thresholds, prior: PriorBox, cov: Optional[FeatureCovariance],
              pulse: Optional[ExcitationPulse], plate: Optional[PlateModel],
              window: EchoWindow = EchoWindow(), bins: Sequence[int] = (),
              level: float = REJECTION_LEVEL, options: McmcOptions = McmcOptions(),
              log_target_for: Optional[Callable[[AScan], LogTarget]] = None,
              keep_chains: bool = False,
              smoothing: SmoothingOptions = SmoothingOptions()) -> ProbabilityMap:
    """
    Run the per-location chain and test the null region on every usable cell.

    Seeds follow location_seed(options.root_seed, index), the same streams
    the posterior maps use.  `log_target_for(scan)` swaps the feature
    likelihood for a given log density.  A cell whose chain raises is left
    empty (NaN in every layer) and listed in `failures`.
    """
    if not 0 < level < 1:
        raise InvalidArgumentError(f"rejection level must lie in (0, 1), got {level}")
    if options.n < MIN_REGION_SAMPLES:
        raise InvalidArgumentError(f"chain length {options.n} below {MIN_REGION_SAMPLES}")
    if log_target_for is None and (cov is None or plate is None or not bins):
        raise InvalidArgumentError("feature covariance, plate and bins are required without log_target_for")

    def work(index, scan):
        if log_target_for is not None:
            chain = run_chain(None, None, prior, options.schedule, options.burn_in, options.n,
                              seed=location_seed(options.root_seed, index), log_target=log_target_for(scan),
                              cache=options.cache)
        else:
            chain = chain_for_scan(scan, cov, window, bins, pulse, plate, prior, options, t_ex=scans.t_ex,
                                   smoothing=smoothing)
        result = test_chain(chain, thresholds, level)
        if result.unreliable:
            print(f"⚠ cell {index}: {'; '.join(result.diagnostics)}")
        return result, chain

    done, failures = run_cells(scans, work, options.workers, 'tested cells')
    nx, ny = scans.shape
    results = {(ix, iy): done[(ix, iy)][0] if (ix, iy) in done else None
               for iy in range(ny) for ix in range(nx)}
    chains = {idx: value[1] for idx, value in done.items()} if keep_chains else {}
    return ProbabilityMap(shape=scans.shape, results=results, level=level, thresholds=thresholds,
                          resolution=scans.resolution, label=scans.label, origin=scans.origin, chains=chains,
                          failures=failures)


test_grid.__test__ = False
