"""
Deterministic calibration of (b, c) per location.

The misfit ||g_meas - g_comp||_L2 is minimized with the Nelder-Mead simplex in
box-scaled coordinates; values outside the box count as +inf so the simplex
contracts back inside.
"""

import os
import sys
from dataclasses import dataclass
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.integrate import trapezoid

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'Signal Source Codes'))
import grid_workers  # type: ignore
from preprocess_utils import SmoothingOptions, excitation_from_scan  # type: ignore
from scanset_io import MapLayer, ParameterTable  # type: ignore
from signal_core import (AScan, ExcitationPulse, InvalidArgumentError,  # type: ignore
                         MaterialParams, NumericalFailureError, OptimizationFailureError,
                         PlateModel, ScanSet, cell_values)

from telegraph_solver import SolverContext, forward_model

DEBUG = os.getenv('ASCAN_DEBUG', '0') == '1'

START_PARAMS = (0.2, 0.22)
BOX = (0.05, 0.6, 0.2, 0.25)  # b_min, b_max, c_min, c_max

LAYER_UNITS = {'b': '1/us', 'c': 'L/us', 'misfit': 'normalized amplitude * sqrt(us)'}


@dataclass(frozen=True)
class NelderMeadOptions:
    bounds: Optional[Tuple[float, float, float, float]] = BOX
    tolerance: float = 1e-5
    max_iterations: int = 500
    initial_step: float = 0.05
    reflect: float = 1.0
    expand: float = 2.0
    contract: float = 0.5
    shrink: float = 0.5


@dataclass(frozen=True)
class CalibrationResult:
    params: MaterialParams
    misfit: float
    iterations: int
    converged: bool
    evaluations: int = 0

    @property
    def b(self) -> float:
        return self.params.b

    @property
    def c(self) -> float:
        return self.params.c


@dataclass(frozen=True, eq=False)
class ParameterMap:
    shape: Tuple[int, int]
    results: Dict[Tuple[int, int], Optional[CalibrationResult]]
    resolution: Tuple[float, float] = (5.0, 5.0)
    label: str = ''
    origin: Tuple[float, float] = (0.0, 0.0)

    def values(self, name: str) -> np.ndarray:
        """(ny, nx) array of 'b', 'c' or 'misfit'; NaN where no result."""
        if name not in LAYER_UNITS:
            raise InvalidArgumentError(f"unknown layer '{name}', expected one of {sorted(LAYER_UNITS)}")
        return cell_values(self.results, self.shape, name)

    def layer(self, name: str) -> MapLayer:
        return MapLayer.from_grid(self.values(name), name, LAYER_UNITS[name], self.resolution, self.origin)

    @classmethod
    def from_table(cls, table: ParameterTable) -> 'ParameterMap':
        """Map rebuilt from a per-cell parameter table; rows without b, c stay empty."""
        results: Dict[Tuple[int, int], Optional[CalibrationResult]] = {}
        for row in table.frame.itertuples(index=False):
            index = (int(row.ix), int(row.iy))
            if np.isfinite(row.b) and np.isfinite(row.c):
                results[index] = CalibrationResult(params=MaterialParams(row.b, row.c), misfit=float(row.misfit),
                                                   iterations=int(row.iterations), converged=bool(row.converged))
            else:
                results[index] = None
        return cls(shape=table.shape, results=results, resolution=table.resolution,
                   label=table.label, origin=table.origin)

    def converged_mask(self) -> np.ndarray:
        nx, ny = self.shape
        mask = np.zeros((ny, nx), dtype=bool)
        for (ix, iy), res in self.results.items():
            if res is not None and res.converged:
                mask[iy, ix] = True
        return mask


def misfit(params: MaterialParams, g_meas: AScan, pulse: ExcitationPulse, plate: PlateModel,
           context: Optional[SolverContext] = None) -> float:
    """Trapezoid-weighted L2 norm of g_meas - forward_model(params) over the record."""
    if g_meas.grid != pulse.grid:
        raise InvalidArgumentError(f"measurement grid {g_meas.grid} differs from pulse grid {pulse.grid}")
    g_comp = forward_model(params, pulse, plate, g_meas.grid, context)
    diff = g_meas.samples - g_comp.samples
    return float(np.sqrt(trapezoid(diff * diff, dx=g_meas.grid.dt)))


def nelder_mead(objective: Callable[[np.ndarray], float], start: MaterialParams,
                options: NelderMeadOptions = NelderMeadOptions()) -> CalibrationResult:
    """
    Nelder-Mead simplex on (b, c).

    The simplex lives in scaled coordinates (p - lower) / (upper - lower); the
    initial vertices are the start plus `initial_step` along each axis.
    Stops when the simplex diameter drops below `tolerance` or after
    `max_iterations`.
    """
    if options.bounds is not None:
        b_min, b_max, c_min, c_max = options.bounds
        lower = np.array([b_min, c_min])
        span = np.array([b_max - b_min, c_max - c_min])
        if np.any(span <= 0):
            raise InvalidArgumentError(f"empty bounds {options.bounds}")
    else:
        lower, span = np.zeros(2), np.ones(2)

    evaluations = 0

    def f(x: np.ndarray) -> float:
        nonlocal evaluations
        if options.bounds is not None and (np.any(x < 0.0) or np.any(x > 1.0)):
            return np.inf
        evaluations += 1
        try:
            value = float(objective(lower + span * x))
        except (InvalidArgumentError, NumericalFailureError):
            return np.inf
        return value if np.isfinite(value) else np.inf

    x0 = (start.as_array() - lower) / span
    simplex = [x0]
    for axis in range(2):
        step = np.zeros(2)
        step[axis] = options.initial_step
        vertex = x0 + step
        if options.bounds is not None and vertex[axis] > 1.0:
            vertex = x0 - step
        simplex.append(vertex)
    simplex = np.array(simplex)
    values = np.array([f(v) for v in simplex])
    if not np.any(np.isfinite(values)):
        raise OptimizationFailureError(f"objective is not finite at any initial vertex around {start}")

    iterations = 0
    converged = False
    while True:
        order = np.argsort(values, kind='stable')
        simplex, values = simplex[order], values[order]
        diameter = max(np.linalg.norm(simplex[i] - simplex[j]) for i in range(3) for j in range(i + 1, 3))
        if diameter < options.tolerance:
            converged = True
            break
        if iterations >= options.max_iterations:
            break
        iterations += 1

        centroid = simplex[:-1].mean(axis=0)
        worst = simplex[-1].copy()
        xr = centroid + options.reflect * (centroid - worst)
        fr = f(xr)
        if values[0] <= fr < values[-2]:
            simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[0]:
            xe = centroid + options.expand * (xr - centroid)
            fe = f(xe)
            if fe < fr:
                simplex[-1], values[-1] = xe, fe
            else:
                simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[-1]:
            xc = centroid + options.contract * (xr - centroid)
            fc = f(xc)
            if fc <= fr:
                simplex[-1], values[-1] = xc, fc
                continue
        else:
            xc = centroid + options.contract * (worst - centroid)
            fc = f(xc)
            if fc < values[-1]:
                simplex[-1], values[-1] = xc, fc
                continue
        # shrink towards the best vertex
        for i in range(1, 3):
            simplex[i] = simplex[0] + options.shrink * (simplex[i] - simplex[0])
            values[i] = f(simplex[i])

    best = lower + span * simplex[0]
    return CalibrationResult(params=MaterialParams(*best), misfit=float(values[0]),
                             iterations=iterations, converged=converged, evaluations=evaluations)


def calibrate_scan(scan: AScan, pulse: Optional[ExcitationPulse], plate: PlateModel,
                   start: MaterialParams = MaterialParams(*START_PARAMS),
                   options: NelderMeadOptions = NelderMeadOptions(),
                   t_ex: Optional[float] = None,
                   smoothing: SmoothingOptions = SmoothingOptions()) -> CalibrationResult:
    """Fit one location; without a shared pulse the scan's own smoothed excitation is used."""
    if pulse is None:
        if t_ex is None:
            raise InvalidArgumentError("t_ex is required when the pulse is taken from the scan")
        pulse = excitation_from_scan(scan, t_ex, smoothing)
    context = SolverContext()
    return nelder_mead(lambda p: misfit(MaterialParams(*p), scan, pulse, plate, context), start, options)


def calibrate_grid(scans: ScanSet, pulse: Optional[ExcitationPulse], plate: PlateModel,
                   start: MaterialParams = MaterialParams(*START_PARAMS),
                   options: NelderMeadOptions = NelderMeadOptions(),
                   workers: Optional[int] = None,
                   smoothing: SmoothingOptions = SmoothingOptions()) -> ParameterMap:
    """Independent Nelder-Mead fit per usable location; faulty cells stay empty."""

    def work(index, scan):
        try:
            result = calibrate_scan(scan, pulse, plate, start, options, t_ex=scans.t_ex, smoothing=smoothing)
        except (OptimizationFailureError, NumericalFailureError) as e:
            print(f"⚠ calibration failed at {index}: {e}")
            return None
        if not result.converged:
            print(f"⚠ cell {index} not converged after {result.iterations} iterations "
                  f"(b={result.b:.4f}, c={result.c:.4f})")
        return result

    results = grid_workers.run_grid(((s.index, s) for s in scans.usable()), work,
                                    workers=workers, label='calibrated cells')
    nx, ny = scans.shape
    full = {(ix, iy): results.get((ix, iy)) for iy in range(ny) for ix in range(nx)}
    if DEBUG:
        done = sum(r is not None for r in full.values())
        print(f"✓ calibrated {done}/{nx * ny} cells")
    return ParameterMap(shape=scans.shape, results=full, resolution=scans.resolution,
                        label=scans.label, origin=scans.origin)


def map_statistics(pmap: ParameterMap, mask: np.ndarray, name: str) -> Tuple[float, float]:
    """Mean and standard deviation of a layer over the True cells of a (ny, nx) mask."""
    values = pmap.values(name)[np.asarray(mask, dtype=bool)]
    values = values[np.isfinite(values)]
    if values.size == 0:
        return float('nan'), float('nan')
    return float(values.mean()), float(values.std(ddof=1)) if values.size > 1 else 0.0
