"""
Shared domain types for the A-scan toolkit.

Every other module works on these values:
- TimeGrid: uniform oscilloscope time axis (dt, n_samples, t0)
- AScan: one normalized signal at a grid location
- ExcitationPulse: the transducer forcing f(t), compact support in (0, t_ex)
- MaterialParams: damping b [1/us] and wave speed c [L/us]
- PlateModel: virtual plate of thickness L = 1 discretized with dz
- ScanSet: rectangular grid of A-scans (missing and faulty cells allowed)

All values are immutable after construction and safe to share between
worker threads.
"""

import os
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterator, List, Optional, Tuple

import numpy as np

DEBUG = os.getenv('ASCAN_DEBUG', '0') == '1'

# Oscilloscope setup of the reference experiment
DT_US = 0.0025
N_SAMPLES = 14000
T_EX_US = 11.8
PLATE_DZ = 0.001
RESOLUTION_MM = (5.0, 5.0)

# Relative tolerance for "this time lies on the grid"
GRID_TIME_TOLERANCE = 1e-9


class InvalidArgumentError(ValueError):
    """Argument outside its documented domain."""


class CorruptInputError(ValueError):
    """Measured data that cannot come from the instrument (e.g. counts > 511)."""


class InsufficientDataError(ValueError):
    """Too few locations / samples for a statistically meaningful result."""


class ScanSetParseError(ValueError):
    """Malformed scan-set, chain, map or config file."""

    def __init__(self, message: str, line: Optional[int] = None, offset: Optional[int] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")
        self.line = line
        self.offset = offset


class NumericalFailureError(ArithmeticError):
    """Non-finite intermediate inside a solver."""


class OptimizationFailureError(RuntimeError):
    """Optimizer could not start (objective non-finite everywhere)."""


def _frozen_array(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TimeGrid:
    dt: float
    n_samples: int
    t0: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.dt) or self.dt <= 0:
            raise InvalidArgumentError(f"time step must be positive, got dt={self.dt}")
        if int(self.n_samples) != self.n_samples or self.n_samples < 2:
            raise InvalidArgumentError(f"a time grid needs at least 2 samples, got {self.n_samples}")
        object.__setattr__(self, 'n_samples', int(self.n_samples))

    @property
    def record_length(self) -> float:
        return self.n_samples * self.dt

    @property
    def t_end(self) -> float:
        """Time of the last sample."""
        return self.t0 + (self.n_samples - 1) * self.dt

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_samples)

    def index_of(self, t: float) -> int:
        """Sample index of time t; t must lie on the grid."""
        pos = (t - self.t0) / self.dt
        idx = int(round(pos))
        if abs(pos - idx) > GRID_TIME_TOLERANCE * max(1.0, abs(pos)) or not 0 <= idx < self.n_samples:
            raise InvalidArgumentError(f"t={t} us is not a sample time of the grid (dt={self.dt}, n={self.n_samples})")
        return idx

    def frequencies_mhz(self) -> np.ndarray:
        """One-sided DFT bin frequencies in MHz."""
        return np.fft.rfftfreq(self.n_samples, d=self.dt)


def make_time_grid(dt: float, n: int) -> TimeGrid:
    """Uniform grid starting at t0 = 0."""
    return TimeGrid(dt=float(dt), n_samples=n, t0=0.0)


@dataclass(frozen=True, eq=False)
class AScan:
    grid: TimeGrid
    samples: np.ndarray
    location: Tuple[float, float] = (0.0, 0.0)
    index: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        samples = _frozen_array(self.samples)
        if samples.ndim != 1 or samples.size != self.grid.n_samples:
            raise InvalidArgumentError(
                f"A-scan has {samples.size} samples but its grid has {self.grid.n_samples}")
        object.__setattr__(self, 'samples', samples)
        object.__setattr__(self, 'location', (float(self.location[0]), float(self.location[1])))
        object.__setattr__(self, 'index', (int(self.index[0]), int(self.index[1])))

    def with_samples(self, samples) -> 'AScan':
        return replace(self, samples=samples)


@dataclass(frozen=True, eq=False)
class ExcitationPulse:
    grid: TimeGrid
    samples: np.ndarray
    t_ex: float

    def __post_init__(self):
        samples = _frozen_array(self.samples)
        if samples.ndim != 1 or samples.size != self.grid.n_samples:
            raise InvalidArgumentError(
                f"pulse has {samples.size} samples but its grid has {self.grid.n_samples}")
        if not self.grid.t0 < self.t_ex <= self.grid.t0 + self.grid.record_length:
            raise InvalidArgumentError(f"t_ex={self.t_ex} us lies outside the record")
        t = self.grid.times()
        if samples[0] != 0.0 or np.any(samples[t >= self.t_ex - GRID_TIME_TOLERANCE * self.grid.dt] != 0.0):
            raise InvalidArgumentError("pulse must vanish at t=0 and for t >= t_ex")
        object.__setattr__(self, 'samples', samples)

    @property
    def ex_index(self) -> int:
        """Index of the first sample at or after t_ex."""
        return int(np.ceil((self.t_ex - self.grid.t0) / self.grid.dt - GRID_TIME_TOLERANCE))


@dataclass(frozen=True)
class MaterialParams:
    b: float
    c: float

    def __post_init__(self):
        if not np.isfinite(self.b) or self.b < 0:
            raise InvalidArgumentError(f"damping must be >= 0, got b={self.b}")
        if not np.isfinite(self.c) or self.c <= 0:
            raise InvalidArgumentError(f"wave speed must be > 0, got c={self.c}")
        object.__setattr__(self, 'b', float(self.b))
        object.__setattr__(self, 'c', float(self.c))

    def as_array(self) -> np.ndarray:
        return np.array([self.b, self.c])


@dataclass(frozen=True)
class PlateModel:
    """Virtual plate of thickness L (=1 by convention) on a uniform z-grid.

    The physical wave speed follows from the Lame constants as
    c**2 = (lambda + 2*mu) / rho; only the ratio c/L enters the model, so the
    thickness is fixed to one and c is measured in L/us.
    """
    length: float = 1.0
    dz: float = PLATE_DZ

    def __post_init__(self):
        if self.length != 1.0:
            raise InvalidArgumentError(f"plate length is fixed to 1, got {self.length}")
        if not 0 < self.dz <= 0.01:
            raise InvalidArgumentError(f"dz must lie in (0, 0.01], got {self.dz}")
        ratio = self.length / self.dz
        if abs(ratio - round(ratio)) > 1e-9 * ratio:
            raise InvalidArgumentError(f"length/dz must be an integer, got {ratio}")

    @property
    def n_cells(self) -> int:
        return int(round(self.length / self.dz))

    def z_grid(self) -> np.ndarray:
        return np.linspace(0.0, self.length, self.n_cells + 1)


@dataclass(frozen=True, eq=False)
class ScanSet:
    locations: List[AScan]
    resolution: Tuple[float, float] = RESOLUTION_MM
    label: str = ''
    shape: Optional[Tuple[int, int]] = None
    origin: Tuple[float, float] = (0.0, 0.0)
    t_ex: Optional[float] = None
    units: str = 'normalized'
    faulty: FrozenSet[Tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self):
        scans = list(self.locations)
        if not scans:
            raise InvalidArgumentError("a scan set needs at least one location")
        grid = scans[0].grid
        for scan in scans[1:]:
            if scan.grid != grid:
                raise InvalidArgumentError(f"scan at {scan.index} has grid {scan.grid}, expected {grid}")
        if self.shape is None:
            nx = max(s.index[0] for s in scans) + 1
            ny = max(s.index[1] for s in scans) + 1
            object.__setattr__(self, 'shape', (nx, ny))
        nx, ny = self.shape
        seen = set()
        for scan in scans:
            ix, iy = scan.index
            if not (0 <= ix < nx and 0 <= iy < ny):
                raise InvalidArgumentError(f"location index {scan.index} outside grid {self.shape}")
            if scan.index in seen:
                raise InvalidArgumentError(f"duplicate location index {scan.index}")
            seen.add(scan.index)
        if self.units not in ('normalized', 'counts'):
            raise InvalidArgumentError(f"unknown units '{self.units}'")
        # row-major order: y outer, x inner
        scans.sort(key=lambda s: (s.index[1], s.index[0]))
        object.__setattr__(self, 'locations', scans)
        object.__setattr__(self, 'faulty', frozenset(tuple(i) for i in self.faulty))
        object.__setattr__(self, '_by_index', {s.index: s for s in scans})

    @property
    def grid(self) -> TimeGrid:
        return self.locations[0].grid

    def __len__(self) -> int:
        return len(self.locations)

    def __iter__(self) -> Iterator[AScan]:
        return iter(self.locations)

    def get(self, ix: int, iy: int) -> Optional[AScan]:
        return self._by_index.get((ix, iy))

    def location_mm(self, ix: int, iy: int) -> Tuple[float, float]:
        return (self.origin[0] + ix * self.resolution[0], self.origin[1] + iy * self.resolution[1])

    def mask(self) -> np.ndarray:
        """Boolean (ny, nx) array: True where a usable (present, not faulty) scan exists."""
        nx, ny = self.shape
        present = np.zeros((ny, nx), dtype=bool)
        for scan in self.locations:
            if scan.index not in self.faulty:
                present[scan.index[1], scan.index[0]] = True
        return present

    def usable(self) -> List[AScan]:
        return [s for s in self.locations if s.index not in self.faulty]

    def subset(self, mask: np.ndarray, label: Optional[str] = None) -> 'ScanSet':
        """Usable scans whose cell is True in the (ny, nx) mask."""
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.shape[1], self.shape[0]):
            raise InvalidArgumentError(f"mask shape {mask.shape} does not match grid (ny, nx)={self.shape[::-1]}")
        kept = [s for s in self.usable() if mask[s.index[1], s.index[0]]]
        if not kept:
            raise InsufficientDataError("mask selects no usable scan")
        return replace(self, locations=kept, label=label if label is not None else self.label,
                       faulty=frozenset())

    def with_faulty(self, indices) -> 'ScanSet':
        return replace(self, faulty=frozenset(self.faulty) | frozenset(tuple(i) for i in indices))


def grid_mask(shape: Tuple[int, int], x_range: Tuple[int, int], y_range: Tuple[int, int]) -> np.ndarray:
    """(ny, nx) mask that is True on the half-open index rectangle [x0,x1) x [y0,y1)."""
    nx, ny = shape
    mask = np.zeros((ny, nx), dtype=bool)
    mask[y_range[0]:y_range[1], x_range[0]:x_range[1]] = True
    return mask


def cell_values(items: Dict[Tuple[int, int], object], shape: Tuple[int, int], attr: str) -> np.ndarray:
    """Collect an attribute of per-cell results into a (ny, nx) float array, NaN where missing."""
    nx, ny = shape
    out = np.full((ny, nx), np.nan)
    for (ix, iy), item in items.items():
        if item is not None:
            out[iy, ix] = float(getattr(item, attr))
    return out
