"""
Ground truth for the solver and the estimators.

- make_pulse: Hann-windowed tone burst (smooth, compact support in (0, t_ex))
- fdtd_solve: independent finite-difference time-domain solver of the same
  boundary value problem, used only to cross-check telegraph_solver
- make_synthetic_plate: scan grid with an implanted damage patch
"""

import os
import sys
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.signal import resample

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'Signal Source Codes'))
import grid_workers  # type: ignore
from signal_core import (AScan, ExcitationPulse, InvalidArgumentError,  # type: ignore
                         MaterialParams, PlateModel, ScanSet, TimeGrid, RESOLUTION_MM)

from bayes_utils import PriorBox
from telegraph_solver import SolverContext, forward_model

DEBUG = os.getenv('ASCAN_DEBUG', '0') == '1'

PULSE_CENTER_MHZ = 1.0
PULSE_CYCLES = 4
PULSE_START_US = 4.0
FDTD_REFINEMENT = 8


@dataclass(frozen=True)
class SyntheticPlateSpec:
    shape: Tuple[int, int] = (21, 19)
    base: Tuple[float, float] = (0.12, 0.224)
    # half-open index rectangle (x0, x1, y0, y1); None = undamaged plate
    patch: Optional[Tuple[int, int, int, int]] = (8, 12, 7, 11)
    delta_b: float = 0.15
    delta_c: float = -0.01
    noise_sigma: float = 0.0
    seed: int = 0
    # per-cell i.i.d. material variation (sigma_b, sigma_c)
    param_jitter: Tuple[float, float] = (0.0, 0.0)
    resolution: Tuple[float, float] = RESOLUTION_MM
    label: str = 'synthetic plate'
    prior: PriorBox = field(default_factory=PriorBox)

    def __post_init__(self):
        nx, ny = self.shape
        if nx < 1 or ny < 1:
            raise InvalidArgumentError(f"grid shape must be positive, got {self.shape}")
        if self.noise_sigma < 0 or min(self.param_jitter) < 0:
            raise InvalidArgumentError("noise levels must be >= 0")
        if not self.prior.contains(*self.base):
            raise InvalidArgumentError(f"base parameters {self.base} outside the prior box")
        if self.patch is not None:
            x0, x1, y0, y1 = self.patch
            if not (0 <= x0 < x1 <= nx and 0 <= y0 < y1 <= ny):
                raise InvalidArgumentError(f"damage patch {self.patch} outside grid {self.shape}")
            if not self.prior.contains(*self.damaged):
                raise InvalidArgumentError(f"damaged parameters {self.damaged} outside the prior box")

    @property
    def damaged(self) -> Tuple[float, float]:
        return (self.base[0] + self.delta_b, self.base[1] + self.delta_c)

    def in_patch(self, ix: int, iy: int) -> bool:
        if self.patch is None:
            return False
        x0, x1, y0, y1 = self.patch
        return x0 <= ix < x1 and y0 <= iy < y1

    def patch_mask(self) -> np.ndarray:
        nx, ny = self.shape
        mask = np.zeros((ny, nx), dtype=bool)
        if self.patch is not None:
            x0, x1, y0, y1 = self.patch
            mask[y0:y1, x0:x1] = True
        return mask


def make_pulse(center_freq: float = PULSE_CENTER_MHZ, n_cycles: int = PULSE_CYCLES, amplitude: float = 1.0,
               grid: Optional[TimeGrid] = None, t_ex: float = 11.8,
               t_start: float = PULSE_START_US) -> ExcitationPulse:
    """
    Tone burst amplitude * sin^2(pi (t-t0)/D) * sin(2 pi f (t-t0)) on [t0, t0 + D].

    D = n_cycles / center_freq; value and slope vanish at both ends.
    """
    if grid is None:
        raise InvalidArgumentError("a time grid is required")
    if center_freq <= 0 or n_cycles <= 0:
        raise InvalidArgumentError("center frequency and cycle count must be positive")
    duration = n_cycles / center_freq
    if not (grid.t0 < t_start and t_start + duration < t_ex):
        raise InvalidArgumentError(
            f"pulse support [{t_start}, {t_start + duration}] us does not fit in (0, {t_ex}) us")
    t = grid.times() - t_start
    inside = (t > 0) & (t < duration)
    samples = np.zeros(grid.n_samples)
    phase = t[inside] / duration
    samples[inside] = amplitude * np.sin(np.pi * phase) ** 2 * np.sin(2 * np.pi * center_freq * t[inside])
    return ExcitationPulse(grid=grid, samples=samples, t_ex=t_ex)


def _fdtd_run(params: MaterialParams, pulse: ExcitationPulse, plate: PlateModel, grid: TimeGrid,
              refinement: int, track_energy: bool):
    r = int(refinement)
    if r < 1 or r != refinement:
        raise InvalidArgumentError(f"refinement must be a positive integer, got {refinement}")
    if grid != pulse.grid:
        raise InvalidArgumentError("output grid must equal the pulse grid")
    dt_f = grid.dt / r
    dz_f = plate.dz / r
    courant = params.c * dt_f / dz_f
    if courant > 1.0 + 1e-12:
        raise InvalidArgumentError(f"CFL violated: c*dt/dz = {courant:.3f} > 1")

    n_nodes = plate.n_cells * r + 1
    n_steps = (grid.n_samples - 1) * r
    forcing = resample(np.asarray(pulse.samples), grid.n_samples * r)
    switch_step = int(round((pulse.t_ex - grid.t0) / dt_f))

    c2 = courant ** 2
    damp = 0.5 * params.b * dt_f
    weights = np.ones(n_nodes)
    weights[0] = weights[-1] = 0.5

    u_prev = np.zeros(n_nodes)
    u = np.zeros(n_nodes)
    lap = np.empty(n_nodes)
    surface = np.zeros(grid.n_samples)
    energy_times, energies = [], []

    for n in range(n_steps):
        lap[1:-1] = u[2:] - 2.0 * u[1:-1] + u[:-2]
        lap[0] = 2.0 * (u[1] - u[0])
        lap[-1] = 2.0 * (u[-2] - u[-1])
        u_next = (2.0 * u - (1.0 - damp) * u_prev + c2 * lap) / (1.0 + damp)
        if n + 1 <= switch_step:
            u_next[0] = forcing[n + 1]

        if track_energy and n + 1 > switch_step and (n + 1) % r == 0:
            kinetic = np.sum(weights * ((u_next - u) / dt_f) ** 2)
            strain = np.sum(np.diff(u_next) * np.diff(u)) / dz_f ** 2
            energy_times.append(grid.t0 + (n + 0.5) * dt_f)
            energies.append(0.5 * dz_f * (kinetic + params.c ** 2 * strain))

        u_prev, u = u, u_next
        if (n + 1) % r == 0:
            surface[(n + 1) // r] = u[0]
    return surface, np.array(energy_times), np.array(energies)


def fdtd_solve(params: MaterialParams, pulse: ExcitationPulse, plate: PlateModel,
               grid: Optional[TimeGrid] = None, refinement: int = FDTD_REFINEMENT) -> AScan:
    """
    Centred second-order scheme for u_tt + b u_t = c**2 u_zz on a grid refined
    by `refinement` in both z and t.  Dirichlet u(0,t) = f(t) up to t_ex, then
    Neumann; Neumann at z = L.  The surface trace is returned on the pulse grid.
    """
    grid = grid or pulse.grid
    surface, _, _ = _fdtd_run(params, pulse, plate, grid, refinement, track_energy=False)
    return AScan(grid=grid, samples=surface)


def fdtd_energy_trace(params: MaterialParams, pulse: ExcitationPulse, plate: PlateModel,
                      grid: Optional[TimeGrid] = None, refinement: int = FDTD_REFINEMENT):
    """Discrete (conserved for b = 0) energy after t_ex; returns (times, energies)."""
    grid = grid or pulse.grid
    _, times, energies = _fdtd_run(params, pulse, plate, grid, refinement, track_energy=True)
    return times, energies


def cell_params(spec: SyntheticPlateSpec, ix: int, iy: int) -> MaterialParams:
    """Material parameters of one cell, jitter drawn from the cell's own stream."""
    b, c = spec.damaged if spec.in_patch(ix, iy) else spec.base
    sigma_b, sigma_c = spec.param_jitter
    if sigma_b > 0 or sigma_c > 0:
        rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0, ix, iy)))
        db, dc = rng.standard_normal(2)
        b = float(np.clip(b + sigma_b * db, spec.prior.b_min, spec.prior.b_max))
        c = float(np.clip(c + sigma_c * dc, spec.prior.c_min, spec.prior.c_max))
    return MaterialParams(b, c)


def make_synthetic_plate(spec: SyntheticPlateSpec, pulse: ExcitationPulse, plate: PlateModel,
                         grid: Optional[TimeGrid] = None, workers: Optional[int] = None) -> ScanSet:
    """Forward-model every cell and add i.i.d. Gaussian sample noise (deterministic per seed)."""
    grid = grid or pulse.grid
    nx, ny = spec.shape
    cells = {(ix, iy): cell_params(spec, ix, iy) for iy in range(ny) for ix in range(nx)}

    # identical parameters share one solve
    distinct = sorted(set(cells.values()), key=lambda p: (p.b, p.c))
    solved: Dict[MaterialParams, np.ndarray] = grid_workers.run_grid(
        ((p, p) for p in distinct),
        lambda _, p: forward_model(p, pulse, plate, grid, SolverContext()).samples,
        workers=workers, label='synthetic solves')

    scans = []
    for (ix, iy), params in cells.items():
        samples = np.array(solved[params], copy=True)
        if spec.noise_sigma > 0:
            rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(1, ix, iy)))
            samples += spec.noise_sigma * rng.standard_normal(samples.size)
        location = (ix * spec.resolution[0], iy * spec.resolution[1])
        scans.append(AScan(grid=grid, samples=samples, location=location, index=(ix, iy)))

    if DEBUG:
        print(f"✓ synthetic plate {spec.shape}, {len(distinct)} distinct parameter pairs")
    return ScanSet(locations=scans, resolution=spec.resolution, label=spec.label,
                   shape=spec.shape, t_ex=pulse.t_ex)
