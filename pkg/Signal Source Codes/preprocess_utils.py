"""
Preprocessing of raw oscilloscope records.

Pipeline per location: counts -> normalized amplitude, free-head subtraction,
jump-based fault detection.  The excitation part of a record (t < t_ex) is the
transducer forcing and is band-limited with a Tukey window before it is used
by the solver.
"""

import os
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Dict, Optional, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.signal.windows import tukey

from signal_core import (GRID_TIME_TOLERANCE, AScan, CorruptInputError, ExcitationPulse, InvalidArgumentError,
                         ScanSet, TimeGrid)

DEBUG = os.getenv('ASCAN_DEBUG', '0') == '1'

ZERO_LINE_COUNT = 256
MAX_COUNT = 511
# Larger jumps are accepted while the transducer drives the surface
ECHO_JUMP_THRESHOLD = 0.25
EXCITATION_JUMP_THRESHOLD = 1.0
SMOOTHING_CUTOFF_MHZ = 6.5
TUKEY_TAPER_FRACTION = 0.5
PROJECTION_THRESHOLD = 0.5


@dataclass(frozen=True, eq=False)
class RawScan:
    grid: TimeGrid
    counts: np.ndarray
    location: Tuple[float, float] = (0.0, 0.0)
    index: Tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class FaultReport:
    faulty: bool
    first_violation_index: Optional[int]
    max_echo_jump: float

    def __post_init__(self):
        if self.faulty != (self.first_violation_index is not None):
            raise InvalidArgumentError("faulty must be set iff a violation index is given")


def normalize(raw: RawScan) -> AScan:
    """Counts 0..511 with zero line 256 -> amplitude (counts - 256) / 256."""
    counts = np.asarray(raw.counts)
    if counts.size and (not np.all(np.isfinite(counts)) or np.any(counts != np.round(counts))):
        raise CorruptInputError(f"non-integer amplitude counts at location {raw.index}")
    if counts.size and (counts.min() < 0 or counts.max() > MAX_COUNT):
        bad = int(np.argmax((counts < 0) | (counts > MAX_COUNT)))
        raise CorruptInputError(
            f"count {counts[bad]} at sample {bad} outside 0..{MAX_COUNT} (location {raw.index})")
    samples = (counts.astype(float) - ZERO_LINE_COUNT) / ZERO_LINE_COUNT
    return AScan(grid=raw.grid, samples=samples, location=raw.location, index=raw.index)


def detect_faulty(scan: AScan, t_ex: float,
                  jump_threshold_echo: float = ECHO_JUMP_THRESHOLD,
                  jump_threshold_excitation: float = EXCITATION_JUMP_THRESHOLD) -> FaultReport:
    """
    Flag transmission glitches by successive differences.

    A jump |s[i+1] - s[i]| belongs to the time of s[i+1]; it is a violation when
    it exceeds the excitation threshold (t <= t_ex) or the echo threshold
    (t > t_ex).

    Returns:
        FaultReport with the index of the first offending sample
    """
    grid = scan.grid
    if not grid.t0 < t_ex < grid.t0 + grid.record_length:
        raise InvalidArgumentError(f"t_ex={t_ex} us outside the record")
    if jump_threshold_echo <= 0 or jump_threshold_excitation <= 0:
        raise InvalidArgumentError("jump thresholds must be positive")

    jumps = np.abs(np.diff(scan.samples))
    t_after = grid.times()[1:]
    in_echo = t_after > t_ex
    limits = np.where(in_echo, jump_threshold_echo, jump_threshold_excitation)
    violations = np.flatnonzero(jumps > limits)
    max_echo_jump = float(jumps[in_echo].max()) if np.any(in_echo) else 0.0

    if violations.size == 0:
        return FaultReport(faulty=False, first_violation_index=None, max_echo_jump=max_echo_jump)
    first = int(violations[0]) + 1
    if DEBUG:
        print(f"⚠ jump of {jumps[first - 1]:.3f} at sample {first} (location {scan.index})")
    return FaultReport(faulty=True, first_violation_index=first, max_echo_jump=max_echo_jump)


def subtract_head(plate: AScan, free_head: AScan) -> AScan:
    """Remove the transducer's free-head ringing from a plate record."""
    if plate.grid != free_head.grid:
        raise InvalidArgumentError(f"grid mismatch: plate {plate.grid} vs free head {free_head.grid}")
    return plate.with_samples(plate.samples - free_head.samples)


@dataclass(frozen=True)
class SmoothingOptions:
    cutoff: float = SMOOTHING_CUTOFF_MHZ
    taper_fraction: float = TUKEY_TAPER_FRACTION

    def __post_init__(self):
        if self.cutoff <= 0:
            raise InvalidArgumentError(f"cutoff must be positive, got {self.cutoff}")
        if not 0 < self.taper_fraction <= 1:
            raise InvalidArgumentError(f"taper fraction must lie in (0, 1], got {self.taper_fraction}")


@lru_cache(maxsize=16)
def _band_basis(n: int, dt: float, stop: int, cutoff: float, taper_fraction: float) -> np.ndarray:
    """
    Orthonormal basis on samples 1..stop-1 of what the windowed low-pass keeps on the support.

    The windowed low-pass is B D B^T with B the cosine/sine columns of the bins
    up to the cutoff and D the Tukey weights.  Restricted to the support its
    eigenvectors are B_s D^(1/2) v / sqrt(lam) for the eigenpairs (lam, v) of
    the small Gram matrix; those with lam >= PROJECTION_THRESHOLD are kept.
    """
    freqs = np.fft.rfftfreq(n, d=dt)
    n_band = int(np.count_nonzero(freqs <= cutoff))
    # symmetric window over bins -(n_band-1)..(n_band-1), centre at bin 0
    window = tukey(2 * n_band - 1, alpha=taper_fraction, sym=True)[n_band - 1:]
    weights = np.concatenate([window, window[1:]]) * (2.0 / n)
    weights[0] = window[0] / n

    phase = 2.0 * np.pi * np.outer(np.arange(1, stop), np.arange(n_band)) / n
    columns = np.hstack([np.cos(phase), np.sin(phase[:, 1:])])
    keep = weights > 0
    columns = columns[:, keep] * np.sqrt(weights[keep])

    lam, vec = linalg.eigh(columns.T @ columns)
    kept = lam >= PROJECTION_THRESHOLD
    if not kept.any():
        return np.zeros((stop - 1, 0))
    basis = columns @ (vec[:, kept] / np.sqrt(lam[kept]))
    basis, _ = linalg.qr(basis, mode='economic')
    if DEBUG:
        print(f"✓ smoothing basis: {basis.shape[1]} of {columns.shape[1]} band functions "
              f"(cutoff {cutoff} MHz, taper {taper_fraction})")
    return basis


def smooth_excitation(pulse: ExcitationPulse, cutoff: float = SMOOTHING_CUTOFF_MHZ,
                      taper_fraction: float = TUKEY_TAPER_FRACTION) -> ExcitationPulse:
    """
    Band-limit the forcing with a Tukey window on [-cutoff, cutoff], kept on the support (0, t_ex).

    The window is flat (=1) on low frequencies, tapers with a cosine over the
    outer taper_fraction of the band and is 0 beyond the cutoff.  Windowing
    and clamping are applied as one orthogonal projection onto the functions
    the windowed, clamped low-pass passes with gain at least
    PROJECTION_THRESHOLD, so smoothing twice equals smoothing once.
    """
    grid = pulse.grid
    nyquist = 0.5 / grid.dt
    if not 0 < cutoff < nyquist:
        raise InvalidArgumentError(f"cutoff {cutoff} MHz must lie in (0, {nyquist}) MHz")
    if not 0 < taper_fraction <= 1:
        raise InvalidArgumentError(f"taper fraction must lie in (0, 1], got {taper_fraction}")

    n = grid.n_samples
    stop = min(pulse.ex_index, n)
    smoothed = np.zeros(n)
    if stop > 1:
        basis = _band_basis(n, float(grid.dt), stop, float(cutoff), float(taper_fraction))
        support = np.asarray(pulse.samples[1:stop], dtype=float)
        smoothed[1:stop] = basis @ (basis.T @ support)
    return ExcitationPulse(grid=grid, samples=smoothed, t_ex=pulse.t_ex)


def pulse_from_scan(scan: AScan, t_ex: float) -> ExcitationPulse:
    """The measured record before t_ex is the forcing f(t)."""
    t = scan.grid.times()
    samples = np.array(scan.samples, copy=True)
    samples[0] = 0.0
    samples[t >= t_ex - GRID_TIME_TOLERANCE * scan.grid.dt] = 0.0
    return ExcitationPulse(grid=scan.grid, samples=samples, t_ex=t_ex)


def excitation_from_scan(scan: AScan, t_ex: float,
                         smoothing: SmoothingOptions = SmoothingOptions()) -> ExcitationPulse:
    """Per-location forcing: the record before t_ex, smoothed."""
    return smooth_excitation(pulse_from_scan(scan, t_ex), smoothing.cutoff, smoothing.taper_fraction)


def preprocess_scan_set(scans: ScanSet, t_ex: float,
                        free_head: Optional[Union[AScan, ScanSet]] = None,
                        jump_threshold_echo: float = ECHO_JUMP_THRESHOLD,
                        jump_threshold_excitation: float = EXCITATION_JUMP_THRESHOLD
                        ) -> Tuple[ScanSet, Dict[Tuple[int, int], FaultReport]]:
    """
    Normalize (if the set holds counts), subtract the free head and flag faults.

    Faulty locations stay in the set and are marked, so maps keep their shape.
    """
    if isinstance(free_head, ScanSet):
        if len(free_head) == 1:
            free_head = free_head.locations[0]
        elif free_head.shape != scans.shape:
            raise InvalidArgumentError(
                f"free-head grid {free_head.shape} does not match scan grid {scans.shape}")

    cleaned = []
    reports: Dict[Tuple[int, int], FaultReport] = {}
    for scan in scans.locations:
        if scans.units == 'counts':
            scan = normalize(RawScan(grid=scan.grid, counts=scan.samples,
                                     location=scan.location, index=scan.index))
        if isinstance(free_head, AScan):
            scan = subtract_head(scan, free_head)
        elif isinstance(free_head, ScanSet):
            head = free_head.get(*scan.index)
            if head is None:
                raise InvalidArgumentError(f"no free-head record for location {scan.index}")
            scan = subtract_head(scan, head)
        reports[scan.index] = detect_faulty(scan, t_ex, jump_threshold_echo, jump_threshold_excitation)
        cleaned.append(scan)

    faulty = {idx for idx, rep in reports.items() if rep.faulty} | set(scans.faulty)
    if DEBUG:
        print(f"✓ preprocessed {len(cleaned)} scans, {len(faulty)} faulty")
    return replace(scans, locations=cleaned, units='normalized', t_ex=t_ex,
                   faulty=frozenset(faulty)), reports
